"""Tiled inference with patch correspondence retrieval (PCR).

Large images are restored patch by patch.  For every tile of the degraded
reselected frame, the reference crop is not taken at the same corner but at
the corner shifted by the mean optical-flow displacement over the tile, so the
reference patch shows the same content even under large global motion.  The
matching patch of the key-photo -> reselected flow is cropped at the shifted
corner and fed to the motion encoder.

Flow convention (see :mod:`refbridge.flow`): ``flow_ab`` satisfies
``a[y, x] ~ b[y + v, x + u]``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import bridge, codec
from . import flow as flowlib
from . import numerics as nx
from .degradation import degrade
from .imageio import sub_seed
from .model import Wiring

log = logging.getLogger(__name__)


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    patch: int
    overlap: int
    corners: tuple    # ((x, y), ...) row-major

    def __len__(self):
        return len(self.corners)

    def window(self, i):
        x, y = self.corners[i]
        return slice(y, y + self.patch), slice(x, x + self.patch)


def _axis_corners(n, p, stride):
    if n == p:
        return [0]
    count = math.ceil((n - p) / stride) + 1
    return sorted({min(k * stride, n - p) for k in range(count)})


def plan_tiles(height, width, patch, overlap=0):
    """Corners of a stride ``patch - overlap`` grid; the last row/column is
    pulled back so every tile lies inside the image."""
    if patch <= 0:
        raise TilingError(f"patch size must be positive, got {patch}")
    if patch > min(height, width):
        raise TilingError(f"patch {patch} exceeds image {height}x{width}")
    if not 0 <= overlap < patch:
        raise TilingError(f"overlap must lie in [0, {patch}), got {overlap}")
    stride = patch - overlap
    ys = _axis_corners(height, patch, stride)
    xs = _axis_corners(width, patch, stride)
    return TilePlan(height, width, patch, overlap, tuple((x, y) for y in ys for x in xs))


def mean_displacement(flow_patch):
    """Average (u, v) over a flow patch."""
    flow_patch = np.asarray(flow_patch, dtype=np.float64)
    return float(flow_patch[..., 0].mean()), float(flow_patch[..., 1].mean())


def round_half_away(x):
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class PatchCorrespondence:
    tile: int
    corner: tuple        # (x, y) of the tile in the reselected frame
    displacement: tuple  # mean (u, v) of the reselected -> key-photo flow
    aligned: tuple       # (x, y) of the reference crop
    clamped: bool

    @property
    def offset(self):
        return self.aligned[0] - self.corner[0], self.aligned[1] - self.corner[1]


def _check_flow(flow, plan, what):
    if flow.shape[:2] != (plan.height, plan.width) or flow.shape[-1] != 2:
        raise TilingError(f"{what} has shape {flow.shape}, plan is {plan.height}x{plan.width}")


def retrieve_reference_patch(plan, i, flow_ls_lo, ref):
    """Crop the reference at the tile corner moved by the tile's mean flow.

    The shifted corner is rounded half away from zero and clamped to the
    image; ``clamped`` records whether the clamp changed it.
    """
    flow_ls_lo = np.asarray(flow_ls_lo)
    _check_flow(flow_ls_lo, plan, "flow")
    p = plan.patch
    x, y = plan.corners[i]
    dx, dy = mean_displacement(flow_ls_lo[y:y + p, x:x + p])
    rx, ry = round_half_away(x + dx), round_half_away(y + dy)
    ax = min(max(rx, 0), plan.width - p)
    ay = min(max(ry, 0), plan.height - p)
    corr = PatchCorrespondence(i, (x, y), (dx, dy), (ax, ay), (ax, ay) != (rx, ry))
    return np.asarray(ref)[ay:ay + p, ax:ax + p], corr


def retrieve_flow_patch(plan, corr, flow_lo_ls):
    """The p x p crop of the key-photo -> reselected flow at the aligned corner."""
    flow_lo_ls = np.asarray(flow_lo_ls)
    _check_flow(flow_lo_ls, plan, "flow")
    ax, ay = corr.aligned
    return flow_lo_ls[ay:ay + plan.patch, ax:ax + plan.patch]


# ---------------------------------------------------------------------------
# blending
# ---------------------------------------------------------------------------

def _ramp(n, lead, trail):
    """1-D weights: linear rise over ``lead`` samples, fall over ``trail``."""
    w = np.ones(n)
    if lead:
        w[:lead] = (np.arange(lead) + 1) / (lead + 1)
    if trail:
        w[n - trail:] = np.minimum(w[n - trail:], (np.arange(trail, 0, -1)) / (trail + 1))
    return w


def tile_weights(plan, i):
    """Separable ramp weights of tile ``i``, rising only on sides shared with a neighbour."""
    x, y = plan.corners[i]
    p = plan.patch
    xs = sorted({c[0] for c in plan.corners})
    ys = sorted({c[1] for c in plan.corners})

    def sides(v, grid, extent):
        k = grid.index(v)
        lead = grid[k - 1] + p - v if k > 0 else 0
        trail = v + p - grid[k + 1] if k + 1 < len(grid) else 0
        return _ramp(extent, max(lead, 0), max(trail, 0))

    return np.outer(sides(y, ys, p), sides(x, xs, p))


def blend_tiles(patches, plan):
    """Weighted average of the restored tiles; weights are normalised per pixel."""
    patches = list(patches)
    if len(patches) != len(plan):
        raise TilingError(f"expected {len(plan)} patches, got {len(patches)}")
    first = np.asarray(patches[0])
    acc = np.zeros((plan.height, plan.width) + first.shape[2:])
    norm = np.zeros((plan.height, plan.width))
    for i, patch in enumerate(patches):
        patch = np.asarray(patch, dtype=np.float64)
        if patch.shape[:2] != (plan.patch, plan.patch):
            raise TilingError(f"patch {i} has shape {patch.shape}, plan expects {plan.patch}x{plan.patch}")
        w = tile_weights(plan, i)
        sy, sx = plan.window(i)
        acc[sy, sx] += patch * (w[..., None] if patch.ndim == 3 else w)
        norm[sy, sx] += w
    if np.any(norm == 0):
        raise TilingError("plan leaves pixels uncovered")
    out = acc / (norm[..., None] if acc.ndim == 3 else norm)
    return out.astype(first.dtype if first.dtype.kind == "f" else np.float32)


# ---------------------------------------------------------------------------
# end-to-end restoration
# ---------------------------------------------------------------------------

@dataclass
class TileInputs:
    lq: np.ndarray
    ref: np.ndarray
    attn_flow: np.ndarray   # key-photo -> reselected, in patch coordinates
    align_flow: np.ndarray  # reselected -> key-photo, in patch coordinates
    corr: PatchCorrespondence


def prepare_tiles(lq, ref, flow_ls_lo, flow_lo_ls, plan, pcr=True):
    """Per-tile inputs for the restorer.

    With ``pcr`` off every reference crop is co-located with its tile.  The
    flow crops are expressed relative to the patch pair: the attention flow
    gains the corner offset and the alignment flow loses it, so a perfect PCR
    shift leaves a residual motion near zero.
    """
    zero = np.zeros_like(flow_ls_lo)
    tiles = []
    for i in range(len(plan)):
        ref_patch, corr = retrieve_reference_patch(plan, i, flow_ls_lo if pcr else zero, ref)
        ox, oy = corr.offset
        attn = retrieve_flow_patch(plan, corr, flow_lo_ls) + np.array([ox, oy], dtype=np.float32)
        sy, sx = plan.window(i)
        align = flow_ls_lo[sy, sx] - np.array([ox, oy], dtype=np.float32)
        tiles.append(TileInputs(lq[sy, sx], ref_patch, attn.astype(np.float32), align.astype(np.float32), corr))
    return tiles


def _restore_batch(model, wiring, tiles, steps, seeds):
    f = model.config.factor
    lq = np.stack([t.lq for t in tiles]).astype(np.float32)
    ref = np.stack([t.ref for t in tiles]).astype(np.float32)
    attn = np.stack([t.attn_flow for t in tiles])
    align = np.stack([t.align_flow for t in tiles])
    z_ls = codec.encode(lq, f).astype(model.dtype)
    eps = np.stack([np.random.default_rng(s).standard_normal(z_ls.shape[1:]) for s in seeds]).astype(z_ls.dtype)
    with nx.no_grad():
        vel = wiring.velocity_fn(model, ref, attn, align)
        z = bridge.sample(vel, z_ls, steps=steps, eps=eps)
    return [codec.decode(zi, f, clamp=True) for zi in z]


@dataclass
class RestoreRecord:
    plan: TilePlan
    correspondences: list
    seed: int
    pcr: bool
    wiring: str

    def to_dict(self):
        return {
            "height": self.plan.height,
            "width": self.plan.width,
            "patch": self.plan.patch,
            "overlap": self.plan.overlap,
            "seed": self.seed,
            "pcr": self.pcr,
            "wiring": self.wiring,
            "tiles": [
                {
                    "tile": c.tile,
                    "corner": list(c.corner),
                    "displacement": [round(v, 6) for v in c.displacement],
                    "aligned": list(c.aligned),
                    "clamped": c.clamped,
                }
                for c in self.correspondences
            ],
        }


def restore_image(lq, ref, model, degradation=None, patch=64, overlap=8, seed=0, steps=bridge.DEFAULT_STEPS,
                  pcr=True, wiring=None, flow_block=16, flow_search=24, flow_fwd=None, flow_bwd=None,
                  batch=8, workers=1, return_record=False):
    """Restore a degraded reselected frame ``lq`` guided by the clean key photo ``ref``.

    The reference is degraded with ``degradation`` (I_Lo) so both flows are
    estimated between images of matching quality; ``flow_fwd`` (key photo ->
    reselected) and ``flow_bwd`` (reselected -> key photo) skip the estimate.
    Tile ``i`` uses sampler seed ``sub_seed(seed, i)``.  Tiles run in chunks of
    ``batch`` on up to ``workers`` threads; blending happens afterwards in
    tile order.
    """
    lq = np.asarray(lq, dtype=np.float32)
    ref = np.asarray(ref, dtype=np.float32)
    if lq.shape != ref.shape:
        raise TilingError(f"lq {lq.shape} and reference {ref.shape} differ in extents")
    wiring = wiring or Wiring("full")
    if flow_fwd is None or flow_bwd is None:
        lo = degrade(ref, degradation) if degradation is not None else ref
        if flow_bwd is None:
            flow_bwd = flowlib.estimate_flow(lq, lo, flow_block, flow_search)
        if flow_fwd is None:
            flow_fwd = flowlib.estimate_flow(lo, lq, flow_block, flow_search)
    flow_fwd = np.asarray(flow_fwd, dtype=np.float32)
    flow_bwd = np.asarray(flow_bwd, dtype=np.float32)
    plan = plan_tiles(lq.shape[0], lq.shape[1], patch, overlap)
    tiles = prepare_tiles(lq, ref, flow_bwd, flow_fwd, plan, pcr)
    chunks = [list(range(s, min(s + batch, len(tiles)))) for s in range(0, len(tiles), batch)]

    def run(idx):
        try:
            return _restore_batch(model, wiring, [tiles[i] for i in idx], steps, [sub_seed(seed, i) for i in idx])
        except Exception as exc:
            raise TilingError(f"tiles {idx[0]}-{idx[-1]}: {exc}") from exc

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    restored = [p for chunk in results for p in chunk]
    log.info("restored %d tiles (%d clamped)", len(tiles), sum(t.corr.clamped for t in tiles))
    out = blend_tiles(restored, plan)
    if return_record:
        return out, RestoreRecord(plan, [t.corr for t in tiles], seed, pcr, wiring.mode)
    return out
