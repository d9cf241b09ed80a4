"""Optical flow: block matching, analytic fields, warping, Middlebury ``.flo`` I/O.

A flow is an (H, W, 2) float32 array, channel 0 = x displacement (u), channel
1 = y displacement (v), in pixels.  The flow from ``a`` to ``b`` satisfies
``a[y, x] ~ b[y + v, x + u]``, so ``warp(b, flow_ab)`` resamples ``b`` onto
``a``'s grid.
"""
from __future__ import annotations

import struct

import numpy as np

FLO_MAGIC = 202021.25


class FlowFormatError(ValueError):
    pass


def to_gray(img):
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _match_gray(img):
    # snap to a 2^-20 grid so SAD sums are exact in float64 whatever the order
    g = to_gray(img).astype(np.float64)
    return np.round(g * 1048576.0) / 1048576.0


def _candidate_order(search):
    """Displacements ordered by the tie-break: |dx|+|dy|, then dy, then dx."""
    cands = [(dx, dy) for dy in range(-search, search + 1) for dx in range(-search, search + 1)]
    cands.sort(key=lambda c: (abs(c[0]) + abs(c[1]), c[1], c[0]))
    return cands


def estimate_flow(src, dst, block=16, search=24):
    """Exhaustive integer block matching from ``src`` to ``dst``.

    Each ``block`` x ``block`` tile of ``src`` gets the displacement (within
    +-``search``) whose tile in ``dst`` has the smallest sum of absolute
    differences.  Candidates that would leave ``dst`` are skipped.  Ragged
    right/bottom remainders reuse the nearest full block's vector.
    """
    a, b = _match_gray(src), _match_gray(dst)
    if a.shape != b.shape:
        raise ValueError(f"estimate_flow: extents differ, {a.shape} vs {b.shape}")
    h, w = a.shape
    if block > h or block > w:
        raise ValueError(f"estimate_flow: block {block} exceeds image {h}x{w}")
    nby, nbx = h // block, w // block
    a64, b64 = a, b
    ys = np.arange(nby) * block
    xs = np.arange(nbx) * block
    best = np.full((nby, nbx), np.inf)
    best_d = np.zeros((nby, nbx, 2), dtype=np.int64)
    a_blocks = a64[: nby * block, : nbx * block].reshape(nby, block, nbx, block)
    for dx, dy in _candidate_order(search):
        # blocks whose displaced copy stays inside dst
        vy = (ys + dy >= 0) & (ys + dy + block <= h)
        vx = (xs + dx >= 0) & (xs + dx + block <= w)
        if not vy.any() or not vx.any():
            continue
        y0, y1 = max(0, -dy), min(h, h - dy)
        x0, x1 = max(0, -dx), min(w, w - dx)
        shifted = np.zeros_like(b64)
        shifted[y0:y1, x0:x1] = b64[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        s_blocks = shifted[: nby * block, : nbx * block].reshape(nby, block, nbx, block)
        sad = np.abs(a_blocks - s_blocks).sum(axis=(1, 3))
        valid = vy[:, None] & vx[None, :]
        better = valid & (sad < best)
        best = np.where(better, sad, best)
        best_d[better] = (dx, dy)
    flow = np.zeros((h, w, 2), dtype=np.float32)
    iy = np.minimum(np.arange(h) // block, nby - 1)
    ix = np.minimum(np.arange(w) // block, nbx - 1)
    flow[:] = best_d[iy][:, ix]
    return flow


def brute_force_flow(src, dst, block=16, search=24):
    """Per-block loop over every candidate, written for clarity, not speed."""
    a = _match_gray(src)
    b = _match_gray(dst)
    h, w = a.shape
    nby, nbx = h // block, w // block
    out = np.zeros((nby, nbx, 2), dtype=np.int64)
    for by in range(nby):
        for bx in range(nbx):
            y, x = by * block, bx * block
            tile = a[y:y + block, x:x + block]
            best_key = None
            for dy in range(-search, search + 1):
                for dx in range(-search, search + 1):
                    if y + dy < 0 or y + dy + block > h or x + dx < 0 or x + dx + block > w:
                        continue
                    sad = 0.0
                    for j in range(block):
                        for i in range(block):
                            sad += abs(tile[j, i] - b[y + dy + j, x + dx + i])
                    key = (sad, abs(dx) + abs(dy), dy, dx)
                    if best_key is None or key < best_key:
                        best_key = key
            out[by, bx] = (best_key[3], best_key[2])
    return out


def synthetic_flow(kind, params, h, w):
    """Analytic displacement fields.

    translation: params (tx, ty); rotation: angle in radians about the image
    centre; zoom: scale factor s about the centre (displacement (s-1)*(p-c)).
    """
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if kind == "translation":
        tx, ty = params
        u = np.full((h, w), float(tx))
        v = np.full((h, w), float(ty))
    elif kind == "rotation":
        theta = float(params[0] if np.ndim(params) else params)
        c, s = np.cos(theta), np.sin(theta)
        rx, ry = xs - cx, ys - cy
        u = c * rx - s * ry - rx
        v = s * rx + c * ry - ry
    elif kind == "zoom":
        scale = float(params[0] if np.ndim(params) else params)
        u = (scale - 1.0) * (xs - cx)
        v = (scale - 1.0) * (ys - cy)
    else:
        raise ValueError(f"unknown flow kind {kind!r}")
    return np.stack([u, v], axis=-1).astype(np.float32)


def _bilinear_taps(flow):
    """Corner indices and weights for backward bilinear sampling with edge clamp."""
    h, w = flow.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = np.clip(xs + flow[..., 0].astype(np.float64), 0, w - 1)
    sy = np.clip(ys + flow[..., 1].astype(np.float64), 0, h - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, fx, fy


def warp(img, flow):
    """Backward warp: ``out[p] = img[p + flow[p]]``, bilinear, edges clamped.

    Works for any trailing channel count.  Integer displacements copy pixels
    exactly.
    """
    img = np.asarray(img)
    flow = np.asarray(flow)
    if img.shape[:2] != flow.shape[:2]:
        raise ValueError(f"warp: image {img.shape[:2]} and flow {flow.shape[:2]} extents differ")
    x0, x1, y0, y1, fx, fy = _bilinear_taps(flow)
    src = img.astype(np.float64) if img.dtype != np.float64 else img
    if src.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    # exact copies at integer positions: the other taps get weight exactly 0
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


def warp_matrix(flow):
    """(N, N) matrix with ``M @ img.reshape(N, C) == warp(img, flow).reshape(N, C)``."""
    h, w = flow.shape[:2]
    x0, x1, y0, y1, fx, fy = _bilinear_taps(flow)
    n = h * w
    m = np.zeros((n, n))
    rows = np.arange(n)
    for yy, xx, wt in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x1, fx * (1 - fy)),
        (y1, x0, (1 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        np.add.at(m, (rows, (yy * w + xx).reshape(-1)), wt.reshape(-1))
    return m


def downscale_flow(flow, f):
    """f x f average pooling, then divide by f (displacement in latent cells)."""
    flow = np.asarray(flow, dtype=np.float32)
    h, w = flow.shape[:2]
    if h % f or w % f:
        raise ValueError(f"downscale_flow: {h}x{w} not divisible by {f}")
    pooled = flow.reshape(h // f, f, w // f, f, 2).mean(axis=(1, 3))
    return (pooled / f).astype(np.float32)


def write_flo(flow, path):
    flow = np.asarray(flow, dtype="<f4")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: file too short for a .flo header ({len(raw)} bytes)")
    (magic,) = struct.unpack("<f", raw[:4])
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: nonpositive dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FlowFormatError(f"{path}: truncated payload, {len(raw)} bytes, need {need}")
    return np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2).astype(np.float32)
