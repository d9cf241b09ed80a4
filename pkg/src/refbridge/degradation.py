"""Seeded synthetic degradation and training-pair synthesis.

The pipeline is four fixed stages applied in order:

1. Gaussian blur (``blur_sigma`` pixels),
2. bilinear down-then-up resampling by ``down_factor``,
3. additive Gaussian noise (``noise_sigma``, drawn from ``seed``),
4. 8x8 block mean quantisation: inside each block the deviation from the
   block mean is rounded to a step of ``block_quant / 16``.

Every stage with a zero level is skipped, so the all-off config is the exact
identity.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import flow as flowlib
from .imageio import quantize8, read_image, sub_seed, write_image
from .synthetic import textured_image

QUANT_BLOCK = 8


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma: float = 0.0
    down_factor: int = 1
    noise_sigma: float = 0.0
    block_quant: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be >= 0")
        if self.down_factor < 1:
            raise ValueError("down_factor must be >= 1")
        if not 0 <= self.block_quant <= 8:
            raise ValueError("block_quant must be in 0..8")

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def to_string(self):
        return ",".join(f"{k}={v}" for k, v in asdict(self).items())

    @classmethod
    def from_string(cls, text):
        kw = {}
        for item in filter(None, text.split(",")):
            key, val = item.split("=", 1)
            kw[key.strip()] = val.strip()
        return cls(
            blur_sigma=float(kw.get("blur_sigma", 0)),
            down_factor=int(kw.get("down_factor", 1)),
            noise_sigma=float(kw.get("noise_sigma", 0)),
            block_quant=int(kw.get("block_quant", 0)),
            seed=int(kw.get("seed", 0)),
        )


PRESETS = {
    "identity": DegradationConfig(),
    "mild": DegradationConfig(blur_sigma=0.6, down_factor=2, noise_sigma=0.01, block_quant=1),
    "livephoto": DegradationConfig(blur_sigma=1.0, down_factor=2, noise_sigma=0.02, block_quant=2),
    "severe": DegradationConfig(blur_sigma=1.8, down_factor=4, noise_sigma=0.05, block_quant=4),
}


def preset(name, seed=0):
    try:
        return PRESETS[name].with_seed(seed)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with half-pixel centres and edge clamping."""
    h, w = img.shape[:2]

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(out_h, h)
    x0, x1, fx = axis(out_w, w)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    rows0 = img[y0]
    rows1 = img[y1]
    top = rows0[:, x0] * (1 - fx) + rows0[:, x1] * fx
    bot = rows1[:, x0] * (1 - fx) + rows1[:, x1] * fx
    return top * (1 - fy) + bot * fy


def block_quantize(img, level, block=QUANT_BLOCK):
    if level == 0:
        return img
    step = level / 16.0
    h, w = img.shape[:2]
    out = np.empty_like(img)
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = img[y:y + block, x:x + block]
            m = tile.mean(axis=(0, 1), keepdims=True)
            out[y:y + block, x:x + block] = m + np.round((tile - m) / step) * step
    return out


def degrade(img, cfg):
    """Apply the four-stage pipeline; output has the input's extents."""
    src = np.asarray(img, dtype=np.float32)
    x = src.astype(np.float64)
    touched = False
    if cfg.blur_sigma > 0:
        x = gaussian_filter(x, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0), mode="reflect")
        touched = True
    if cfg.down_factor > 1:
        h, w = x.shape[:2]
        small = resize_bilinear(x, max(1, round(h / cfg.down_factor)), max(1, round(w / cfg.down_factor)))
        x = resize_bilinear(small, h, w)
        touched = True
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        x = x + cfg.noise_sigma * rng.standard_normal(x.shape)
        touched = True
    if cfg.block_quant > 0:
        x = block_quantize(np.clip(x, 0.0, 1.0), cfg.block_quant)
        touched = True
    if not touched:
        return src.copy()
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def degrade_pair(key_photo, reselected, cfg):
    """(I_Lo, I_Ls): both images under the same levels.

    The key photo uses noise stream ``sub_seed(cfg.seed, 0)``, the reselected
    frame ``sub_seed(cfg.seed, 1)``.
    """
    key_photo = np.asarray(key_photo)
    reselected = np.asarray(reselected)
    if key_photo.shape != reselected.shape:
        raise ValueError(f"degrade_pair: extents differ, {key_photo.shape} vs {reselected.shape}")
    lo = degrade(key_photo, cfg.with_seed(sub_seed(cfg.seed, 0)))
    ls = degrade(reselected, cfg.with_seed(sub_seed(cfg.seed, 1)))
    return lo, ls


# ---------------------------------------------------------------------------
# training pairs
# ---------------------------------------------------------------------------

MAX_SHIFT_PER_FRAME = 4.0
MAX_ANGLE_PER_FRAME = 0.05
MAX_ZOOM_PER_FRAME = 0.04


def _frame_flow(kind, params, k, h, w):
    if kind == "translation":
        tx, ty = params
        if max(abs(tx), abs(ty)) > MAX_SHIFT_PER_FRAME:
            raise ValueError(f"translation {params} per frame exceeds {MAX_SHIFT_PER_FRAME} px")
        return flowlib.synthetic_flow("translation", (k * tx, k * ty), h, w)
    if kind == "rotation":
        theta = float(np.ravel(params)[0])
        if abs(theta) > MAX_ANGLE_PER_FRAME:
            raise ValueError(f"rotation {theta} rad per frame exceeds {MAX_ANGLE_PER_FRAME}")
        return flowlib.synthetic_flow("rotation", k * theta, h, w)
    if kind == "zoom":
        s = float(np.ravel(params)[0])
        if abs(s - 1) > MAX_ZOOM_PER_FRAME:
            raise ValueError(f"zoom {s} per frame outside 1 +- {MAX_ZOOM_PER_FRAME}")
        return flowlib.synthetic_flow("zoom", s ** k, h, w)
    raise ValueError(f"unknown warp kind {kind!r}")


def make_training_pair(source, size, k=5, kind="translation", params=(0.0, 0.0), cfg=None):
    """Synthesise (I_Hs, I_Ho, I_Ls, I_Lo, flow) from one clean frame.

    ``source`` is a clean image at least ``size`` on each side; the key photo
    is the source warped by ``k`` frames of the given motion, and both are
    centre-cropped to ``size``.  The returned flow maps key-photo pixels onto
    the reselected frame (``I_Ho[p] = I_Hs[p + flow[p]]``), i.e. the direction
    the attention bias consumes.
    """
    cfg = cfg or DegradationConfig()
    source = np.asarray(source, dtype=np.float32)
    sh, sw = source.shape[:2]
    if sh < size or sw < size:
        raise ValueError(f"source {sh}x{sw} smaller than crop {size}")
    full_flow = _frame_flow(kind, params, k, sh, sw)
    y0, x0 = (sh - size) // 2, (sw - size) // 2
    crop = (slice(y0, y0 + size), slice(x0, x0 + size))
    hs = source[crop]
    if np.any(full_flow):
        ho = flowlib.warp(source, full_flow)[crop]
    else:
        ho = hs.copy()
    # the flow is a displacement field, so cropping keeps its values
    gt_flow = np.ascontiguousarray(full_flow[crop])
    lo, ls = degrade_pair(ho, hs, cfg)
    return hs, ho, ls, lo, gt_flow


# ---------------------------------------------------------------------------
# datasets / manifests
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


@dataclass
class ManifestEntry:
    clean: Path
    ref: Path
    lq: Path
    flow: Path
    cfg: DegradationConfig


def write_manifest(entries, path):
    path = Path(path)
    root = path.parent
    lines = []
    for e in entries:
        cols = [Path(p).relative_to(root).as_posix() if Path(p).is_absolute() else Path(p).as_posix()
                for p in (e.clean, e.ref, e.lq, e.flow)]
        lines.append("\t".join(cols + [e.cfg.to_string()]))
    path.write_text("".join(line + "\n" for line in lines))


def read_manifest(path):
    """Entries with paths resolved against the manifest's directory."""
    path = Path(path)
    root = path.parent
    entries = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ValueError(f"{path}:{n}: expected 5 tab-separated columns, got {len(cols)}")
        clean, ref, lq, fl, cfg = cols
        entries.append(ManifestEntry(root / clean, root / ref, root / lq, root / fl,
                                     DegradationConfig.from_string(cfg)))
    return entries


def synthesize_dataset(out_dir, n, size=16, cfg=None, seed=0, k=5, kinds=("translation",),
                       source_margin=None, max_shift=0.4, texture_scales=(1.0, 3.0), contrast=0.0):
    """Write ``n`` seeded training pairs plus ``manifest.tsv`` into ``out_dir``.

    Each sample ``i`` draws its texture, motion and degradation seed from
    ``sub_seed(seed, i)``.  Clean images are snapped to 8 bits before
    degradation so that everything can be recomputed from the files.
    """
    cfg = cfg or preset("livephoto")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    margin = source_margin if source_margin is not None else size // 2 + int(k * MAX_SHIFT_PER_FRAME)
    entries = []
    for i in range(n):
        s = sub_seed(seed, i)
        rng = np.random.default_rng(s)
        kind = kinds[i % len(kinds)]
        if kind == "translation":
            # per-frame steps of 1/k px so the k-frame shift is a whole pixel
            steps = int(round(max_shift * k))
            params = tuple(float(v) / k for v in rng.integers(-steps, steps + 1, size=2))
        elif kind == "rotation":
            params = (float(rng.uniform(-0.03, 0.03)),)
        else:
            params = (float(rng.uniform(0.98, 1.02)),)
        source = quantize8(textured_image(size + 2 * margin, size + 2 * margin, seed=s % (2**32),
                                          scales=texture_scales, contrast=contrast))
        sample_cfg = cfg.with_seed(s % (2**63))
        hs, ho, ls, lo, fl = make_training_pair(source, size, k, kind, params, sample_cfg)
        names = [f"{i:05d}_{tag}" for tag in ("clean.png", "ref.png", "lq.png", "flow.flo")]
        write_image(hs, out / names[0])
        write_image(quantize8(ho), out / names[1])
        write_image(ls, out / names[2])
        flowlib.write_flo(fl, out / names[3])
        entries.append(ManifestEntry(*(out / nm for nm in names), sample_cfg))
    manifest = out / MANIFEST_NAME
    write_manifest(entries, manifest)
    return manifest


# The seeded shifted-pair fixture used for toy training and the ablation runs:
# smooth high-contrast texture, strong degradation, whole-pixel shifts of at
# most one pixel per axis between key photo and reselected frame.
SHIFTED_PAIR_FIXTURE = {
    "size": 16,
    "max_shift": 0.2,
    "texture_scales": (2.0,),
    "contrast": 1.5,
    "preset": "severe",
}


def shifted_pair_dataset(out_dir, n=200, seed=0, **overrides):
    """Write the shifted-pair fixture (see ``SHIFTED_PAIR_FIXTURE``)."""
    opts = {**SHIFTED_PAIR_FIXTURE, **overrides}
    cfg = preset(opts.pop("preset"))
    return synthesize_dataset(out_dir, n, cfg=cfg, seed=seed, **opts)


def manifest_hash(path):
    """SHA-256 over the manifest text and every file it references, in order."""
    path = Path(path)
    digest = hashlib.sha256(path.read_bytes())
    for e in read_manifest(path):
        for p in (e.clean, e.ref, e.lq, e.flow):
            digest.update(Path(p).read_bytes())
    return digest.hexdigest()


def load_sample(entry):
    """(I_Hs, I_Ho, I_Ls, I_Lo, flow) with I_Lo recomputed from the ref and cfg."""
    hs = read_image(entry.clean)
    ho = read_image(entry.ref)
    ls = read_image(entry.lq)
    lo = degrade(ho, entry.cfg.with_seed(sub_seed(entry.cfg.seed, 0)))
    return hs, ho, ls, lo, flowlib.read_flo(entry.flow)
