"""Deterministic test imagery."""
import numpy as np
from scipy.ndimage import gaussian_filter


def textured_image(h, w, seed=0, scales=(1.0, 3.0), contrast=0.0):
    """Colour texture built from Gaussian-smoothed noise at a few scales.

    Values lie in [0.05, 0.95].  Same (h, w, seed) -> same image.  A positive
    ``contrast`` pushes the standardised texture through ``tanh(contrast * z)``,
    which turns the soft min-max ramp into high-contrast blobs.
    """
    rng = np.random.default_rng(seed)
    acc = np.zeros((h, w, 3))
    for s in scales:
        base = gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(s, s, 0), mode="wrap")
        base /= base.std() + 1e-12
        mix = rng.uniform(-1, 1, size=(3, 3)) + np.eye(3)
        acc += base @ mix
    lo, hi = acc.min(), acc.max()
    out = 0.05 + 0.9 * (acc - lo) / (hi - lo + 1e-12)
    if contrast > 0:
        z = (out - out.mean()) / (out.std() + 1e-12)
        out = 0.5 + 0.45 * np.tanh(contrast * z)
    return out.astype(np.float32)


def checkerboard(h=64, w=64, square=8, low=0.0, high=1.0):
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    board = ((ys // square + xs // square) % 2).astype(np.float32)
    gray = low + (high - low) * board
    return np.repeat(gray[..., None], 3, axis=-1).astype(np.float32)


def seeded_corpus(n=4, size=64, seed=2024):
    """The small seeded set of textured images the property tests run on."""
    return [textured_image(size, size, seed=seed + i, scales=(0.7, 2.0)) for i in range(n)]
