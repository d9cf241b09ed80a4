"""Shared fixture builders and naive oracles for the test modules."""
import numpy as np

from refbridge.synthetic import textured_image

# 28 bytes of a width-2, height-1 .flo holding (1.5, -0.5) then (0, 0), assembled
# by hand from the format: float32 202021.25 = 0x49454950 ("PIEH"), int32 2,
# int32 1, then the four float32 components, all little-endian.
FLO_2X1_BYTES = (
    b"PIEH"
    + b"\x02\x00\x00\x00"
    + b"\x01\x00\x00\x00"
    + b"\x00\x00\xc0\x3f"   # 1.5
    + b"\x00\x00\x00\xbf"   # -0.5
    + b"\x00\x00\x00\x00"
    + b"\x00\x00\x00\x00"
)
FLO_2X1_FIELD = np.array([[[1.5, -0.5], [0.0, 0.0]]], dtype=np.float32)


def shift_image(img, dx, dy, seed=0):
    """``out[y, x] = img[y - dy, x - dx]``; uncovered pixels get fresh noise."""
    h, w = img.shape[:2]
    out = np.random.default_rng(seed).random(img.shape).astype(img.dtype)
    ys, xs = slice(max(dy, 0), h + min(dy, 0)), slice(max(dx, 0), w + min(dx, 0))
    yo, xo = slice(max(-dy, 0), h + min(-dy, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = img[yo, xo]
    return out


def flow_fixtures_64():
    """(name, src, dst, block, search) instances on 64 x 64 grids."""
    tex = textured_image(64, 64, seed=3).astype(np.float32)
    rng = np.random.default_rng(11)
    binary = (rng.random((64, 64, 3)) > 0.5).astype(np.float32)
    flat = np.full((64, 64, 3), 0.4, np.float32)
    return [
        ("shift_5_3", tex, shift_image(tex, 5, 3), 16, 8),
        ("shift_-4_2_small_blocks", tex, shift_image(tex, -4, 2, 1), 8, 5),
        ("identity", tex, tex, 16, 6),
        ("unrelated_noise", rng.random((64, 64, 3)).astype(np.float32),
         rng.random((64, 64, 3)).astype(np.float32), 16, 6),
        ("binary_ties", binary, shift_image(binary, 1, -2, 2), 8, 3),
        ("flat_all_ties", flat, flat, 16, 4),
    ]


def naive_psnr(a, b, peak=1.0):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    mse = total / a.size
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)
