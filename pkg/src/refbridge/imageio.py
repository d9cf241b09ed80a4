"""Image files and seed plumbing.

Images are float32 (H, W, 3) arrays in [0, 1].  On disk they are 8-bit RGB PNG
or binary PPM (both through Pillow).
"""
from pathlib import Path

import numpy as np
from PIL import Image

_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One step of the splitmix64 generator; returns a 64-bit integer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sub_seed(master, index):
    """Seed for stream ``index`` under ``master``: splitmix64(master + index * golden)."""
    return splitmix64((int(master) + int(index) * 0x9E3779B97F4A7C15) & _MASK64)


def to_uint8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize8(img):
    """Snap a float image onto the 8-bit grid (what a PNG round trip does)."""
    return (to_uint8(img).astype(np.float32) / 255.0).astype(np.float32)


def read_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def write_image(img, path):
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format=fmt)
