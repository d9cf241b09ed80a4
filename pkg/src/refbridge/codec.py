"""Invertible space-to-depth latent codec.

An H x W x 3 image becomes a (3*f*f, H/f, W/f) latent grid by moving each f x f
pixel block into the channel axis.  Nothing is learned and nothing is lost, so
``decode(encode(x))`` returns ``x`` bit for bit.
"""
import numpy as np

DEFAULT_FACTOR = 4


class GeometryError(ValueError):
    pass


def encode(img, f=DEFAULT_FACTOR):
    """Image (H, W, 3) or batch (B, H, W, 3) -> latent (3f^2, H/f, W/f) or batched.

    Channel index is ``(dy * f + dx) * 3 + c``.
    """
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    batched = img.ndim == 4
    x = img if batched else img[None]
    b, h, w, c = x.shape
    if c != 3:
        raise GeometryError(f"expected 3 colour channels, got {c}")
    if h % f or w % f:
        raise GeometryError(f"image extents {h}x{w} not divisible by factor {f}")
    z = x.reshape(b, h // f, f, w // f, f, c).transpose(0, 2, 4, 5, 1, 3)
    z = z.reshape(b, f * f * c, h // f, w // f)
    z = np.ascontiguousarray(z)
    return z if batched else z[0]


def decode(z, f=DEFAULT_FACTOR, clamp=False):
    """Exact inverse of :func:`encode`.

    ``clamp`` clips to [0, 1]; use it only when emitting a final image.
    """
    z = np.asarray(z)
    batched = z.ndim == 4
    x = z if batched else z[None]
    b, ch, hl, wl = x.shape
    if ch != 3 * f * f:
        raise GeometryError(f"latent has {ch} channels, expected 3*{f}^2 = {3 * f * f}")
    img = x.reshape(b, f, f, 3, hl, wl).transpose(0, 4, 1, 5, 2, 3)
    img = np.ascontiguousarray(img.reshape(b, hl * f, wl * f, 3))
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return img if batched else img[0]
