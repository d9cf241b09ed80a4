"""Bridge flow matching between low- and high-quality latents.

The forward process mixes the clean latent, the degraded latent and Gaussian
noise on the short window t in [0, 0.2]::

    z_t = alpha(t) z_hs + beta(t) z_ls + sigma(t) eps
    alpha(t) = (1 - t)(0.2 - t) / 0.2
    beta(t)  = (1 - t) t / 0.2
    sigma(t) = t

At t = 0 the state is the clean latent; at t = 0.2 it is 0.8 z_ls + 0.2 eps.
The network regresses dz_t/dt (taken for a fixed eps) and sampling integrates
that velocity backwards from t = 0.2 to 0 with explicit Euler.
"""
from dataclasses import dataclass

import numpy as np

from . import numerics as nx

T_MAX = 0.2
DEFAULT_STEPS = 6


class ScheduleError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


def _check_t(t):
    t_arr = np.asarray(t, dtype=np.float64)
    # tiny slack for accumulated float error on the sampler grid
    if np.any(t_arr < -1e-12) or np.any(t_arr > T_MAX + 1e-12):
        raise ScheduleError(f"t={t} outside the window [0, {T_MAX}]")
    return t_arr


def coefficients(t):
    """(alpha, beta, sigma) at ``t``; scalar or array."""
    t = _check_t(t)
    # s = t / 0.2 is exactly 0 and 1 at the window ends, so the boundary
    # values (1, 0, 0) and (0, 0.8, 0.2) come out exact in floating point
    s = t / T_MAX
    alpha = (1.0 - t) * (1.0 - s)
    beta = (1.0 - t) * s
    sigma = t
    return alpha, beta, sigma


def coefficient_derivatives(t):
    """(alpha', beta', sigma') at ``t``."""
    t = _check_t(t)
    # d/dt of (1-t)(0.2-t)/0.2 = (2t - 1.2)/0.2 and of (t - t^2)/0.2
    dalpha = (2.0 * t - (1.0 + T_MAX)) / T_MAX
    dbeta = (1.0 - 2.0 * t) / T_MAX
    dsigma = np.ones_like(t)
    return dalpha, dbeta, dsigma


@dataclass
class BridgeSample:
    t: np.ndarray
    z_t: np.ndarray
    eps: np.ndarray
    target_velocity: np.ndarray


def _per_sample(coef, ndim):
    coef = np.asarray(coef)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def forward_sample(z_hs, z_ls, t, eps):
    """State and velocity target at ``t`` for one shared noise draw.

    ``t`` may be a scalar or one value per leading batch entry.
    """
    z_hs, z_ls, eps = (np.asarray(a) for a in (z_hs, z_ls, eps))
    if not (z_hs.shape == z_ls.shape == eps.shape):
        raise nx.ShapeError(
            f"forward_sample: shapes differ {z_hs.shape}, {z_ls.shape}, {eps.shape}"
        )
    a, b, s = (_per_sample(c, z_hs.ndim) for c in coefficients(t))
    da, db, ds = (_per_sample(c, z_hs.ndim) for c in coefficient_derivatives(t))
    dtype = np.result_type(z_hs.dtype, np.float32)
    z_t = (a * z_hs + b * z_ls + s * eps).astype(dtype)
    target = (da * z_hs + db * z_ls + ds * eps).astype(dtype)
    return BridgeSample(np.asarray(t), z_t, eps, target)


def draw_sample(z_hs, z_ls, seed):
    """Draw per-sample t ~ U[0, 0.2] and standard-normal eps from ``seed``.

    Draw order is t first (one per batch entry), then eps.
    """
    z_hs = np.asarray(z_hs)
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, T_MAX, size=z_hs.shape[0])
    eps = rng.standard_normal(z_hs.shape).astype(z_hs.dtype)
    return forward_sample(z_hs, z_ls, t, eps)


def bridge_loss(velocity_fn, z_hs, z_ls, seed):
    """Mean squared error between ``velocity_fn(z_t, t)`` and the target.

    ``velocity_fn`` gets the batched state (numpy) and the per-sample times and
    must return a Tensor (or array) of the same shape.
    """
    s = draw_sample(z_hs, z_ls, seed)
    pred = velocity_fn(s.z_t, s.t)
    return nx.mse(pred, s.target_velocity)


def start_state(z_ls, eps):
    """The biased mixture 0.8 z_ls + 0.2 eps the sampler starts from."""
    _, beta, sigma = coefficients(T_MAX)
    return (beta * np.asarray(z_ls) + sigma * np.asarray(eps)).astype(np.asarray(z_ls).dtype)


def sample(velocity_fn, z_ls, steps=DEFAULT_STEPS, seed=0, eps=None):
    """Integrate the learned velocity from t = 0.2 down to 0.

    Explicit Euler on a uniform grid, ``z <- z - h * v(z, t)`` with
    h = 0.2 / steps.  ``velocity_fn(z, t)`` receives a numpy state and a float
    time and returns something array-like of the same shape.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    z_ls = np.asarray(z_ls)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(z_ls.shape).astype(z_ls.dtype)
    z = start_state(z_ls, eps)
    h = T_MAX / steps
    for k in range(steps):
        t = T_MAX - k * h
        with nx.no_grad():
            v = velocity_fn(z, t)
        v = v.data if isinstance(v, nx.Tensor) else np.asarray(v)
        z = (z - h * v).astype(z_ls.dtype)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite state after sampler step {k + 1} of {steps} (t={t:.4f})")
    return z
