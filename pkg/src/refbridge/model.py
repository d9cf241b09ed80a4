"""Toy dual-branch restorer.

Two token transformers with the same block layout:

* the restoration branch denoises the latent state ``z_t`` at time ``t``;
* the reference branch runs once over the clean reference latent and exports
  the key/value projections of each block's cross-attention sublayer.

Every restoration block attends over its own keys/values concatenated with the
reference ones.  Encoded optical flow (the motion embedding) is added to the
reference keys before the concatenation.

The network output is preconditioned: it is read as an estimate of the clean
latent and mapped to a velocity through the bridge schedule (see
:func:`velocity_preconditioning`).  Without this the toy network has to
produce gains that grow like 1/t near t = 0 by itself, which it does not learn
in a few hundred steps.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BLOCK_SUBLAYERS = ("attn1", "attn2")


@dataclass(frozen=True)
class ModelConfig:
    factor: int = 2
    depth: int = 2
    d_model: int = 32
    heads: int = 2
    motion_hidden: int = 16
    ff_mult: int = 2
    time_dim: int = 16
    init_scale: float = 0.02
    pos_embed: bool = True
    locality_gain: float = 3.0     # identity added to cross-attention q/k at init
    precondition: bool = True
    precond_tmin: float = 0.05

    @property
    def latent_channels(self):
        return 3 * self.factor * self.factor

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _split_heads(x, heads):
    d = x.shape[-1]
    dh = d // heads
    return [x[..., h * dh:(h + 1) * dh] for h in range(heads)]


def attention(q, k, v, heads=1):
    """Plain multi-head scaled dot-product attention over the last axis."""
    q, k, v = nx.as_tensor(q), nx.as_tensor(k), nx.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise nx.ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not fit")
    if q.shape[-1] % heads:
        raise nx.ShapeError(f"width {q.shape[-1]} not divisible by {heads} heads")
    dh = q.shape[-1] // heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for qh, kh, vh in zip(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)):
        logits = nx.matmul(qh, nx.transpose(kh)) * scale
        outs.append(nx.matmul(nx.softmax_rows(logits), vh))
    return outs[0] if heads == 1 else nx.concat(outs, axis=-1)


def cross_attention(q, k, v, k_ref=None, v_ref=None, e=None, heads=1):
    """Attention of ``q`` over [k, k_ref + e] / [v, v_ref].

    With no reference (``k_ref`` is None or has zero tokens) this is exactly
    :func:`attention` over (k, v).  ``e`` is ignored in that case.
    """
    if k_ref is None or k_ref.shape[-2] == 0:
        return attention(q, k, v, heads)
    k_ref = nx.as_tensor(k_ref)
    v_ref = nx.as_tensor(v_ref)
    if k_ref.shape[-1] != k.shape[-1] or v_ref.shape[-1] != v.shape[-1]:
        raise nx.ShapeError(
            f"cross_attention: token widths differ, k {k.shape} vs k_ref {k_ref.shape}"
        )
    if e is not None:
        k_ref = nx.add(k_ref, e)
    return attention(q, nx.concat([k, k_ref], axis=-2), nx.concat([v, v_ref], axis=-2), heads)


# ---------------------------------------------------------------------------
# fixed embeddings
# ---------------------------------------------------------------------------

def time_features(t, dim=16):
    """Sinusoidal features of t / 0.2, rescaled to [0, 1000] like a DiT timestep."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / 0.2 * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = s[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def position_features(h, w, dim):
    """2-D sinusoidal position table (h*w, dim).

    Features are grouped per frequency as (sin y, cos y, sin x, cos x), so any
    contiguous head slice sees both axes.
    """
    quarter = dim // 4
    freqs = np.exp(-math.log(100.0) * np.arange(quarter) / max(quarter, 1))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys = ys.reshape(-1, 1) * freqs[None]
    xs = xs.reshape(-1, 1) * freqs[None]
    table = np.stack([np.sin(ys), np.cos(ys), np.sin(xs), np.cos(xs)], axis=-1).reshape(h * w, 4 * quarter)
    if table.shape[1] < dim:
        table = np.pad(table, ((0, 0), (0, dim - table.shape[1])))
    return table


def velocity_preconditioning(t, tmin=0.05):
    """Per-sample (skip, scale) such that v = skip * z_t + scale * x.

    The network output x is read as a residual on top of z_t / (1 - t): the
    clean-latent estimate is x + z_t / (1 - t).  When that estimate equals the
    true z_hs, v is the target velocity minus t/(1-t) times the noise.  It
    follows from eliminating z_ls between z_t and the velocity:

        skip = b'/b + d/(1-t),   scale = d,   d = a' - (b'/b) a
    Coefficients are evaluated at max(t, tmin) to stay bounded near t = 0.
    """
    from .bridge import coefficient_derivatives, coefficients

    te = np.maximum(np.asarray(t, dtype=np.float64), tmin)
    a, b, _ = coefficients(te)
    da, db, _ = coefficient_derivatives(te)
    c = db / b
    d = da - c * a
    return c + d / (1.0 - te), d


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class Restorer:
    """Parameter container plus the forward passes.

    ``params`` maps dotted names to leaf Tensors.  :meth:`param_names` gives the
    fixed order used by checkpoints.
    """

    def __init__(self, config=None, seed=0, zero_output=True, dtype=np.float32):
        self.config = config or ModelConfig()
        cfg = self.config
        if cfg.d_model % cfg.heads:
            raise ValueError(f"d_model={cfg.d_model} not divisible by heads={cfg.heads}")
        rng = np.random.default_rng(seed)
        d, c = cfg.d_model, cfg.latent_channels
        s = cfg.init_scale
        p = {}

        def uni(*shape):
            return rng.uniform(-s, s, size=shape)

        for branch in ("res", "ref"):
            p[f"{branch}.in.w"] = uni(c, d)
            p[f"{branch}.in.b"] = np.zeros(d)
            for i in range(cfg.depth):
                pre = f"{branch}.blk{i}"
                for ln in ("ln1", "ln2", "ln3"):
                    p[f"{pre}.{ln}.w"] = np.ones(d)
                    p[f"{pre}.{ln}.b"] = np.zeros(d)
                for att in BLOCK_SUBLAYERS:
                    for proj in ("q", "k", "v", "o"):
                        p[f"{pre}.{att}.{proj}"] = uni(d, d)
                p[f"{pre}.ff.w1"] = uni(d, cfg.ff_mult * d)
                p[f"{pre}.ff.b1"] = np.zeros(cfg.ff_mult * d)
                p[f"{pre}.ff.w2"] = uni(cfg.ff_mult * d, d)
                p[f"{pre}.ff.b2"] = np.zeros(d)
        p["time.w"] = uni(cfg.time_dim, d)
        p["time.b"] = np.zeros(d)
        p["out.ln.w"] = np.ones(d)
        p["out.ln.b"] = np.zeros(d)
        p["out.w"] = np.zeros((d, c)) if zero_output else uni(d, c)
        p["out.b"] = np.zeros(c)
        p["motion.c1.w"] = uni(cfg.motion_hidden, 2, 3, 3)
        p["motion.c1.b"] = np.zeros(cfg.motion_hidden)
        p["motion.c2.w"] = uni(d, cfg.motion_hidden, 3, 3)
        p["motion.c2.b"] = np.zeros(d)
        if cfg.locality_gain:
            # q.k then starts out dominated by the shared position table, so
            # each token first attends to its own and the co-located reference
            # token instead of averaging the whole grid.
            for name in p:
                if ".attn2." in name and name[-2:] in (".q", ".k"):
                    p[name] = p[name] + cfg.locality_gain * np.eye(d)
        self.params = {k: Tensor(v, requires_grad=True, name=k, dtype=dtype) for k, v in p.items()}
        self._pos_cache = {}

    # -- bookkeeping ------------------------------------------------------
    @property
    def dtype(self):
        return self.params["out.w"].dtype

    def param_names(self):
        return sorted(self.params)

    def parameters(self):
        return [self.params[k] for k in self.param_names()]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype):
        """Copy of the model with parameters cast to ``dtype``."""
        other = Restorer.__new__(Restorer)
        other.config = self.config
        other.params = {
            k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()
        }
        other._pos_cache = {}
        return other

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k] = Tensor(np.array(v, dtype=self.dtype), requires_grad=True, name=k)

    # -- pieces -----------------------------------------------------------
    def _const(self, x):
        return Tensor(np.asarray(x, dtype=self.dtype))

    def _positions(self, h, w):
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = position_features(h, w, self.config.d_model).astype(self.dtype)
        return self._pos_cache[key]

    def _tokens(self, z, branch):
        """(B, C, h, w) latent -> (B, h*w, d) tokens."""
        p = self.params
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=self.dtype)
        b, c, h, w = z.shape
        if c != self.config.latent_channels:
            raise nx.ShapeError(f"latent has {c} channels, model expects {self.config.latent_channels}")
        tok = self._const(z.reshape(b, c, h * w).transpose(0, 2, 1))
        x = nx.add(nx.matmul(tok, p[f"{branch}.in.w"]), p[f"{branch}.in.b"])
        if self.config.pos_embed:
            x = nx.add(x, self._positions(h, w))
        return x

    def _linear_heads(self, x, pre, att):
        p = self.params
        return (
            nx.matmul(x, p[f"{pre}.{att}.q"]),
            nx.matmul(x, p[f"{pre}.{att}.k"]),
            nx.matmul(x, p[f"{pre}.{att}.v"]),
        )

    def _ff(self, x, pre):
        p = self.params
        hdn = nx.silu(nx.add(nx.matmul(x, p[f"{pre}.ff.w1"]), p[f"{pre}.ff.b1"]))
        return nx.add(nx.matmul(hdn, p[f"{pre}.ff.w2"]), p[f"{pre}.ff.b2"])

    def _ln(self, x, name):
        return nx.layer_norm(x, 1e-5, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _block(self, x, pre, ref_kv=None, e=None):
        """One block; returns (new x, (k, v) of the cross sublayer)."""
        p = self.params
        heads = self.config.heads
        hn = self._ln(x, f"{pre}.ln1")
        q, k, v = self._linear_heads(hn, pre, "attn1")
        x = nx.add(x, nx.matmul(attention(q, k, v, heads), p[f"{pre}.attn1.o"]))
        hn = self._ln(x, f"{pre}.ln2")
        q, k, v = self._linear_heads(hn, pre, "attn2")
        k_ref, v_ref = ref_kv if ref_kv is not None else (None, None)
        a = cross_attention(q, k, v, k_ref, v_ref, e, heads)
        x = nx.add(x, nx.matmul(a, p[f"{pre}.attn2.o"]))
        x = nx.add(x, self._ff(self._ln(x, f"{pre}.ln3"), pre))
        return x, (k, v)

    # -- public passes ----------------------------------------------------
    def motion_encode(self, flow):
        """Latent-resolution flow (B, 2, h, w) or (2, h, w) -> tokens (B, h*w, d)."""
        p = self.params
        flow = nx.as_tensor(flow)
        if flow.dtype != self.dtype:
            flow = self._const(flow.data)
        squeeze = flow.ndim == 3
        if squeeze:
            flow = nx.reshape(flow, (1,) + flow.shape)
        if flow.ndim != 4 or flow.shape[1] != 2:
            raise nx.ShapeError(f"motion_encode: expected (B, 2, h, w) flow, got {flow.shape}")
        b, _, h, w = flow.shape
        x = nx.silu(nx.conv2d(flow, p["motion.c1.w"], p["motion.c1.b"]))
        x = nx.conv2d(x, p["motion.c2.w"], p["motion.c2.b"])
        d = self.config.d_model
        e = nx.transpose(nx.reshape(x, (b, d, h * w)), (0, 2, 1))
        return nx.reshape(e, (h * w, d)) if squeeze else e

    def reference_features(self, ref_latent):
        """Per-block (K_ref, V_ref) from the reference latent (B, C, h, w)."""
        ref_latent = np.asarray(ref_latent.data if isinstance(ref_latent, Tensor) else ref_latent)
        squeeze = ref_latent.ndim == 3
        if squeeze:
            ref_latent = ref_latent[None]
        x = self._tokens(ref_latent, "ref")
        feats = []
        for i in range(self.config.depth):
            x, kv = self._block(x, f"ref.blk{i}")
            feats.append(kv)
        return feats

    def predict_velocity(self, z_t, t, ref_feats=None, e=None):
        """Velocity prediction with the shape of ``z_t`` ((C,h,w) or (B,C,h,w)).

        ``ref_feats`` is the output of :meth:`reference_features` or None for the
        restoration-only path; ``e`` is a motion embedding or None.
        """
        p = self.params
        z_t = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t)
        squeeze = z_t.ndim == 3
        if squeeze:
            z_t = z_t[None]
        b, c, h, w = z_t.shape
        if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 0.2 + 1e-9):
            raise ValueError(f"t={t} outside [0, 0.2]")
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
        if e is not None:
            e = nx.as_tensor(e)
            if e.ndim == 2:
                e = nx.reshape(e, (1,) + e.shape)
        temb = nx.add(nx.matmul(self._const(time_features(t_arr, self.config.time_dim)), p["time.w"]), p["time.b"])
        x = nx.add(self._tokens(z_t, "res"), nx.reshape(temb, (b, 1, self.config.d_model)))
        for i in range(self.config.depth):
            kv = ref_feats[i] if ref_feats is not None else None
            x, _ = self._block(x, f"res.blk{i}", kv, e)
        x = self._ln(x, "out.ln")
        out = nx.add(nx.matmul(x, p["out.w"]), p["out.b"])
        out = nx.reshape(nx.transpose(out, (0, 2, 1)), (b, c, h, w))
        if self.config.precondition:
            skip, scale = velocity_preconditioning(t_arr, self.config.precond_tmin)
            shape = (b, 1, 1, 1)
            out = nx.add(nx.mul(out, self._const(scale.reshape(shape))), self._const(skip.reshape(shape) * z_t))
        return nx.reshape(out, (c, h, w)) if squeeze else out


# ---------------------------------------------------------------------------
# conditioning wiring (full model and the ablation variants)
# ---------------------------------------------------------------------------

WIRING_MODES = ("full", "no_motion_bias", "no_reference", "warp_ref_image", "warp_ref_latent", "warp_ref_kv")


class Wiring:
    """How the reference image and flows reach the restoration branch.

    ``attn_flow`` is the key-photo -> reselected flow (feeds the motion
    embedding); ``align_flow`` is the reselected -> key-photo flow (used by the
    warp variants to resample the reference onto the reselected grid).  Both
    are pixel-resolution (B, H, W, 2) arrays.
    """

    def __init__(self, mode="full"):
        if mode not in WIRING_MODES:
            raise ValueError(f"unknown wiring {mode!r}")
        self.mode = mode

    def __repr__(self):
        return f"Wiring({self.mode!r})"

    def condition(self, model, ref_images, attn_flow=None, align_flow=None):
        """Return (ref_feats, motion_embedding); either may be None."""
        from . import codec
        from . import flow as flowlib

        f = model.config.factor
        ref_images = np.asarray(ref_images, dtype=np.float32)
        if self.mode == "no_reference":
            return None, None
        if self.mode == "warp_ref_image":
            ref_images = np.stack([flowlib.warp(r, fl) for r, fl in zip(ref_images, align_flow)])
        latent = codec.encode(ref_images, f)
        if self.mode == "warp_ref_latent":
            lat_flows = [flowlib.downscale_flow(fl, f) for fl in align_flow]
            latent = np.stack([
                flowlib.warp(z.transpose(1, 2, 0), lf).transpose(2, 0, 1) for z, lf in zip(latent, lat_flows)
            ]).astype(np.float32)
        feats = model.reference_features(latent)
        if self.mode == "warp_ref_kv":
            mats = np.stack([flowlib.warp_matrix(flowlib.downscale_flow(fl, f)) for fl in align_flow])
            mats = model._const(mats)
            feats = [(nx.matmul(mats, k), nx.matmul(mats, v)) for k, v in feats]
        if self.mode != "full":
            return feats, None
        lat_flow = np.stack([flowlib.downscale_flow(fl, f).transpose(2, 0, 1) for fl in attn_flow])
        return feats, model.motion_encode(lat_flow)

    def velocity_fn(self, model, ref_images, attn_flow=None, align_flow=None):
        feats, e = self.condition(model, ref_images, attn_flow, align_flow)

        def fn(z, t):
            return model.predict_velocity(z, t, feats, e)

        return fn
