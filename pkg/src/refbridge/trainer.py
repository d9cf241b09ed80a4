"""Toy-scale training under the bridge loss, checkpoints, ablation switches."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bridge, codec
from . import flow as flowlib
from . import numerics as nx
from .degradation import load_sample, read_manifest
from .imageio import sub_seed
from .model import ModelConfig, Restorer, Wiring

log = logging.getLogger(__name__)

ABLATION_FLAGS = ("no_reference_branch", "no_motion_bias", "warp_ref_image", "warp_ref_latent", "warp_ref_kv")
WARP_FLAGS = ("warp_ref_image", "warp_ref_latent", "warp_ref_kv")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    no_reference_branch: bool = False
    no_motion_bias: bool = False
    warp_ref_image: bool = False
    warp_ref_latent: bool = False
    warp_ref_kv: bool = False

    @classmethod
    def from_names(cls, names):
        unknown = set(names) - set(ABLATION_FLAGS)
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}")
        return cls(**{n: True for n in names})

    def active(self):
        return [n for n in ABLATION_FLAGS if getattr(self, n)]


def apply_ablation(flags):
    """Map ablation flags to a :class:`~refbridge.model.Wiring`.

    All off is the full model (motion-biased cross-attention).  At most one
    warp flag may be set; the warp variants drop the motion bias.
    """
    flags = flags if isinstance(flags, AblationFlags) else AblationFlags.from_names(flags)
    on = flags.active()
    warps = [n for n in on if n in WARP_FLAGS]
    if len(warps) > 1:
        raise ValueError(f"conflicting ablation flags: {warps}")
    if flags.no_reference_branch and len(on) > 1:
        raise ValueError(f"no_reference_branch cannot be combined with {[n for n in on if n != 'no_reference_branch']}")
    if flags.no_reference_branch:
        return Wiring("no_reference")
    if warps:
        return Wiring(warps[0])
    if flags.no_motion_bias:
        return Wiring("no_motion_bias")
    return Wiring("full")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 8
    steps: int = 500
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    image_size: int = 16
    model: ModelConfig = field(default_factory=ModelConfig)
    flow_block: int = 8
    flow_search: int = 4
    flow_source: str = "estimated"    # or "groundtruth"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    val_fraction: float = 0.1

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["ablation"] = AblationFlags(**d.get("ablation", {}))
        d["model"] = ModelConfig(**d.get("model", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def toy_config(**overrides):
    """The recipe that trains the toy model in 500 steps on the shifted-pair
    fixture.  The defaults above keep the full-scale learning rate and batch
    size, which barely move a from-scratch toy network in that budget."""
    base = {"lr": 4e-3, "batch_size": 32, "steps": 500}
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class PairBatch:
    z_hs: np.ndarray       # (B, C, h, w)
    z_ls: np.ndarray
    ref: np.ndarray        # (B, H, W, 3) clean key photos
    attn_flow: np.ndarray  # (B, H, W, 2) key photo -> reselected
    align_flow: np.ndarray  # (B, H, W, 2) reselected -> key photo

    def take(self, idx):
        return PairBatch(*(a[idx] for a in (self.z_hs, self.z_ls, self.ref, self.attn_flow, self.align_flow)))

    def __len__(self):
        return len(self.z_hs)


def load_pairs(manifest, cfg):
    """Read every manifest sample and precompute latents and both flows."""
    entries = read_manifest(manifest)
    if not entries:
        raise ValueError(f"{manifest}: empty manifest")
    f = cfg.model.factor
    zs_hs, zs_ls, refs, attn, align = [], [], [], [], []
    for e in entries:
        hs, ho, ls, lo, gt_flow = load_sample(e)
        if cfg.flow_source == "groundtruth":
            fwd = gt_flow
            bwd = -gt_flow
        else:
            # degradation-matched estimation on the (I_Lo, I_Ls) pair
            fwd = flowlib.estimate_flow(lo, ls, cfg.flow_block, cfg.flow_search)
            bwd = flowlib.estimate_flow(ls, lo, cfg.flow_block, cfg.flow_search)
        zs_hs.append(codec.encode(hs, f))
        zs_ls.append(codec.encode(ls, f))
        refs.append(ho)
        attn.append(fwd)
        align.append(bwd)
    return PairBatch(*(np.stack(a).astype(np.float32) for a in (zs_hs, zs_ls, refs, attn, align)))


def split_train_val(pairs, val_fraction=0.1):
    """Last ``val_fraction`` of the manifest (at least one sample) is validation."""
    n = len(pairs)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    idx = np.arange(n)
    return pairs.take(idx[: n - n_val]), pairs.take(idx[n - n_val:])


def batch_loss(model, wiring, batch, seed):
    vel = wiring.velocity_fn(model, batch.ref, batch.attn_flow, batch.align_flow)
    return bridge.bridge_loss(vel, batch.z_hs, batch.z_ls, seed)


def validation_loss(model, wiring, pairs, seed=12345, repeats=4):
    """Mean bridge loss over ``repeats`` fixed noise/time draws of the whole set."""
    if len(pairs) == 0:
        return float("nan")
    with nx.no_grad():
        vals = [float(batch_loss(model, wiring, pairs, sub_seed(seed, r)).data) for r in range(repeats)]
    return float(np.mean(vals))


@dataclass
class TrainResult:
    model: Restorer
    losses: list
    val_loss: float
    config: TrainConfig


def train(cfg, manifest=None, pairs=None, init_model=None):
    """Adam on the bridge loss.  Pass a manifest path or preloaded ``pairs``."""
    if pairs is None:
        pairs = load_pairs(manifest, cfg)
    train_set, val_set = split_train_val(pairs, cfg.val_fraction)
    if len(train_set) == 0:
        raise ValueError("no training samples")
    wiring = apply_ablation(cfg.ablation)
    model = init_model or Restorer(cfg.model, seed=cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.betas, cfg.adam_eps)
    rng = np.random.default_rng(sub_seed(cfg.seed, 1))
    losses = []
    for step in range(cfg.steps):
        idx = rng.choice(len(train_set), size=min(cfg.batch_size, len(train_set)), replace=False)
        batch = train_set.take(np.sort(idx))
        model.zero_grad()
        loss = batch_loss(model, wiring, batch, sub_seed(cfg.seed, 1000 + step))
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite loss at step {step}")
        loss.backward()
        if cfg.lr != 0:
            opt.step()
        losses.append(val)
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, val)
    return TrainResult(model, losses, validation_loss(model, wiring, val_set), cfg)


def write_loss_trace(losses, path):
    Path(path).write_text("".join(f"{i}\t{v:.8g}\n" for i, v in enumerate(losses)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = "REFBRIDGE-CKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path, step=0, seed=0, config_hash="", wiring="full"):
    """Text header (``key: value`` lines up to ``end_header``) + raw little-endian
    float32 arrays in ``model.param_names()`` order."""
    names = model.param_names()
    header = [
        f"{CKPT_MAGIC} {CKPT_VERSION}",
        f"model: {json.dumps(model.config.to_dict(), sort_keys=True)}",
        f"step: {step}",
        f"seed: {seed}",
        f"config_hash: {config_hash}",
        f"wiring: {wiring}",
        f"params: {len(names)}",
    ]
    header += [f"param: {n} {','.join(map(str, model.params[n].shape))}" for n in names]
    header.append("end_header")
    payload = b"".join(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes() for n in names)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        fh.write(payload)


def read_checkpoint_header(raw, path="<bytes>"):
    end = raw.find(b"end_header\n")
    if end < 0:
        raise CheckpointError(f"{path}: no end_header marker")
    lines = raw[:end].decode("utf-8", errors="replace").splitlines()
    if not lines or not lines[0].startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (first line {lines[0] if lines else ''!r})")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise CheckpointError(f"{path}: unreadable version line {lines[0]!r}") from None
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {CKPT_VERSION}")
    meta = {"params": []}
    for line in lines[1:]:
        key, _, val = line.partition(": ")
        if key == "param":
            name, shape = val.rsplit(" ", 1)
            meta["params"].append((name, tuple(int(s) for s in shape.split(",") if s)))
        elif key == "params":
            meta["param_count"] = val
        else:
            meta[key] = val
    try:
        meta["model"] = ModelConfig(**json.loads(meta["model"]))
        meta["step"] = int(meta["step"])
        meta["seed"] = int(meta["seed"])
        if int(meta["param_count"]) != len(meta["params"]):
            raise ValueError(f"header lists {len(meta['params'])} params, declares {meta['param_count']}")
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from None
    meta["payload_offset"] = end + len(b"end_header\n")
    return meta


def load_checkpoint(path, with_meta=False):
    raw = Path(path).read_bytes()
    meta = read_checkpoint_header(raw, path)
    model = Restorer(meta["model"], seed=0)
    declared = meta["params"]
    if [n for n, _ in declared] != model.param_names():
        raise CheckpointError(f"{path}: parameter list does not match model dims in header")
    for name, shape in declared:
        if model.params[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, model dims imply {model.params[name].shape}")
    need = sum(int(np.prod(s)) for _, s in declared) * 4
    payload = raw[meta["payload_offset"]:]
    if len(payload) != need:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header implies {need}")
    off = 0
    state = {}
    for name, shape in declared:
        n = int(np.prod(shape))
        state[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    model.load_state_dict(state)
    return (model, meta) if with_meta else model

