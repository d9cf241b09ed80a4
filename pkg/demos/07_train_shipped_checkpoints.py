"""Rebuild the bundled checkpoints from scratch.

Run: python3 demos/07_train_shipped_checkpoints.py [outdir] [steps]

The five ablation checkpoints are the toy recipe run for 3000 steps (instead
of 500) on the seed-0, 200-pair shifted-pair fixture; only the ablation flags
differ.  The identity checkpoint sees undegraded, unshifted pairs (so the
reference equals the clean image) and starts from a sharper cross-attention
locality gain of 8, which lets it learn to copy the reference exactly.  Expect
five to nine minutes per model on one core.  Copy the results into
src/refbridge/data/ to replace the shipped files.
"""
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from refbridge import SHIPPED_CHECKPOINTS
from refbridge import trainer as tr
from refbridge.degradation import shifted_pair_dataset
from refbridge.model import ModelConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "shipped_checkpoints")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 3000
out.mkdir(parents=True, exist_ok=True)

FLAGS = {
    "full": tr.AblationFlags(),
    "no_reference": tr.AblationFlags(no_reference_branch=True),
    "warp_ref_image": tr.AblationFlags(warp_ref_image=True),
    "warp_ref_latent": tr.AblationFlags(warp_ref_latent=True),
    "warp_ref_kv": tr.AblationFlags(warp_ref_kv=True),
}

with tempfile.TemporaryDirectory() as tmp:
    pairs = tr.load_pairs(shifted_pair_dataset(Path(tmp) / "shifted", n=200, seed=0), tr.toy_config())
    identity_pairs = tr.load_pairs(
        shifted_pair_dataset(Path(tmp) / "identity", n=200, seed=0, max_shift=0.0, preset="identity"),
        tr.toy_config())

for name in SHIPPED_CHECKPOINTS:
    if name == "identity":
        flags, data = tr.AblationFlags(), identity_pairs
        cfg = tr.toy_config(steps=steps, model=ModelConfig(locality_gain=8.0))
    else:
        flags, data = FLAGS[name], pairs
        cfg = tr.toy_config(steps=steps, ablation=flags)
    start = time.time()
    result = tr.train(cfg, pairs=data)
    tr.save_checkpoint(result.model, out / f"{name}.ckpt", steps, cfg.seed, cfg.digest(),
                       tr.apply_ablation(flags).mode)
    print(f"{name:16s} last-100 loss {np.mean(result.losses[-100:]):.4f}  "
          f"validation {result.val_loss:.4f}  {time.time() - start:.0f} s", flush=True)
