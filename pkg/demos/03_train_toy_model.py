"""Training the toy restorer with and without its reference branch.

Run: python3 demos/03_train_toy_model.py [steps]

Builds the seeded shifted-pair fixture (16 x 16 crops, severe degradation,
key photo shifted by at most one pixel), then trains two models with the toy
recipe: the full model, whose cross-attention also reads the clean key photo,
and a variant without the reference branch.  The reference branch should give
a lower validation loss.  The default 200 steps take about a minute per model
on one core; the acceptance suite uses 500.
"""
import sys
import tempfile

import numpy as np

from refbridge import trainer as tr
from refbridge.degradation import shifted_pair_dataset

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
with tempfile.TemporaryDirectory() as tmp:
    manifest = shifted_pair_dataset(tmp, n=200, seed=0)
    pairs = tr.load_pairs(manifest, tr.toy_config())

for name, flags in (("with reference", tr.AblationFlags()),
                    ("without reference", tr.AblationFlags(no_reference_branch=True))):
    result = tr.train(tr.toy_config(steps=steps, ablation=flags), pairs=pairs)
    losses = np.array(result.losses)
    window = max(1, steps // 10)
    print(f"{name:18s} loss {losses[:window].mean():.3f} -> {losses[-window:].mean():.3f}, "
          f"validation {result.val_loss:.4f}")
