"""Finding the matching reference patch under large motion.

Run: python3 demos/02_flow_and_patch_retrieval.py

The reference photo is the same scene shifted by (-12, 7) pixels.  Block
matching recovers the shift; patch correspondence retrieval then moves every
tile's reference crop by the tile's mean flow so the crop shows the same
content, instead of the co-located (and wrong) patch.
"""
import numpy as np

from refbridge import flow as flowlib
from refbridge import pcr_tiling as pcr
from refbridge.synthetic import textured_image

size, (tx, ty) = 96, (-12, 7)
big = textured_image(size + 40, size + 40, seed=3, scales=(1.0, 3.0))
lq = big[20:20 + size, 20:20 + size]                       # reselected frame
ref = big[20 - ty:20 - ty + size, 20 - tx:20 - tx + size]  # key photo: lq[y, x] == ref[y + ty, x + tx]

flow_ls_lo = flowlib.estimate_flow(lq, ref, block=16, search=16)
print("median estimated flow (u, v):", np.median(flow_ls_lo.reshape(-1, 2), axis=0), "expected", (tx, ty))

plan = pcr.plan_tiles(size, size, patch=32, overlap=8)
print(f"{len(plan)} tiles of 32 px")
for i in range(len(plan)):
    patch, corr = pcr.retrieve_reference_patch(plan, i, flow_ls_lo, ref)
    sy, sx = plan.window(i)
    err_pcr = np.abs(patch - lq[sy, sx]).mean()
    err_colocated = np.abs(ref[sy, sx] - lq[sy, sx]).mean()
    print(f"tile {i}: corner {corr.corner} -> {corr.aligned}{' (clamped)' if corr.clamped else ''}  "
          f"mean abs diff retrieved {err_pcr:.3f} vs co-located {err_colocated:.3f}")
