"""How the bridge moves from a degraded latent to a clean one.

Run: python3 demos/01_bridge_schedule.py

The forward process lives on the short window t in [0, 0.2].  At t = 0 the
state is the clean latent, at t = 0.2 it is mostly the degraded latent with a
little noise.  Sampling walks back from 0.2 to 0 in six Euler steps.
"""
import numpy as np

from refbridge import bridge, codec
from refbridge.degradation import degrade, preset
from refbridge.metrics import psnr_y
from refbridge.synthetic import textured_image

print("t      alpha   beta    sigma   (clean, degraded, noise weights)")
for t in np.linspace(0, 0.2, 5):
    a, b, s = bridge.coefficients(t)
    print(f"{t:.2f}   {float(a):.3f}   {float(b):.3f}   {float(s):.3f}")

clean = textured_image(16, 16, seed=0, scales=(2.0,), contrast=1.5)
lq = degrade(clean, preset("severe", seed=1))
z_hs, z_ls = codec.encode(clean, 2), codec.encode(lq, 2)
eps = np.random.default_rng(0).standard_normal(z_hs.shape)

# With the exact velocity of this one trajectory the sampler lands close to the
# clean latent; the remaining error is Euler's and halves when the step halves.
for steps in (6, 12, 24):
    def oracle(z, t):
        return bridge.forward_sample(z_hs, z_ls, t, eps).target_velocity

    z0 = bridge.sample(oracle, z_ls, steps=steps, eps=eps)
    print(f"{steps:2d} steps: max latent error {np.max(np.abs(z0 - z_hs)):.2e}, "
          f"PSNR {psnr_y(codec.decode(z0, 2, clamp=True), clean):.1f} dB "
          f"(degraded input {psnr_y(lq, clean):.1f} dB)")
