"""Reference-guided restoration at desk scale.

A numpy/scipy implementation of bridge flow matching between degraded and
clean latents, a dual-branch transformer whose cross-attention reads a clean
reference photo (with encoded optical flow added to the reference keys),
patch-correspondence tiling for large images, synthetic degradation, and
reference-relative quality metrics.
"""
from importlib import resources

__version__ = "0.1.0"

ABLATION_CHECKPOINTS = ("full", "no_reference", "warp_ref_image", "warp_ref_latent", "warp_ref_kv")
# trained on undegraded pairs whose reference equals the clean image
SHIPPED_CHECKPOINTS = ABLATION_CHECKPOINTS + ("identity",)


def shipped_checkpoint(name="full"):
    """Path of a bundled toy checkpoint."""
    if name not in SHIPPED_CHECKPOINTS:
        raise ValueError(f"no shipped checkpoint {name!r}; choose from {SHIPPED_CHECKPOINTS}")
    return resources.files(__name__).joinpath("data", f"{name}.ckpt")
