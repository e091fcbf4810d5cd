"""Cross-embodiment latent action toolkit.

A compact numpy/scipy stack for representing robot end-effectors of very
different morphologies in one shared latent space: load a hand description,
sample a surface point cloud from its kinematic state, encode the cloud
with kernel-point convolutions and a small geometric transformer, and
decode the latent back onto any registered hand. On top of that sit a
retargeting optimizer and a toy diffusion-policy co-training loop.
"""

__version__ = "0.1.0"

from .registry import UNIVERSAL_JOINT_NAMES, UNIVERSAL_MODEL_SIZE, REGISTRY_VERSION

__all__ = [
    "UNIVERSAL_JOINT_NAMES",
    "UNIVERSAL_MODEL_SIZE",
    "REGISTRY_VERSION",
    "__version__",
]
