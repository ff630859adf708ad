"""setflow: flow-matching generation of bags of embedding vectors, with a
latent-FID / nearest-neighbour / MIL-classifier evaluation pipeline."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
