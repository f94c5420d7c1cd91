"""Distribution embeddings for person re-identification.

Images map to diagonal-Gaussian posteriors, classes to trainable Gaussian
priors; training matches the two with a KL-based classification loss.
"""

from .errors import DistEmbedError
from .gaussian import DiagGaussian, kl_divergence, wasserstein_sq
from .model import EmbedModel, ModelConfig
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "DiagGaussian",
    "DistEmbedError",
    "EmbedModel",
    "ModelConfig",
    "Tensor",
    "kl_divergence",
    "no_grad",
    "wasserstein_sq",
]
