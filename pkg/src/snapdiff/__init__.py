"""snapdiff: desk-scale zero-shot diffusion personalization.

A single forward pass through a concept-extraction MLP predicts a textual
inversion token from one image; the token conditions a small text-to-image
diffusion model whose cross-attention layers were fine-tuned to accept
predicted tokens. Everything (corpus, encoders, diffusion model) trains from
scratch in minutes on a CPU.
"""

from .config import Config, ConfigError, make_config, validate_config

__all__ = ["Config", "ConfigError", "make_config", "validate_config"]
__version__ = "0.1.0"
