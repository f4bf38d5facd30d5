"""Token-specific watermarking with learned splitting ratio and watermark logit.

A desk-scale implementation: a synthetic entropy-structured bigram model
stands in for the LLM, two small MLPs map the preceding token's embedding
to a per-token green-list fraction and logit bias, and training balances
detectability against semantic drift with MGDA.
"""

from .errors import (ConfigurationError, FitError, InputError, NumericError, TrainingAborted, UsageError,
                     WatermarkError)

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "FitError", "InputError", "NumericError", "TrainingAborted", "UsageError",
           "WatermarkError", "__version__"]
