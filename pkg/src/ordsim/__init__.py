"""Bayesian cumulative-logit models and a simulation harness for ordinal trial outcomes."""

__version__ = "0.1.0"

from .ordcore import OrdinalCounts  # noqa: E402
from .posterior import MODEL_LABELS, ModelSpec  # noqa: E402
from .sampler import SamplerConfig, run_model  # noqa: E402

__all__ = ["OrdinalCounts", "ModelSpec", "MODEL_LABELS", "SamplerConfig", "run_model", "__version__"]
