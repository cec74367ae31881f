"""pcreason: desk-scale rationale-then-answer reasoning over 3D point clouds.

Pure numpy implementation: tape-based autodiff, procedural object corpus,
multi-view splat rendering, geometry-guided cross-modal attention, a tiny
causal decoder with a constrained think/answer grammar, and deterministic
rationale verification against exact object metadata.
"""

from .autodiff import Rng, Tensor, finite_diff_check, no_grad
from .config import ConfigError, RunConfig
from .pipeline import (
    Model,
    PipelineError,
    TrainingAborted,
    evaluate,
    generate_corpus,
    gradcheck_report,
    load_corpus,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "Rng",
    "Tensor",
    "finite_diff_check",
    "no_grad",
    "ConfigError",
    "RunConfig",
    "Model",
    "PipelineError",
    "TrainingAborted",
    "evaluate",
    "generate_corpus",
    "gradcheck_report",
    "load_corpus",
    "train_model",
    "__version__",
]
