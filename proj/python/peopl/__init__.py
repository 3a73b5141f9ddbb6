"""Exact privacy scores for randomized encoders, an MMD estimator and the
config-driven experiment runner."""

from ._peopl import (
    BudgetExceeded,
    Divergence,
    EncoderFamily,
    ImpossibleObservation,
    InvalidArgument,
    PeoplError,
    Universe,
    __version__,
    compose,
    decompose,
    mismatched_uniform_score,
    mmd_unbiased,
    permutation_family,
    privacy_score,
    run,
    utility_score,
    validate_config,
)

__all__ = [
    "BudgetExceeded",
    "Divergence",
    "EncoderFamily",
    "ImpossibleObservation",
    "InvalidArgument",
    "PeoplError",
    "Universe",
    "__version__",
    "compose",
    "decompose",
    "mismatched_uniform_score",
    "mmd_unbiased",
    "permutation_family",
    "privacy_score",
    "run",
    "utility_score",
    "validate_config",
]
