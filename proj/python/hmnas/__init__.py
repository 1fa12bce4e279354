"""Differentiable architecture search with hierarchical masks (C++ core)."""

from ._core import (
    ConfigError,
    Error,
    NumericError,
    PrerequisiteError,
    binarize,
    check_grad,
    config_keys,
    derive_seed,
    load_dataset,
    resolve_config,
    run_ablation,
    run_eval,
    run_pipeline,
)

__all__ = [
    "ConfigError",
    "Error",
    "NumericError",
    "PrerequisiteError",
    "binarize",
    "check_grad",
    "config_keys",
    "derive_seed",
    "load_dataset",
    "resolve_config",
    "run_ablation",
    "run_eval",
    "run_pipeline",
]
