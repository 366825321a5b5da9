"""Concept-based adversarial patch defense (Python bindings)."""

from ._cpdefense import (
    Classifier,
    ConfigError,
    DegenerateInputError,
    Error,
    InputError,
    Pipeline,
    StaleArtifactError,
    UnsupportedError,
    default_config,
    gaussian_blur,
    generate_desk_corpus,
    nmf,
    render_texture,
    resolve_config,
    save_resnet50,
    sobol_total_indices,
    top_n_count,
)

__all__ = [
    "Classifier",
    "ConfigError",
    "DegenerateInputError",
    "Error",
    "InputError",
    "Pipeline",
    "StaleArtifactError",
    "UnsupportedError",
    "default_config",
    "gaussian_blur",
    "generate_desk_corpus",
    "nmf",
    "render_texture",
    "resolve_config",
    "save_resnet50",
    "sobol_total_indices",
    "top_n_count",
]
