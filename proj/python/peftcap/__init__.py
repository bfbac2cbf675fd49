"""Parameter-efficient caption fine-tuning toolkit (Python bindings)."""

from ._core import (
    ConfigError,
    DataError,
    NumericError,
    audit_paper,
    audit_toy,
    bleu4,
    cider,
    display_name,
    generate_corpus,
    grayscale,
    high_freq_extract,
    strategy_names,
)

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "audit_paper",
    "audit_toy",
    "bleu4",
    "cider",
    "display_name",
    "generate_corpus",
    "grayscale",
    "high_freq_extract",
    "strategy_names",
]
