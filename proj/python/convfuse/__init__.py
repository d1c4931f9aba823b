# SPDX-License-Identifier: Apache-2.0
"""Grouped dual-encoder anomaly segmentation with convolutional low-rank adapters."""

from ._core import (
    ConfigError,
    Corpus,
    LoadError,
    MetricError,
    Model,
    RunConfig,
    Sample,
    ShapeError,
    TrainingError,
    auroc,
    average_precision,
    evaluate,
    load_checkpoint,
    load_corpus,
    save_checkpoint,
    selftest,
    sign_test_p_value,
    train,
)

__all__ = [
    "ConfigError",
    "Corpus",
    "LoadError",
    "MetricError",
    "Model",
    "RunConfig",
    "Sample",
    "ShapeError",
    "TrainingError",
    "auroc",
    "average_precision",
    "evaluate",
    "load_checkpoint",
    "load_corpus",
    "save_checkpoint",
    "selftest",
    "sign_test_p_value",
    "train",
]
