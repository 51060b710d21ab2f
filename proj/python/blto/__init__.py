"""Bilevel trigger optimisation backdoor for contrastive learning."""

import json

import torch  # noqa: F401  (loads libtorch before the extension)

from ._core import (
    ArgumentError,
    Config,
    ConfigError,
    Experiment,
    alignment_loss,
    infonce_loss,
    knn_predict,
    load_config,
    make_synthetic_set,
    project_linf,
    quantize_8bit,
    simsiam_loss,
    uniformity_loss,
    write_report,
)


def config_dict(config):
    """Resolved configuration as a plain dict."""
    return json.loads(config.to_json())


def evaluate(experiment, victim_index=0, embeddings=None):
    """Re-scores a trained victim; returns the eval.json contents."""
    return json.loads(experiment.evaluate(victim_index, embeddings))


__all__ = [
    "ArgumentError",
    "Config",
    "ConfigError",
    "Experiment",
    "alignment_loss",
    "config_dict",
    "evaluate",
    "infonce_loss",
    "knn_predict",
    "load_config",
    "make_synthetic_set",
    "project_linf",
    "quantize_8bit",
    "simsiam_loss",
    "uniformity_loss",
    "write_report",
]
