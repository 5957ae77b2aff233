"""Open-world video anomaly detection: synthetic data, training, scoring."""

import json as _json

from . import _openvad
from ._openvad import (
    CorruptionError,
    NotFoundError,
    NumericError,
    ValidationError,
    average_precision,
    check_shared_conditional,
    multiclass_metrics,
    roc_auc,
)

__all__ = [
    "CorruptionError",
    "NotFoundError",
    "NumericError",
    "ValidationError",
    "average_precision",
    "build_knn",
    "check_shared_conditional",
    "default_config",
    "evaluate",
    "generate_dataset",
    "multiclass_metrics",
    "resolve_config",
    "roc_auc",
    "score",
    "train",
]


def _dump(obj):
    return "" if obj is None else _json.dumps(obj)


def default_config():
    return _json.loads(_openvad.default_config())


def resolve_config(overrides=None):
    return _json.loads(_openvad.resolve_config(_dump(overrides or {})))


def generate_dataset(out_dir, **spec):
    return _json.loads(_openvad.generate_dataset(str(out_dir), _dump(spec) if spec else ""))


def build_knn(dataset_dir, n=200):
    return _json.loads(_openvad.build_knn(str(dataset_dir), n))


def train(dataset_dir, out_dir, **config):
    return _json.loads(_openvad.train(str(dataset_dir), str(out_dir), _dump(config) if config else ""))


def score(checkpoint, dataset_dir, video_id, definition=None):
    return _json.loads(_openvad.score(str(checkpoint), str(dataset_dir), video_id, _dump(definition)))


def evaluate(checkpoint, dataset_dir, split="val", subsets=None):
    return _json.loads(_openvad.evaluate(str(checkpoint), str(dataset_dir), split, _dump(subsets)))
