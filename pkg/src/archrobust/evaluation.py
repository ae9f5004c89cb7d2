"""Turning predicted class probabilities into robustness records."""

from __future__ import annotations

import numpy as np

from .datastore import RobustnessRecord
from .tinynet.layers import softmax

__all__ = ["prediction_stats", "record_from_probs", "clean_record", "predict_probs"]


def predict_probs(net, x, batch_size=256) -> np.ndarray:
    out = [softmax(net.forward(x[i : i + batch_size])) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.config.num_classes))


def prediction_stats(probs: np.ndarray, labels: np.ndarray, num_classes: int):
    """Accuracy, the three confidence schemes and the confusion matrix.

    ``label`` row k is the mean softmax vector over examples of true class k,
    ``argmax`` row k the mean over examples predicted as k (zeros when no
    example falls in a row), ``prediction`` is the mean top probability of
    correctly and of incorrectly classified examples.
    """
    labels = np.asarray(labels)
    pred = probs.argmax(axis=1)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)

    def row_means(groups):
        sums = np.zeros((num_classes, num_classes))
        np.add.at(sums, groups, probs)
        counts = np.bincount(groups, minlength=num_classes)
        return np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)

    top = probs.max(axis=1)
    ok = pred == labels
    conf = {
        "label": row_means(labels),
        "argmax": row_means(pred),
        "prediction": np.array([top[ok].mean() if ok.any() else 0.0, top[~ok].mean() if (~ok).any() else 0.0]),
    }
    acc = float(np.trace(cm) / len(labels)) if len(labels) else 0.0
    return acc, conf, cm


def record_from_probs(key, probs_per_level, labels, num_classes, levels=()) -> RobustnessRecord:
    accs, confs, cms = [], [], []
    for probs in probs_per_level:
        a, c, m = prediction_stats(probs, labels, num_classes)
        accs.append(a)
        confs.append(c)
        cms.append(m)
    return RobustnessRecord(key, accs, confs, cms, list(levels))


def clean_record(net, data) -> RobustnessRecord:
    probs = predict_probs(net, data.images)
    return record_from_probs("clean", [probs], data.labels, net.config.num_classes)
