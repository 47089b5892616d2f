"""Diagnostics for the secondary information a classifier carries.

* top-k confidence statistics: mean softmax mass at each rank;
* second-choice confusion: true class vs. second-ranked class;
* angular distances between class, superclass and global feature means.
"""
from dataclasses import dataclass
import io

import numpy as np

from .generations import as_params, ensemble_predict
from .losses import confidence_ranking
from .model import penultimate_features

__all__ = [
    "DegenerateFeatureError",
    "TopKStats",
    "SecondChoiceMatrix",
    "DistanceReport",
    "topk_stats",
    "topk_stats_from_probs",
    "second_choice_confusion",
    "second_choice_from_probs",
    "within_superclass_fraction",
    "angular_distances",
    "distance_metrics",
]


class DegenerateFeatureError(ValueError):
    pass


@dataclass(frozen=True)
class TopKStats:
    means: np.ndarray  # mean probability at rank 1..k

    def to_text(self, prefix=""):
        return "".join(f"{prefix}rank{i + 1}={v!r}\n" for i, v in enumerate(self.means.tolist()))


@dataclass(frozen=True)
class SecondChoiceMatrix:
    counts: np.ndarray  # [C, C], row = true class, column = second choice

    def to_csv(self):
        buf = io.StringIO()
        c = self.counts.shape[0]
        buf.write(",".join(str(j) for j in range(c)) + "\n")
        for row in self.counts:
            buf.write(",".join(str(int(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        lines = text.strip().splitlines()
        return cls(np.array([[int(v) for v in ln.split(",")] for ln in lines[1:]], dtype=np.int64))


@dataclass(frozen=True)
class DistanceReport:
    dist_c: float
    dist_s: float
    split: str = "test"

    def to_text(self):
        return f"{self.split}.dist_c={self.dist_c!r}\n{self.split}.dist_s={self.dist_s!r}\n"


def _probs(checkpoint, x):
    if isinstance(checkpoint, (list, tuple)):
        return ensemble_predict(checkpoint, x)
    return ensemble_predict([checkpoint], x)


def topk_stats_from_probs(probs, k):
    return TopKStats(confidence_ranking(probs, k).values.mean(axis=0))


def topk_stats(checkpoint, data, k=4):
    """Mean of each of the k largest softmax entries over ``data``."""
    if k > data.num_classes:
        raise ValueError(f"k={k} exceeds the number of classes {data.num_classes}")
    return topk_stats_from_probs(_probs(checkpoint, data.x), k)


def second_choice_from_probs(probs, labels, num_classes):
    second = confidence_ranking(probs, 2).indices[:, 1]
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels), second), 1)
    return SecondChoiceMatrix(counts)


def second_choice_confusion(checkpoint, data):
    """Counts of (true class, second-highest class); positional, ties to lower id."""
    return second_choice_from_probs(_probs(checkpoint, data.x), data.y, data.num_classes)


def within_superclass_fraction(matrix, super_of):
    counts = matrix.counts if isinstance(matrix, SecondChoiceMatrix) else np.asarray(matrix)
    same = super_of[:, None] == super_of[None, :]
    return float(counts[same].sum() / counts.sum())


def _angle(a, b):
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateFeatureError("zero-norm mean feature vector")
    cos = np.sum(a * b, axis=-1) / (na * nb)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def angular_distances(features, labels, super_of, split="test"):
    """Mean angle class-mean -> superclass-mean, and superclass-mean -> global mean.

    Superclass means average the member samples; the global mean is the
    unweighted average of superclass means.
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    super_of = np.asarray(super_of)
    C = super_of.size
    S = int(super_of.max()) + 1
    class_means = np.stack([f[labels == i].mean(axis=0) for i in range(C)])
    sup = super_of[labels]
    super_means = np.stack([f[sup == j].mean(axis=0) for j in range(S)])
    global_mean = super_means.mean(axis=0)
    dist_c = float(np.mean(_angle(class_means, super_means[super_of])))
    dist_s = float(np.mean(_angle(super_means, global_mean[None, :])))
    return DistanceReport(dist_c, dist_s, split)


def distance_metrics(checkpoint, data):
    """Angular distance report from last-hidden-layer features."""
    params = as_params(checkpoint)
    feats = penultimate_features(params, data.x).data
    return angular_distances(feats, data.y, data.super_of, data.split)

