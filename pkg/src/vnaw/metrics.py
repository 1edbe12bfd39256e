"""Per-class precision/recall/F1 and macro-F1 from exact confusion counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EXPRESSIONS = ("Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other")


def class_names(k: int) -> list[str]:
    """Expression names for the 8-class setup, generic names otherwise."""
    if k == len(EXPRESSIONS):
        return list(EXPRESSIONS)
    return [f"class{c}" for c in range(k)]


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def empty(cls, k: int) -> "ConfusionCounts":
        z = lambda: np.zeros(k, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z())

    @classmethod
    def from_predictions(cls, preds, truths, k: int) -> "ConfusionCounts":
        preds = np.asarray(preds, dtype=np.int64)
        truths = np.asarray(truths, dtype=np.int64)
        if preds.shape != truths.shape:
            raise ValueError("predictions and truths differ in length")
        for arr in (preds, truths):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"class index out of range [0, {k})")
        hit = preds == truths
        tp = np.bincount(preds[hit], minlength=k)
        fp = np.bincount(preds[~hit], minlength=k)
        fn = np.bincount(truths[~hit], minlength=k)
        return cls(tp, fp, fn)

    @property
    def classes(self) -> int:
        return len(self.tp)

    def accumulate(self, pred: int, truth: int) -> "ConfusionCounts":
        k = self.classes
        if not (0 <= pred < k and 0 <= truth < k):
            raise ValueError(f"class index out of range [0, {k})")
        if pred == truth:
            self.tp[pred] += 1
        else:
            self.fp[pred] += 1
            self.fn[truth] += 1
        return self

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionCounts)
            and np.array_equal(self.tp, other.tp)
            and np.array_equal(self.fp, other.fp)
            and np.array_equal(self.fn, other.fn)
        )


def class_f1(counts: ConfusionCounts, c: int) -> float:
    """F1 of class ``c``; 0 whenever precision or recall is undefined or both are 0."""
    tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def per_class_f1(counts: ConfusionCounts) -> np.ndarray:
    return np.array([class_f1(counts, c) for c in range(counts.classes)])


def macro_f1(counts: ConfusionCounts) -> float:
    # plain left-to-right sum so results are reproducible against a scalar oracle
    return sum(class_f1(counts, c) for c in range(counts.classes)) / counts.classes
