"""Score-level fusion: threshold calibration and committee decisions.

Per (attribute, predictor) pair, a threshold is calibrated on validation
scores to maximize accuracy.  At decision time the Highest-Ranked Predictor
(HRP) rule thresholds the best usable predictor's score, and the
Normalized-Score Aggregation (NSA) rule rescales the top usable scores so
each threshold lands at 0.5, then compares an aggregate (product or median)
of the normalized scores against the aggregate of their complements.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, MalformedRow, ShapeMismatch
from .geometry import PREDICTORS, SegmentId

#: Defaults: committee size for NSA and the threshold clamp for Eq-9 style
#: normalization (keeps the division by t and 1-t finite).
DEFAULT_COMMITTEE_SIZE = 5
THRESHOLD_CLAMP = 1e-6


def search_optimal_threshold(scores, labels) -> tuple[float, float]:
    """Threshold and accuracy maximizing agreement with binary labels.

    Predictions are positive iff score >= t.  Candidates are 0, the
    midpoints between adjacent distinct sorted scores, and 1; among
    accuracy ties the smallest candidate wins.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.size == 0:
        raise EmptyInput("threshold search needs at least one score")
    if s.shape != y.shape:
        raise ShapeMismatch(f"scores {s.shape} vs labels {y.shape}")

    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]

    distinct = np.unique(s_sorted)
    candidates = np.concatenate(
        ([0.0], (distinct[:-1] + distinct[1:]) / 2.0, [1.0]))

    # For candidate t: predictions below t are negative, the rest positive.
    # zeros_before[k] = #(y=0) among the k smallest scores; ones_from[k] =
    # #(y=1) among the rest.
    zeros_before = np.concatenate(([0], np.cumsum(y_sorted == 0)))
    total_ones = int(np.sum(y_sorted == 1))
    ones_before = np.concatenate(([0], np.cumsum(y_sorted == 1)))

    split = np.searchsorted(s_sorted, candidates, side="left")
    correct = zeros_before[split] + (total_ones - ones_before[split])
    best = int(np.argmax(correct))  # argmax takes the first (smallest) tie
    return float(candidates[best]), float(correct[best] / s.size)


def usable_predictors(ranking, visibility) -> tuple[int, ...]:
    """Order-preserving filter of a predictor ranking by visibility.

    ``visibility`` is indexable by predictor index 0..15; FULL (0) and GP
    (15) must be visible.
    """
    if not visibility[SegmentId.FULL.value] or not visibility[SegmentId.GP.value]:
        raise ValueError("FULL and GP must always be visible")
    return tuple(i for i in ranking if visibility[i])


def hrp_decide(usable, scores, thresholds) -> int:
    """Decision of the single best usable predictor: 1 iff score >= t."""
    if len(usable) == 0:
        raise EmptyInput("no usable predictors")
    top = usable[0]
    return 1 if scores[top] >= thresholds[top] else 0


def linear_threshold_normalize(x: float, t: float) -> float:
    """Piecewise-linear rescale sending [0,t] to [0,0.5] and [t,1] to [0.5,1]."""
    t = min(max(t, THRESHOLD_CLAMP), 1.0 - THRESHOLD_CLAMP)
    if x <= t:
        return 0.5 * x / t
    return (0.5 * x + 0.5 - t) / (1.0 - t)


def build_Z(usable, scores, thresholds, p: int = DEFAULT_COMMITTEE_SIZE):
    """Normalized scores of the top min(|usable|, p) predictors."""
    if p < 1:
        raise ValueError(f"committee size must be >= 1, got {p}")
    top = list(usable)[: min(len(usable), p)]
    return [linear_threshold_normalize(float(scores[i]), float(thresholds[i]))
            for i in top]


def nsa_decide(z, aggregator: str = "product") -> int:
    """Committee decision: 1 iff A(Z) >= A(1-Z) for the chosen aggregate."""
    arr = np.asarray(z, dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput("empty committee")
    if aggregator == "product":
        pos, neg = float(np.prod(arr)), float(np.prod(1.0 - arr))
    elif aggregator == "median":
        pos, neg = float(np.median(arr)), float(np.median(1.0 - arr))
    else:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    return 1 if pos >= neg else 0


# ---------------------------------------------------------------------------
# Score matrices and threshold tables (with CSV round-trips).
# ---------------------------------------------------------------------------


@dataclass
class ScoreMatrix:
    """Dense (image, predictor, attribute) score cube with visibilities.

    ``scores[n, i, a]`` is NaN when predictor i does not predict attribute
    a; ``visibility[n, i]`` is 0/1 with FULL and GP always 1.
    """

    image_names: list[str]
    attribute_names: list[str]
    scores: np.ndarray      # (n_images, 16, K), NaN outside masks
    visibility: np.ndarray  # (n_images, 16), {0,1}

    def __post_init__(self):
        n, p, k = self.scores.shape
        if p != 16 or n != len(self.image_names) or k != len(self.attribute_names):
            raise ShapeMismatch(f"score cube {self.scores.shape} inconsistent")
        if self.visibility.shape != (n, 16):
            raise ShapeMismatch(f"visibility {self.visibility.shape} != ({n}, 16)")
        if not (np.all(self.visibility[:, SegmentId.FULL.value] == 1)
                and np.all(self.visibility[:, SegmentId.GP.value] == 1)):
            raise ValueError("FULL and GP visibility must be 1")

    def mask_table(self) -> np.ndarray:
        """(16, K) bool: which attributes each predictor scored."""
        return ~np.isnan(self.scores).all(axis=0)


@dataclass
class ThresholdTable:
    """Calibrated t_{a,i} and the validation accuracy that chose it."""

    attribute_names: list[str]
    thresholds: np.ndarray  # (16, K), NaN outside masks
    accuracies: np.ndarray  # (16, K), NaN outside masks

    def __post_init__(self):
        k = len(self.attribute_names)
        if self.thresholds.shape != (16, k) or self.accuracies.shape != (16, k):
            raise ShapeMismatch("threshold table shape mismatch")


def calibrate_thresholds(matrix: ScoreMatrix, labels: np.ndarray) -> ThresholdTable:
    """Per-(predictor, attribute) optimal thresholds from validation scores."""
    n, _, k = matrix.scores.shape
    if labels.shape != (n, k):
        raise ShapeMismatch(f"labels {labels.shape} != ({n}, {k})")
    if n == 0:
        raise EmptyInput("empty validation set")
    thresholds = np.full((16, k), np.nan)
    accuracies = np.full((16, k), np.nan)
    for i in range(16):
        rows = matrix.visibility[:, i] == 1
        if not rows.any():
            continue
        for a in range(k):
            col = matrix.scores[rows, i, a]
            if np.isnan(col).all():
                continue
            t, acc = search_optimal_threshold(col, labels[rows, a])
            thresholds[i, a] = t
            accuracies[i, a] = acc
    return ThresholdTable(list(matrix.attribute_names), thresholds, accuracies)


def save_score_matrix(matrix: ScoreMatrix, scores_path: str,
                      visibility_path: str) -> None:
    with open(scores_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "predictor", "attribute", "score"])
        for n, name in enumerate(matrix.image_names):
            for i, pred in enumerate(PREDICTORS):
                row = matrix.scores[n, i]
                for a, attr in enumerate(matrix.attribute_names):
                    if not np.isnan(row[a]):
                        writer.writerow([name, pred.name, attr,
                                         format(row[a], ".10g")])
    with open(visibility_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "predictor", "visible"])
        for n, name in enumerate(matrix.image_names):
            for i, pred in enumerate(PREDICTORS):
                writer.writerow([name, pred.name, int(matrix.visibility[n, i])])


def load_score_matrix(scores_path: str, visibility_path: str) -> ScoreMatrix:
    by_name = {p.name: p.value for p in PREDICTORS}
    images: list[str] = []
    image_index: dict[str, int] = {}
    attrs: list[str] = []
    attr_index: dict[str, int] = {}
    entries: list[tuple[int, int, int, float]] = []
    with open(scores_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image", "predictor", "attribute", "score"]:
            raise MalformedRow(scores_path, 1, f"bad header {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise MalformedRow(scores_path, line_no, f"expected 4 fields, got {len(row)}")
            name, pred, attr, score = row
            if pred not in by_name:
                raise MalformedRow(scores_path, line_no, f"unknown predictor {pred!r}")
            if name not in image_index:
                image_index[name] = len(images)
                images.append(name)
            if attr not in attr_index:
                attr_index[attr] = len(attrs)
                attrs.append(attr)
            entries.append((image_index[name], by_name[pred],
                            attr_index[attr], float(score)))
    scores = np.full((len(images), 16, len(attrs)), np.nan)
    for n, i, a, v in entries:
        scores[n, i, a] = v

    visibility = np.zeros((len(images), 16), dtype=np.int64)
    with open(visibility_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image", "predictor", "visible"]:
            raise MalformedRow(visibility_path, 1, f"bad header {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise MalformedRow(visibility_path, line_no, f"expected 3 fields, got {len(row)}")
            name, pred, vis = row
            if name not in image_index or pred not in by_name:
                raise MalformedRow(visibility_path, line_no, f"unknown image/predictor {row}")
            visibility[image_index[name], by_name[pred]] = int(vis)
    return ScoreMatrix(images, attrs, scores, visibility)


def save_threshold_table(table: ThresholdTable, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute", "predictor", "threshold", "accuracy"])
        for a, attr in enumerate(table.attribute_names):
            for i, pred in enumerate(PREDICTORS):
                if not np.isnan(table.thresholds[i, a]):
                    writer.writerow([
                        attr, pred.name,
                        format(table.thresholds[i, a], ".10g"),
                        format(table.accuracies[i, a], ".10g"),
                    ])


def load_threshold_table(path: str) -> ThresholdTable:
    by_name = {p.name: p.value for p in PREDICTORS}
    attrs: list[str] = []
    attr_index: dict[str, int] = {}
    entries: list[tuple[int, int, float, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["attribute", "predictor", "threshold", "accuracy"]:
            raise MalformedRow(path, 1, f"bad header {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise MalformedRow(path, line_no, f"expected 4 fields, got {len(row)}")
            attr, pred, t, acc = row
            if pred not in by_name:
                raise MalformedRow(path, line_no, f"unknown predictor {pred!r}")
            if attr not in attr_index:
                attr_index[attr] = len(attrs)
                attrs.append(attr)
            entries.append((by_name[pred], attr_index[attr], float(t), float(acc)))
    thresholds = np.full((16, len(attrs)), np.nan)
    accuracies = np.full((16, len(attrs)), np.nan)
    for i, a, t, acc in entries:
        thresholds[i, a] = t
        accuracies[i, a] = acc
    return ThresholdTable(attrs, thresholds, accuracies)
