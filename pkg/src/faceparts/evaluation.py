"""Accuracy reports over predictors, fusion committees, and the prior baseline.

A report carries one row per method — the 16 predictors, the top-ranked
single predictor (HRP), the two committee aggregates (NSA-product and
NSA-median), and the constant training-majority Prior — with per-attribute
accuracies and their mean.  Single-predictor cells are computed over the
samples where that predictor was visible and are undefined (NaN) where the
pruned masks removed the pair entirely; means skip undefined cells.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SPLIT_TEST, SPLIT_TRAIN, AttributeAnnotations, compute_priors
from .errors import (ConfigError, EmptyInput, IoFailure, MalformedRow,
                     ShapeMismatch)
from .fusion import (DEFAULT_COMMITTEE_SIZE, ScoreMatrix, ThresholdTable,
                     build_Z, hrp_decide, nsa_decide)
from .geometry import PREDICTORS
from .model import NUM_PREDICTORS, AttributeMask
from .training import RankingTable

FUSION_METHODS = ("HRP", "NSA-product", "NSA-median", "Prior")
ALL_METHODS = tuple(p.name for p in PREDICTORS) + FUSION_METHODS
THRESHOLD_MODES = ("optimal", "fixed")


@dataclass(frozen=True)
class EvaluationReport:
    """Per-method, per-attribute accuracies plus their means."""

    dataset_id: str
    threshold_mode: str
    attribute_names: tuple[str, ...]
    methods: tuple[str, ...]
    accuracies: np.ndarray  # (M, K), NaN where undefined
    means: np.ndarray       # (M,)

    def __post_init__(self):
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(
                f"threshold mode {self.threshold_mode!r} not in "
                f"{THRESHOLD_MODES}")
        m, k = len(self.methods), len(self.attribute_names)
        if self.accuracies.shape != (m, k):
            raise ShapeMismatch(
                f"accuracies shape {self.accuracies.shape} != ({m}, {k})")
        if self.means.shape != (m,):
            raise ShapeMismatch(f"means shape {self.means.shape} != ({m},)")
        defined = self.accuracies[~np.isnan(self.accuracies)]
        if defined.size and (defined.min() < 0.0 or defined.max() > 1.0):
            raise ValueError("accuracies outside [0, 1]")


@dataclass(frozen=True)
class RankingGrid:
    """Rank of each (predictor, attribute) pair that survived pruning.

    ``cells[i, a]`` is the 1-based rank where assigned and NaN where
    pruned; ``counts[i]`` is the number of attributes predictor i kept.
    """

    attribute_names: tuple[str, ...]
    cells: np.ndarray   # (16, K) float
    counts: np.ndarray  # (16,) int


# ---------------------------------------------------------------------------
# accuracy primitives


def accuracy(decisions: np.ndarray, labels: np.ndarray
             ) -> tuple[np.ndarray, float]:
    """Per-attribute agreement fractions and their mean.

    Both arrays are (n, K) binary; a single column may be passed as (n,).
    """
    d = np.asarray(decisions)
    y = np.asarray(labels)
    if d.shape != y.shape:
        raise ShapeMismatch(f"decisions {d.shape} vs labels {y.shape}")
    if d.ndim == 1:
        d = d.reshape(-1, 1)
        y = y.reshape(-1, 1)
    if d.shape[0] == 0:
        raise EmptyInput("no rows to score")
    per_attribute = np.mean((d >= 0.5) == (y >= 0.5), axis=0)
    return per_attribute, float(per_attribute.mean())


def prior_baseline(annotations: AttributeAnnotations
                   ) -> tuple[np.ndarray, float]:
    """Test-split accuracy of always answering the training-majority class.

    Ties (a prior of exactly 0.5) answer positive.
    """
    priors = compute_priors(annotations, split=SPLIT_TRAIN)
    test_rows = annotations.split_indices(SPLIT_TEST)
    if test_rows.size == 0:
        raise EmptyInput("test split contains no images")
    labels = annotations.labels[test_rows]
    majority = (priors >= 0.5).astype(np.int64)
    return accuracy(np.broadcast_to(majority, labels.shape), labels)


# ---------------------------------------------------------------------------
# report construction


def _fixed_thresholds(table: ThresholdTable) -> np.ndarray:
    return np.where(np.isnan(table.thresholds), np.nan, 0.5)


def fuse_decisions(matrix: ScoreMatrix, ranking: RankingTable,
                   thresholds: np.ndarray, aggregator: str,
                   committee_size: int = DEFAULT_COMMITTEE_SIZE) -> np.ndarray:
    """Per-sample fused decisions (n, K) for one aggregator.

    ``aggregator`` is "hrp" for the single top-ranked usable predictor, or
    "product"/"median" for the normalized-score committee.  ``thresholds``
    is a (16, K) array aligned with the matrix masks.
    """
    if aggregator not in ("hrp", "product", "median"):
        raise ConfigError(f"unknown aggregator {aggregator!r}")
    n, _, k = matrix.scores.shape
    masks = matrix.mask_table()
    decisions = np.empty((n, k), dtype=np.int64)
    for s in range(n):
        vis = matrix.visibility[s]
        for a in range(k):
            usable = [int(i) for i in ranking.order[a]
                      if masks[i, a] and vis[i]
                      and not np.isnan(thresholds[i, a])]
            scores_a = matrix.scores[s, :, a]
            if aggregator == "hrp":
                decisions[s, a] = hrp_decide(usable, scores_a,
                                             thresholds[:, a])
            else:
                z = build_Z(usable, scores_a, thresholds[:, a],
                            committee_size)
                decisions[s, a] = nsa_decide(z, aggregator)
    return decisions


def evaluate_report(matrix: ScoreMatrix, labels: np.ndarray,
                    ranking: RankingTable, thresholds: ThresholdTable,
                    priors: np.ndarray, *, threshold_mode: str = "optimal",
                    committee_size: int = DEFAULT_COMMITTEE_SIZE,
                    dataset_id: str = "") -> EvaluationReport:
    """Accuracies of every method over one split's score matrix.

    ``priors`` are the training-split positive rates driving the Prior
    row; ``threshold_mode`` "fixed" replaces every calibrated threshold
    with 0.5.
    """
    if threshold_mode not in THRESHOLD_MODES:
        raise ConfigError(
            f"threshold mode {threshold_mode!r} not in {THRESHOLD_MODES}")
    n, _, k = matrix.scores.shape
    if labels.shape != (n, k):
        raise ShapeMismatch(f"labels {labels.shape} != ({n}, {k})")
    if n == 0:
        raise EmptyInput("empty evaluation split")
    t = (thresholds.thresholds if threshold_mode == "optimal"
         else _fixed_thresholds(thresholds))
    masks = matrix.mask_table()
    rows = []

    # Single-predictor rows, scored over each predictor's visible samples.
    for i in range(NUM_PREDICTORS):
        row = np.full(k, np.nan)
        visible = matrix.visibility[:, i] == 1
        if visible.any():
            for a in range(k):
                if not masks[i, a] or np.isnan(t[i, a]):
                    continue
                decisions = matrix.scores[visible, i, a] >= t[i, a]
                per_attribute, _ = accuracy(decisions.astype(np.int64),
                                            labels[visible, a])
                row[a] = per_attribute[0]
        rows.append(row)

    # Fusion rows, decided per sample over the usable committee.
    for aggregator in ("hrp", "product", "median"):
        fused = fuse_decisions(matrix, ranking, t, aggregator, committee_size)
        rows.append(accuracy(fused, labels)[0])

    majority = (np.asarray(priors) >= 0.5).astype(np.int64)
    rows.append(accuracy(np.broadcast_to(majority, labels.shape), labels)[0])

    accuracies = np.stack(rows)
    with np.errstate(invalid="ignore"):
        means = np.array([float(np.nanmean(r)) if not np.isnan(r).all()
                          else np.nan for r in accuracies])
    return EvaluationReport(dataset_id=dataset_id,
                            threshold_mode=threshold_mode,
                            attribute_names=tuple(matrix.attribute_names),
                            methods=ALL_METHODS, accuracies=accuracies,
                            means=means)


def build_ranking_table(ranking: RankingTable,
                        masks: AttributeMask) -> RankingGrid:
    """Grid of rank numbers for assigned pairs, blank where pruned."""
    k = len(ranking.attribute_names)
    if masks.num_attributes != k:
        raise ShapeMismatch("mask/ranking attribute counts differ")
    cells = np.full((NUM_PREDICTORS, k), np.nan)
    for a in range(k):
        for rank, i in enumerate(ranking.order[a], start=1):
            if masks.table[i, a]:
                cells[i, a] = rank
    counts = masks.table.sum(axis=1).astype(np.int64)
    return RankingGrid(attribute_names=ranking.attribute_names,
                       cells=cells, counts=counts)


def write_ranking_grid(path, grid: RankingGrid) -> None:
    """CSV: one predictor per row, rank per attribute, assigned count last."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["predictor", *grid.attribute_names, "count"])
            for i, pred in enumerate(PREDICTORS):
                cells = ["" if np.isnan(c) else str(int(c))
                         for c in grid.cells[i]]
                writer.writerow([pred.name, *cells, int(grid.counts[i])])
    except OSError as err:
        raise IoFailure(str(err)) from err


# ---------------------------------------------------------------------------
# report emission


def emit_report(report: EvaluationReport, format: str, path) -> Path:
    """Write a report as CSV (6-decimal, round-trips) or Markdown (percent).

    CSV rows are methods with attribute columns in canonical order then
    the mean; Markdown transposes to one row per attribute plus a final
    mean row, formatted as two-decimal percentages.
    """
    path = Path(path)
    try:
        if format == "csv":
            _emit_csv(report, path)
        elif format == "markdown":
            _emit_markdown(report, path)
        else:
            raise ConfigError(f"unknown report format {format!r}")
    except OSError as err:
        raise IoFailure(str(err)) from err
    return path


def _fmt6(value: float) -> str:
    return "" if np.isnan(value) else format(value, ".6f")


def _fmt_pct(value: float) -> str:
    return "" if np.isnan(value) else format(100.0 * value, ".2f")


def _emit_csv(report: EvaluationReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", report.dataset_id])
        writer.writerow(["threshold_mode", report.threshold_mode])
        writer.writerow(["method", *report.attribute_names, "mean"])
        for m, method in enumerate(report.methods):
            writer.writerow([method,
                             *(_fmt6(v) for v in report.accuracies[m]),
                             _fmt6(report.means[m])])


def load_report(path) -> EvaluationReport:
    """Read back a CSV report emitted by :func:`emit_report`."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if len(rows) < 3 or rows[0][:1] != ["dataset"] or \
            rows[1][:1] != ["threshold_mode"]:
        raise MalformedRow(str(path), 1, "missing report preamble")
    dataset_id = rows[0][1] if len(rows[0]) > 1 else ""
    threshold_mode = rows[1][1]
    header = rows[2]
    if header[0] != "method" or header[-1] != "mean":
        raise MalformedRow(str(path), 3, f"bad header {header}")
    attribute_names = tuple(header[1:-1])
    methods = []
    accuracies = []
    means = []
    for line_no, row in enumerate(rows[3:], start=4):
        if len(row) != len(header):
            raise MalformedRow(str(path), line_no,
                               f"expected {len(header)} fields, got {len(row)}")
        methods.append(row[0])
        try:
            accuracies.append([float(v) if v else np.nan for v in row[1:-1]])
            means.append(float(row[-1]) if row[-1] else np.nan)
        except ValueError as exc:
            raise MalformedRow(str(path), line_no, str(exc)) from exc
    return EvaluationReport(dataset_id=dataset_id,
                            threshold_mode=threshold_mode,
                            attribute_names=attribute_names,
                            methods=tuple(methods),
                            accuracies=np.asarray(accuracies, dtype=np.float64
                                                  ).reshape(len(methods),
                                                            len(attribute_names)),
                            means=np.asarray(means, dtype=np.float64))


def _emit_markdown(report: EvaluationReport, path: Path) -> None:
    headers = ["attribute", *report.methods]
    lines = [f"Dataset: {report.dataset_id}",
             f"Threshold mode: {report.threshold_mode}", ""]
    lines.append("| " + " | ".join(headers) + " |")
    lines.append("|" + "|".join(" --- " for _ in headers) + "|")
    for a, attr in enumerate(report.attribute_names):
        cells = [_fmt_pct(report.accuracies[m, a])
                 for m in range(len(report.methods))]
        lines.append("| " + " | ".join([attr, *cells]) + " |")
    mean_cells = [_fmt_pct(v) for v in report.means]
    lines.append("| " + " | ".join(["mean", *mean_cells]) + " |")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
