"""Two-stage trainer: full-coverage warm-up, validation ranking, head pruning.

Stage 1 trains all 16 predictor heads over every attribute.  The validation
split then ranks predictors per attribute by optimal-threshold accuracy,
the masks are pruned to the top performers (FULL and GP always kept), the
score heads are rebuilt in place from the surviving stage-1 columns, and
stage 2 fine-tunes the pruned network with the same optimizer.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .data import (SPLIT_NAMES, SPLIT_TRAIN, SPLIT_VAL, BatchConfig,
                   DataSource, compute_priors, make_batches)
from .errors import (ConfigError, EmptyInput, EmptyValidationSet,
                     MalformedRow, NumericalDivergence, ShapeMismatch)
from .fusion import ScoreMatrix, calibrate_thresholds
from .geometry import PREDICTORS
from .model import FULL_IDX, GP_IDX, NUM_PREDICTORS, AttributeMask, SplitFaceModel
from .nn.adam import AdamState, adam_step

log = logging.getLogger(__name__)

RANKING_HEADER = ["attribute", "rank", "predictor", "accuracy"]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by both training stages.

    ``keep_per_attribute`` is the number of predictors each attribute
    retains after pruning, counting FULL and GP; it must be at least 3 so
    at least one segment predictor survives.
    """

    stage1_epochs: int = 10
    stage2_epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    keep_per_attribute: int = 7
    segment_dropout: float = 0.3
    flip_prob: float = 0.5
    partial_mix: float = 0.3
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.keep_per_attribute < 3:
            raise ConfigError(
                f"keep_per_attribute must be >= 3, got {self.keep_per_attribute}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("segment_dropout", "flip_prob", "partial_mix"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")


@dataclass(frozen=True)
class LogRecord:
    """One line of the training log; epochs are 1-based across both stages."""

    epoch: int
    split: str
    loss: float
    accuracy: float


@dataclass(frozen=True)
class RankingTable:
    """Per-attribute descending-accuracy ordering of the 16 predictors.

    ``order[a]`` lists predictor indices best-first; ties favor the lower
    index.  ``accuracies[a, i]`` is the validation accuracy of predictor i
    on attribute a, NaN where i never predicted a.
    """

    attribute_names: tuple[str, ...]
    order: np.ndarray       # (K, 16) int
    accuracies: np.ndarray  # (K, 16) float

    def __post_init__(self):
        k = len(self.attribute_names)
        if self.order.shape != (k, NUM_PREDICTORS):
            raise ShapeMismatch(f"order shape {self.order.shape} != ({k}, 16)")
        if self.accuracies.shape != (k, NUM_PREDICTORS):
            raise ShapeMismatch(
                f"accuracies shape {self.accuracies.shape} != ({k}, 16)")


class _Diverged(Exception):
    def __init__(self, loss: float):
        self.loss = loss


# ---------------------------------------------------------------------------
# score collection and ranking


def collect_scores(model: SplitFaceModel, source: DataSource, split: int,
                   batch_size: int = 32,
                   tau: float = 0.5) -> tuple[ScoreMatrix, np.ndarray]:
    """Eval-mode scores for every image in a split.

    Returns the (n, 16, K) score cube (NaN outside the model's masks, with
    per-image segment visibilities) and the matching (n, K) labels.
    """
    if source.annotations.split_indices(split).size == 0:
        raise EmptyValidationSet(
            f"split {SPLIT_NAMES[split]!r} contains no images")
    cfg = BatchConfig(batch_size=batch_size, flip_prob=0.0, partial_mix=0.0,
                      seed=0, tau=tau)
    names: list[str] = []
    cubes: list[np.ndarray] = []
    vis_blocks: list[np.ndarray] = []
    label_blocks: list[np.ndarray] = []
    k = model.num_attributes
    for batch in make_batches(source.image_dir, source.annotations,
                              source.landmarks, split, cfg):
        result = model.forward_all(batch.segments, batch.faces, train=False)
        n = len(batch.names)
        cube = np.full((n, NUM_PREDICTORS, k), np.nan)
        for i in range(NUM_PREDICTORS):
            cols = model.masks.indices(i)
            if cols.size:
                cube[:, i, cols] = result.scores[i]
        vis = np.ones((n, NUM_PREDICTORS), dtype=np.int64)
        vis[:, 1:1 + batch.visibility.shape[1]] = batch.visibility.astype(np.int64)
        names.extend(batch.names)
        cubes.append(cube)
        vis_blocks.append(vis)
        label_blocks.append(np.asarray(batch.labels, dtype=np.int64))
    if not names:
        raise EmptyValidationSet(
            f"split {SPLIT_NAMES[split]!r} contains no images")
    matrix = ScoreMatrix(image_names=names,
                         attribute_names=list(source.annotations.attribute_names),
                         scores=np.concatenate(cubes),
                         visibility=np.concatenate(vis_blocks))
    return matrix, np.concatenate(label_blocks)


def rank_predictors(matrix: ScoreMatrix, labels: np.ndarray) -> RankingTable:
    """Rank predictors per attribute by optimal-threshold validation accuracy."""
    if matrix.scores.shape[0] == 0:
        raise EmptyValidationSet("cannot rank predictors on an empty set")
    table = calibrate_thresholds(matrix, np.asarray(labels, dtype=np.int64))
    acc = table.accuracies  # (16, K), NaN outside masks
    k = acc.shape[1]
    order = np.empty((k, NUM_PREDICTORS), dtype=np.int64)
    for a in range(k):
        col = np.where(np.isnan(acc[:, a]), -np.inf, acc[:, a])
        # Descending accuracy, ties broken toward the lower predictor index.
        order[a] = np.lexsort((np.arange(NUM_PREDICTORS), -col))
    return RankingTable(attribute_names=tuple(matrix.attribute_names),
                        order=order, accuracies=acc.T.copy())


def prune_masks(ranking: RankingTable, keep_per_attribute: int) -> AttributeMask:
    """Mask keeping FULL, GP, and each attribute's best remaining predictors.

    Every attribute ends up with exactly ``min(keep_per_attribute, 16)``
    predictors.
    """
    if keep_per_attribute < 3:
        raise ConfigError(
            f"keep_per_attribute must be >= 3, got {keep_per_attribute}")
    k = len(ranking.attribute_names)
    table = np.zeros((NUM_PREDICTORS, k), dtype=bool)
    table[FULL_IDX] = True
    table[GP_IDX] = True
    keep = min(keep_per_attribute - 2, NUM_PREDICTORS - 2)
    for a in range(k):
        segments = [i for i in ranking.order[a] if i not in (FULL_IDX, GP_IDX)]
        table[segments[:keep], a] = True
    return AttributeMask(table=table)


def apply_pruning(model: SplitFaceModel, optimizer: AdamState | None,
                  masks: AttributeMask) -> None:
    """Rebuild the score heads under ``masks`` and slice Adam moments to match."""
    column_map = model.rebuild_heads(masks)
    if optimizer is None:
        return
    for name, positions in column_map.items():
        for store in (optimizer.m, optimizer.v):
            if name not in store:
                continue
            old = store[name]
            store[name] = (old[:, positions].copy() if old.ndim == 2
                           else old[positions].copy())


# ---------------------------------------------------------------------------
# epoch loops


def _epoch_seed(seed: int, stage: int, epoch: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stage, 1, epoch))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _scores_accuracy(scores: list[np.ndarray], labels: np.ndarray,
                     masks: AttributeMask) -> tuple[int, int]:
    """Correct/total 0.5-threshold decisions over all masked (i, a) pairs."""
    correct = 0
    total = 0
    for i in range(NUM_PREDICTORS):
        cols = masks.indices(i)
        if cols.size == 0:
            continue
        decisions = scores[i] >= 0.5
        correct += int(np.sum(decisions == (labels[:, cols] >= 0.5)))
        total += decisions.size
    return correct, total


def _run_split(model: SplitFaceModel, source: DataSource, cfg: TrainConfig,
               split: int, optimizer: AdamState | None,
               drop_rng: np.random.Generator | None, epoch_seed: int,
               train: bool) -> tuple[float, float] | None:
    """One pass over a split; returns (mean loss, mean accuracy) or None if empty."""
    if source.annotations.split_indices(split).size == 0:
        return None
    bc = BatchConfig(batch_size=cfg.batch_size,
                     flip_prob=cfg.flip_prob if train else 0.0,
                     partial_mix=cfg.partial_mix if train else 0.0,
                     seed=epoch_seed, tau=cfg.tau)
    loss_sum = 0.0
    rows = 0
    correct = 0
    total = 0
    for batch in make_batches(source.image_dir, source.annotations,
                              source.landmarks, split, bc):
        segments = batch.segments
        if train and cfg.segment_dropout > 0.0:
            kept = model.segment_dropout_mask(drop_rng, batch.visibility,
                                              cfg.segment_dropout)
            segments = segments * kept[:, :, None, None, None].astype(segments.dtype)
        result = model.forward_all(segments, batch.faces, train=train)
        loss, grads = model.loss_and_score_grads(result, batch.labels)
        if not np.isfinite(loss):
            raise _Diverged(loss)
        if train:
            model.backward(grads)
            adam_step(model.named_params(), model.named_grads(), optimizer)
        n = len(batch.names)
        loss_sum += loss * n
        rows += n
        c, t = _scores_accuracy(result.scores, batch.labels, model.masks)
        correct += c
        total += t
    if rows == 0:
        return None
    return loss_sum / rows, (correct / total if total else float("nan"))


def _snapshot(model: SplitFaceModel, optimizer: AdamState) -> dict:
    state = {"tensors": {k: v.copy() for k, v in model.all_tensors().items()},
             "step": optimizer.step,
             "m": {k: v.copy() for k, v in optimizer.m.items()},
             "v": {k: v.copy() for k, v in optimizer.v.items()}}
    return state


def _restore(model: SplitFaceModel, optimizer: AdamState, state: dict) -> None:
    model.load_tensors(state["tensors"])
    optimizer.step = state["step"]
    optimizer.m = {k: v.copy() for k, v in state["m"].items()}
    optimizer.v = {k: v.copy() for k, v in state["v"].items()}


def _train_epochs(model: SplitFaceModel, source: DataSource, cfg: TrainConfig,
                  optimizer: AdamState, stage: int, epochs: int,
                  epoch_offset: int) -> list[LogRecord]:
    history: list[LogRecord] = []
    drop_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(stage, 2)))
    # The GP-head dropout stream is transient state: restarting it at
    # each stage boundary makes a resumed stage 2 follow the same
    # trajectory as one run in-process after stage 1.
    model.reseed_dropout(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(stage, 3)))
    snapshot = _snapshot(model, optimizer)
    for e in range(epochs):
        epoch = epoch_offset + e + 1
        try:
            stats = _run_split(model, source, cfg, SPLIT_TRAIN, optimizer,
                               drop_rng, _epoch_seed(cfg.seed, stage, e),
                               train=True)
            if stats is None:
                raise EmptyInput("training split contains no images")
            history.append(LogRecord(epoch, "train", stats[0], stats[1]))
            log.info("epoch %d train loss %.6f accuracy %.6f",
                     epoch, stats[0], stats[1])
            val = _run_split(model, source, cfg, SPLIT_VAL, None, None, 0,
                             train=False)
        except _Diverged as exc:
            _restore(model, optimizer, snapshot)
            raise NumericalDivergence(
                f"non-finite loss ({exc.loss!r}) in stage {stage} epoch "
                f"{epoch}; parameters restored to the last finite epoch",
                last_good_state=snapshot) from None
        if val is not None:
            history.append(LogRecord(epoch, "val", val[0], val[1]))
            log.info("epoch %d val loss %.6f accuracy %.6f",
                     epoch, val[0], val[1])
        snapshot = _snapshot(model, optimizer)
    return history


def train_stage1(model: SplitFaceModel, source: DataSource, cfg: TrainConfig,
                 optimizer: AdamState | None = None
                 ) -> tuple[AdamState, list[LogRecord]]:
    """Stage 1: train all 16 heads over every attribute under full masks."""
    if not model.masks.table.all():
        raise ConfigError("stage 1 requires full attribute masks")
    model.priors = compute_priors(source.annotations, split=SPLIT_TRAIN)
    if optimizer is None:
        optimizer = AdamState(lr=cfg.learning_rate)
    history = _train_epochs(model, source, cfg, optimizer, stage=1,
                            epochs=cfg.stage1_epochs, epoch_offset=0)
    return optimizer, history


def train_stage2(model: SplitFaceModel, source: DataSource, cfg: TrainConfig,
                 optimizer: AdamState | None = None,
                 epoch_offset: int | None = None
                 ) -> tuple[AdamState, list[LogRecord]]:
    """Stage 2: fine-tune after the heads have been rebuilt for pruned masks."""
    if optimizer is None:
        optimizer = AdamState(lr=cfg.learning_rate)
    offset = cfg.stage1_epochs if epoch_offset is None else epoch_offset
    history = _train_epochs(model, source, cfg, optimizer, stage=2,
                            epochs=cfg.stage2_epochs, epoch_offset=offset)
    return optimizer, history


@dataclass
class TrainResult:
    history: list[LogRecord]
    ranking: RankingTable
    optimizer: AdamState


def train_two_stage(model: SplitFaceModel, source: DataSource,
                    cfg: TrainConfig) -> TrainResult:
    """Full recipe: stage 1, validation ranking, pruning, stage 2."""
    optimizer, history = train_stage1(model, source, cfg)
    matrix, labels = collect_scores(model, source, SPLIT_VAL,
                                    batch_size=cfg.batch_size, tau=cfg.tau)
    ranking = rank_predictors(matrix, labels)
    masks = prune_masks(ranking, cfg.keep_per_attribute)
    apply_pruning(model, optimizer, masks)
    _, stage2_history = train_stage2(model, source, cfg, optimizer)
    return TrainResult(history=history + stage2_history, ranking=ranking,
                       optimizer=optimizer)


# ---------------------------------------------------------------------------
# serialization


def write_train_log(path, history: list[LogRecord]) -> None:
    """Tab-separated lines: epoch, split, loss, mean accuracy."""
    with open(path, "w") as fh:
        for rec in history:
            fh.write(f"{rec.epoch}\t{rec.split}\t{rec.loss:.6f}\t"
                     f"{rec.accuracy:.6f}\n")


def load_train_log(path) -> list[LogRecord]:
    history: list[LogRecord] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise MalformedRow(str(path), line_no,
                                   f"expected 4 fields, got {len(fields)}")
            try:
                history.append(LogRecord(int(fields[0]), fields[1],
                                         float(fields[2]), float(fields[3])))
            except ValueError as exc:
                raise MalformedRow(str(path), line_no, str(exc)) from exc
    return history


def write_ranking_csv(path, ranking: RankingTable) -> None:
    """CSV rows: attribute, 1-based rank, predictor name, validation accuracy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RANKING_HEADER)
        for a, attr in enumerate(ranking.attribute_names):
            for rank, i in enumerate(ranking.order[a], start=1):
                acc = ranking.accuracies[a, i]
                writer.writerow([attr, rank, PREDICTORS[i].name,
                                 "" if np.isnan(acc) else format(acc, ".10g")])


def load_ranking_csv(path) -> RankingTable:
    by_name = {p.name: p.value for p in PREDICTORS}
    attrs: list[str] = []
    attr_index: dict[str, int] = {}
    rows: list[tuple[int, int, int, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RANKING_HEADER:
            raise MalformedRow(str(path), 1, f"bad header {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise MalformedRow(str(path), line_no,
                                   f"expected 4 fields, got {len(row)}")
            attr, rank_s, pred, acc_s = row
            if pred not in by_name:
                raise MalformedRow(str(path), line_no,
                                   f"unknown predictor {pred!r}")
            if attr not in attr_index:
                attr_index[attr] = len(attrs)
                attrs.append(attr)
            try:
                rank = int(rank_s)
                acc = float("nan") if acc_s == "" else float(acc_s)
            except ValueError as exc:
                raise MalformedRow(str(path), line_no, str(exc)) from exc
            if not 1 <= rank <= NUM_PREDICTORS:
                raise MalformedRow(str(path), line_no, f"rank {rank} out of range")
            rows.append((attr_index[attr], rank, by_name[pred], acc))
    k = len(attrs)
    order = np.full((k, NUM_PREDICTORS), -1, dtype=np.int64)
    accuracies = np.full((k, NUM_PREDICTORS), np.nan)
    for a, rank, i, acc in rows:
        if order[a, rank - 1] != -1:
            raise MalformedRow(str(path), 1,
                               f"duplicate rank {rank} for {attrs[a]!r}")
        order[a, rank - 1] = i
        accuracies[a, i] = acc
    if (order == -1).any():
        raise MalformedRow(str(path), 1, "incomplete ranking")
    return RankingTable(attribute_names=tuple(attrs), order=order,
                        accuracies=accuracies)
