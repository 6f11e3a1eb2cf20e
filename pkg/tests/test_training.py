"""Tests for two-stage training: score collection, ranking, pruning, epochs."""

import numpy as np
import pytest

from faceparts.data import (SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL,
                            compute_priors, load_dataset_dir)
from faceparts.errors import (ConfigError, EmptyInput, EmptyValidationSet,
                              MalformedRow, NumericalDivergence)
from faceparts.fusion import ScoreMatrix, search_optimal_threshold
from faceparts.model import FULL_IDX, GP_IDX, AttributeMask, SplitFaceModel
from faceparts.nn.adam import AdamState
from faceparts.synthetic import ATTRIBUTE_NAMES, generate_dataset
from faceparts.training import (LogRecord, RankingTable, TrainConfig,
                                apply_pruning, collect_scores,
                                load_ranking_csv, load_train_log, prune_masks,
                                rank_predictors, train_stage1, train_stage2,
                                train_two_stage, write_ranking_csv,
                                write_train_log)

K = len(ATTRIBUTE_NAMES)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_dataset(root, 12, 6, 4, seed=0)
    return load_dataset_dir(root, image_size=(201, 201))


@pytest.fixture(scope="module")
def dataset_train_only(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_train_only")
    generate_dataset(root, 6, 0, 0, seed=1)
    return load_dataset_dir(root, image_size=(201, 201))


def tiny_model(seed=3, masks=None):
    return SplitFaceModel(num_attributes=K, width_scale=1 / 32, seed=seed,
                          masks=masks)


def quick_cfg(**overrides):
    base = dict(stage1_epochs=1, stage2_epochs=1, batch_size=6,
                learning_rate=1e-2, segment_dropout=0.0, flip_prob=0.0,
                partial_mix=0.0, seed=11)
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.keep_per_attribute >= 3
        assert cfg.batch_size >= 2

    @pytest.mark.parametrize("overrides", [
        {"keep_per_attribute": 2},
        {"batch_size": 1},
        {"stage1_epochs": -1},
        {"stage2_epochs": -1},
        {"learning_rate": 0.0},
        {"flip_prob": 1.5},
        {"partial_mix": -0.1},
        {"segment_dropout": 2.0},
        {"tau": 0.0},
    ])
    def test_invalid_fields_rejected(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides)


class TestCollectScores:
    def test_shapes_and_ranges(self, dataset):
        model = tiny_model()
        matrix, labels = collect_scores(model, dataset, SPLIT_VAL, batch_size=4)
        assert matrix.scores.shape == (6, 16, K)
        assert labels.shape == (6, K)
        # Full masks: every score defined and inside the unit interval.
        assert not np.isnan(matrix.scores).any()
        assert matrix.scores.min() >= 0.0 and matrix.scores.max() <= 1.0
        assert np.all(matrix.visibility[:, FULL_IDX] == 1)
        assert np.all(matrix.visibility[:, GP_IDX] == 1)
        val_names = {dataset.annotations.image_names[i]
                     for i in dataset.annotations.split_indices(SPLIT_VAL)}
        assert set(matrix.image_names) == val_names

    def test_labels_align_with_annotations(self, dataset):
        model = tiny_model()
        matrix, labels = collect_scores(model, dataset, SPLIT_VAL, batch_size=4)
        ann = dataset.annotations
        for row, name in enumerate(matrix.image_names):
            src_row = ann.image_names.index(name)
            assert np.array_equal(labels[row], ann.labels[src_row])

    def test_masked_scores_are_nan(self, dataset):
        table = np.zeros((16, K), dtype=bool)
        table[FULL_IDX] = True
        table[GP_IDX] = True
        table[1:15, 0] = True  # segments predict only the first attribute
        model = tiny_model(masks=AttributeMask(table=table))
        matrix, _ = collect_scores(model, dataset, SPLIT_VAL, batch_size=6)
        for i in range(1, 15):
            assert not np.isnan(matrix.scores[:, i, 0]).any()
            assert np.isnan(matrix.scores[:, i, 1:]).all()
        assert not np.isnan(matrix.scores[:, FULL_IDX]).any()
        assert not np.isnan(matrix.scores[:, GP_IDX]).any()

    def test_batch_size_invariance(self, dataset):
        model = tiny_model()
        m2, l2 = collect_scores(model, dataset, SPLIT_VAL, batch_size=2)
        m6, l6 = collect_scores(model, dataset, SPLIT_VAL, batch_size=6)
        order2 = np.argsort(m2.image_names)
        order6 = np.argsort(m6.image_names)
        np.testing.assert_allclose(m2.scores[order2], m6.scores[order6],
                                   atol=1e-6)
        assert np.array_equal(l2[order2], l6[order6])

    def test_empty_split_raises(self, dataset_train_only):
        model = tiny_model()
        with pytest.raises(EmptyValidationSet):
            collect_scores(model, dataset_train_only, SPLIT_TEST)


def make_matrix(scores, visibility=None):
    n, _, k = scores.shape
    if visibility is None:
        visibility = np.ones((n, 16), dtype=np.int64)
    names = [f"img{i:03d}.ppm" for i in range(n)]
    attrs = [f"attr_{a}" for a in range(k)]
    return ScoreMatrix(image_names=names, attribute_names=attrs,
                       scores=scores, visibility=visibility)


class TestRankPredictors:
    def crafted(self):
        # [DERIVED] accuracies verified with a brute-force threshold scan:
        # predictors 0 and 2 separate perfectly (1.0), predictor 5 misses two
        # of eight rows (0.75), every other predictor is constant 0.5 on
        # balanced labels (0.5).
        y = np.array([0, 1, 0, 1, 0, 1, 0, 1])
        scores = np.full((8, 16, 1), 0.5)
        scores[:, 0, 0] = 0.05 + 0.9 * y
        scores[:, 2, 0] = 0.2 + 0.6 * y
        s5 = np.where(y == 1, 0.9, 0.1).astype(float)
        s5[0], s5[1] = 0.9, 0.1
        scores[:, 5, 0] = s5
        return scores, y.reshape(-1, 1)

    def test_ordering_and_tie_break(self):
        scores, labels = self.crafted()
        ranking = rank_predictors(make_matrix(scores), labels)
        assert ranking.accuracies[0, 0] == 1.0
        assert ranking.accuracies[0, 2] == 1.0
        assert ranking.accuracies[0, 5] == 0.75
        assert ranking.accuracies[0, 1] == 0.5
        # Ties favor the lower predictor index: 0 before 2, then the rest
        # in index order.
        expected = [0, 2, 5, 1, 3, 4, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]
        assert ranking.order[0].tolist() == expected

    def test_order_rows_are_permutations(self):
        scores, labels = self.crafted()
        ranking = rank_predictors(make_matrix(scores), labels)
        for row in ranking.order:
            assert sorted(row.tolist()) == list(range(16))

    def test_invisible_rows_excluded_from_accuracy(self):
        # Predictor 7 is perfect on its four visible rows and inverted on
        # the four invisible ones; filtering must yield accuracy 1.0.
        y = np.array([0, 1, 0, 1, 0, 1, 0, 1])
        scores = np.full((8, 16, 1), 0.5)
        s7 = np.where(y == 1, 0.9, 0.1).astype(float)
        s7[4:] = 1.0 - s7[4:]
        scores[:, 7, 0] = s7
        visibility = np.ones((8, 16), dtype=np.int64)
        visibility[4:, 7] = 0
        ranking = rank_predictors(make_matrix(scores, visibility),
                                  y.reshape(-1, 1))
        assert ranking.accuracies[0, 7] == 1.0
        assert ranking.order[0, 0] == 7

    def test_masked_predictor_ranks_last(self):
        scores, labels = self.crafted()
        scores[:, 3, 0] = np.nan
        ranking = rank_predictors(make_matrix(scores), labels)
        assert np.isnan(ranking.accuracies[0, 3])
        assert ranking.order[0, -1] == 3

    def test_accuracy_matches_threshold_search(self):
        # [DERIVED] oracle: the published per-(predictor, attribute)
        # optimal-threshold search on the same columns.
        rng = np.random.default_rng(5)
        scores = rng.random((10, 16, 2))
        labels = rng.integers(0, 2, size=(10, 2))
        ranking = rank_predictors(make_matrix(scores), labels)
        for i in range(16):
            for a in range(2):
                _, acc = search_optimal_threshold(scores[:, i, a], labels[:, a])
                assert ranking.accuracies[a, i] == acc

    def test_empty_set_raises(self):
        matrix = make_matrix(np.empty((0, 16, 1)))
        with pytest.raises(EmptyValidationSet):
            rank_predictors(matrix, np.empty((0, 1), dtype=np.int64))

    def test_csv_round_trip(self, tmp_path):
        scores, labels = self.crafted()
        scores[:, 3, 0] = np.nan  # one masked predictor -> NaN accuracy
        ranking = rank_predictors(make_matrix(scores), labels)
        path = tmp_path / "ranking.csv"
        write_ranking_csv(path, ranking)
        loaded = load_ranking_csv(path)
        assert loaded.attribute_names == ranking.attribute_names
        assert np.array_equal(loaded.order, ranking.order)
        np.testing.assert_allclose(loaded.accuracies, ranking.accuracies,
                                   equal_nan=True)

    def test_csv_rejects_bad_header(self, tmp_path):
        path = tmp_path / "ranking.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(MalformedRow):
            load_ranking_csv(path)


def make_ranking(orders):
    k = len(orders)
    return RankingTable(attribute_names=tuple(f"attr_{a}" for a in range(k)),
                        order=np.asarray(orders, dtype=np.int64),
                        accuracies=np.zeros((k, 16)))


class TestPruneMasks:
    def setup_method(self):
        base = [5, 2, 9, 14, 1, 7, 3, 4, 6, 8, 10, 11, 12, 13, 0, 15]
        rolled = [base[3:] + base[:3]]
        self.ranking = make_ranking([base, rolled[0]])

    def test_keep_all_is_full_mask(self):
        masks = prune_masks(self.ranking, 16)
        assert masks.table.all()

    def test_minimum_keeps_top_segment(self):
        masks = prune_masks(self.ranking, 3)
        assert masks.table[:, 0].sum() == 3
        assert masks.table[FULL_IDX].all() and masks.table[GP_IDX].all()
        assert masks.table[5, 0]       # best-ranked segment for attribute 0
        assert masks.table[14, 1]      # best-ranked segment for attribute 1

    def test_full_and_gp_positions_in_order_are_skipped(self):
        ranking = make_ranking(
            [[0, 15, 7, 5, 2, 9, 14, 1, 3, 4, 6, 8, 10, 11, 12, 13]])
        masks = prune_masks(ranking, 3)
        assert masks.table[7, 0]
        assert masks.table[:, 0].sum() == 3

    @pytest.mark.parametrize("keep", [3, 5, 7, 12, 16, 25])
    def test_exact_budget_per_attribute(self, keep):
        masks = prune_masks(self.ranking, keep)
        expected = min(keep, 16)
        assert (masks.table.sum(axis=0) == expected).all()

    def test_too_small_budget_rejected(self):
        with pytest.raises(ConfigError):
            prune_masks(self.ranking, 2)


class TestApplyPruning:
    def pruned_masks(self):
        table = np.zeros((16, K), dtype=bool)
        table[FULL_IDX] = True
        table[GP_IDX] = True
        table[1:15, 0] = True
        table[1:15, 2] = True
        return AttributeMask(table=table)

    def test_moments_sliced_like_head_columns(self):
        model = tiny_model()
        rng = np.random.default_rng(9)
        opt = AdamState()
        for name, p in model.named_params().items():
            opt.m[name] = rng.normal(size=p.shape)
            opt.v[name] = np.abs(rng.normal(size=p.shape))
        before_m = {k: v.copy() for k, v in opt.m.items()}
        before_v = {k: v.copy() for k, v in opt.v.items()}
        apply_pruning(model, opt, self.pruned_masks())
        for i in range(1, 15):
            w = f"seg{i:02d}.head.weight"
            b = f"seg{i:02d}.head.bias"
            assert np.array_equal(opt.m[w], before_m[w][:, [0, 2]])
            assert np.array_equal(opt.v[w], before_v[w][:, [0, 2]])
            assert np.array_equal(opt.m[b], before_m[b][[0, 2]])
            assert np.array_equal(opt.v[b], before_v[b][[0, 2]])
        assert np.array_equal(opt.m["full.head.weight"],
                              before_m["full.head.weight"])
        assert np.array_equal(opt.v["gp.head.weight"],
                              before_v["gp.head.weight"])

    def test_missing_moments_tolerated(self):
        model = tiny_model()
        apply_pruning(model, AdamState(), self.pruned_masks())
        assert model.masks.table[1:15, 1].sum() == 0

    def test_surviving_scores_bit_identical(self, dataset):
        # Head rebuilds copy surviving columns verbatim, so eval scores for
        # kept (predictor, attribute) pairs must not move at all.
        model = tiny_model()
        before, labels = collect_scores(model, dataset, SPLIT_VAL, batch_size=6)
        ranking = rank_predictors(before, labels)
        masks = prune_masks(ranking, 4)
        apply_pruning(model, None, masks)
        after, _ = collect_scores(model, dataset, SPLIT_VAL, batch_size=6)
        assert after.image_names == before.image_names
        kept = masks.table.T  # (K, 16) -> transpose of mask layout
        for i in range(16):
            for a in range(K):
                if masks.table[i, a]:
                    assert np.array_equal(after.scores[:, i, a],
                                          before.scores[:, i, a])
                else:
                    assert np.isnan(after.scores[:, i, a]).all()


class TestStages:
    def test_loss_decreases(self, dataset):
        model = tiny_model()
        _, history = train_stage1(model, dataset, quick_cfg(stage1_epochs=2))
        train_records = [r for r in history if r.split == "train"]
        assert len(train_records) == 2
        assert train_records[-1].loss < train_records[0].loss
        assert all(np.isfinite(r.loss) for r in history)

    def test_history_bitwise_reproducible(self, dataset):
        cfg = quick_cfg(stage1_epochs=2, learning_rate=1e-3, flip_prob=0.5,
                        partial_mix=0.3, segment_dropout=0.3)
        runs = []
        for _ in range(2):
            model = tiny_model(seed=3)
            _, history = train_stage1(model, dataset, cfg)
            runs.append(history)
        assert runs[0] == runs[1]

    def test_records_cover_both_splits(self, dataset):
        model = tiny_model()
        _, history = train_stage1(model, dataset, quick_cfg())
        assert [(r.epoch, r.split) for r in history] == [(1, "train"), (1, "val")]

    def test_priors_set_from_train_split(self, dataset):
        model = tiny_model()
        _, history = train_stage1(model, dataset, quick_cfg(stage1_epochs=0))
        assert history == []
        expected = compute_priors(dataset.annotations, split=SPLIT_TRAIN)
        assert np.array_equal(model.priors, expected)

    def test_stage1_rejects_pruned_masks(self, dataset):
        table = np.zeros((16, K), dtype=bool)
        table[FULL_IDX] = True
        table[GP_IDX] = True
        model = tiny_model(masks=AttributeMask(table=table))
        with pytest.raises(ConfigError):
            train_stage1(model, dataset, quick_cfg())

    def test_empty_train_split_raises(self, tmp_path):
        generate_dataset(tmp_path, 0, 2, 1, seed=0)
        source = load_dataset_dir(tmp_path, image_size=(201, 201))
        with pytest.raises(EmptyInput):
            train_stage1(tiny_model(), source, quick_cfg())

    def test_missing_val_split_trains_without_val_records(
            self, dataset_train_only):
        model = tiny_model()
        _, history = train_stage1(model, dataset_train_only,
                                  quick_cfg(batch_size=3))
        assert [r.split for r in history] == ["train"]

    def test_divergence_restores_last_good_state(self, dataset):
        model = tiny_model(seed=3)
        cfg = quick_cfg(stage1_epochs=3, learning_rate=1e25)
        with np.errstate(all="ignore"):
            with pytest.raises(NumericalDivergence) as excinfo:
                train_stage1(model, dataset, cfg)
        assert "tensors" in excinfo.value.last_good_state
        # The divergence hit in epoch 1, so the restored state is the
        # freshly initialized network.
        fresh = tiny_model(seed=3)
        for name, tensor in fresh.all_tensors().items():
            assert np.array_equal(model.all_tensors()[name], tensor), name

    def test_stage2_epoch_numbering_continues(self, dataset):
        model = tiny_model()
        model.priors = compute_priors(dataset.annotations, split=SPLIT_TRAIN)
        cfg = quick_cfg(stage1_epochs=2, stage2_epochs=1)
        _, history = train_stage2(model, dataset, cfg)
        assert [r.epoch for r in history if r.split == "train"] == [3]


class TestTwoStage:
    def test_structure_and_budget(self, dataset):
        model = tiny_model()
        cfg = quick_cfg(keep_per_attribute=3)
        result = train_two_stage(model, dataset, cfg)
        assert [(r.epoch, r.split) for r in result.history] == [
            (1, "train"), (1, "val"), (2, "train"), (2, "val")]
        assert (model.masks.table.sum(axis=0) == 3).all()
        expected = prune_masks(result.ranking, 3)
        assert np.array_equal(model.masks.table, expected.table)
        assert result.ranking.attribute_names == tuple(ATTRIBUTE_NAMES)
        # Two batches per epoch, one epoch per stage, one shared optimizer.
        assert result.optimizer.step == 4
        assert all(np.isfinite(r.loss) for r in result.history)

    def test_missing_val_split_fails_ranking(self, dataset_train_only):
        cfg = quick_cfg(stage1_epochs=0, stage2_epochs=0)
        with pytest.raises(EmptyValidationSet):
            train_two_stage(tiny_model(), dataset_train_only, cfg)


class TestTrainLogIO:
    def test_round_trip(self, tmp_path):
        history = [LogRecord(1, "train", 32.794326, 0.522569),
                   LogRecord(1, "val", 33.231875, 0.517361),
                   LogRecord(2, "train", 31.438951, 0.549479)]
        path = tmp_path / "train.log"
        write_train_log(path, history)
        loaded = load_train_log(path)
        assert len(loaded) == len(history)
        for got, want in zip(loaded, history):
            assert got.epoch == want.epoch
            assert got.split == want.split
            assert abs(got.loss - want.loss) < 5e-7
            assert abs(got.accuracy - want.accuracy) < 5e-7

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "train.log"
        path.write_text("1\ttrain\t0.5\n")
        with pytest.raises(MalformedRow) as excinfo:
            load_train_log(path)
        assert excinfo.value.line_no == 1

    def test_non_numeric_rejected(self, tmp_path):
        path = tmp_path / "train.log"
        path.write_text("1\ttrain\tabc\t0.5\n")
        with pytest.raises(MalformedRow):
            load_train_log(path)
