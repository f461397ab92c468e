import math
from dataclasses import replace

import numpy as np
import pytest

from altune.acquisition import AcquisitionSpec
from altune.dataset import (
    Dataset,
    Sample,
    SplitSpec,
    SynthConfig,
    kfold_split,
    make_pool,
    synth_pool,
    zscore_normalize,
)
from altune.engine import (
    ALConfig,
    ClassifierModel,
    ConfigError,
    PipelineConfig,
    ablation_grid,
    evaluate,
    fine_tune,
    format_runlog_csv,
    kfold_experiment,
    metrics_from_confusion,
    prepare_fold,
    run_al,
    run_pipeline,
)
from altune.tapt import EncoderModel, TaptConfig


class _FixedModel:
    """Deterministic stand-in: predicts a pre-planned class for each sample."""

    def __init__(self, plan: dict, class_count: int):
        self.plan = plan
        self.class_count = class_count
        self.order = []

    def predict_proba_batch(self, x):
        out = np.zeros((x.shape[0], self.class_count))
        for row, cls in enumerate(self.order):
            out[row, cls] = 1.0
        return out


def planned_test_set(spec):
    """spec: list of (true_class, predicted_class, count). Returns (model, dataset)."""
    samples, predictions = [], []
    i = 0
    class_count = max(max(t for t, _, _ in spec), max(p for _, p, _ in spec)) + 1
    for true_cls, pred_cls, count in spec:
        for _ in range(count):
            samples.append(Sample(f"t{i:04d}", np.array([float(i)]), true_cls))
            predictions.append(pred_cls)
            i += 1
    model = _FixedModel({}, class_count)
    model.order = predictions
    return model, Dataset(samples, class_count=class_count)


class TestEvaluate:
    def test_perfect_predictions(self):
        model, test = planned_test_set([(0, 0, 5), (1, 1, 5), (2, 2, 5)])
        m = evaluate(model, test)
        assert m.ua == 1.0 and m.wa == 1.0

    def test_hand_specified_confusion(self):
        # A:10 (8 correct), B:10 (6), C:20 (10), D:60 (54)
        model, test = planned_test_set(
            [
                (0, 0, 8), (0, 1, 2),
                (1, 1, 6), (1, 2, 4),
                (2, 2, 10), (2, 3, 10),
                (3, 3, 54), (3, 0, 6),
            ]
        )
        m = evaluate(model, test)
        assert m.wa == 0.78
        assert m.ua == 0.70
        assert m.confusion.sum() == 100
        assert np.trace(m.confusion) == 78

    def test_balanced_classes_ua_equals_wa(self):
        model, test = planned_test_set(
            [(0, 0, 7), (0, 1, 3), (1, 1, 9), (1, 0, 1), (2, 2, 4), (2, 0, 6)]
        )
        m = evaluate(model, test)
        assert abs(m.ua - m.wa) < 1e-12

    def test_absent_class_excluded_from_ua(self):
        # class 2 never appears in the test set
        model, test = planned_test_set([(0, 0, 4), (1, 2, 4)])
        m = evaluate(model, test)
        assert m.ua == pytest.approx(0.5)

    def test_unlabeled_test_sample_rejected(self):
        data = Dataset([Sample("a", np.array([1.0]), None)], class_count=2)
        model = _FixedModel({}, 2)
        model.order = [0]
        with pytest.raises(ValueError, match="unlabeled"):
            evaluate(model, data)

    def test_metrics_bounds(self):
        m = metrics_from_confusion(np.array([[3, 1], [2, 2]]))
        assert 0.0 <= m.ua <= 1.0 and 0.0 <= m.wa <= 1.0


def toy_classifier(class_count=2, feature_dim=8, seed=0):
    cfg = TaptConfig(frames=4, code_dim=6, codebook_size=8, hidden=12)
    encoder = EncoderModel.create(feature_dim, cfg, seed=seed)
    return ClassifierModel.create(encoder, class_count, np.random.default_rng(seed))


def separable_data(n_per=20, feature_dim=8, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_per):
        samples.append(Sample(f"a{i:03d}", rng.standard_normal(feature_dim) + 4.0, 0))
        samples.append(Sample(f"b{i:03d}", rng.standard_normal(feature_dim) - 4.0, 1))
    return Dataset(samples, class_count=2)


class TestFineTune:
    def test_separable_data_reaches_full_training_accuracy(self):
        train = separable_data(seed=1)
        val = separable_data(n_per=5, seed=2)
        model = toy_classifier(seed=1)
        cfg = ALConfig(lr=1e-2, epochs=20, patience=20, seed=1)
        fine_tune(model, train, val, cfg, np.random.default_rng(1))
        m = evaluate(model, train)
        assert m.wa == 1.0

    def test_patience_zero_stops_at_first_non_improvement(self):
        train = separable_data(seed=3)
        val = separable_data(n_per=5, seed=4)
        model = toy_classifier(seed=3)
        cfg = ALConfig(lr=0.5, epochs=20, patience=0, seed=3)  # high lr to force a wobble
        result = fine_tune(model, train, val, cfg, np.random.default_rng(3))
        trace = result.val_trace
        first_bad = None
        best = math.inf
        for i, v in enumerate(trace):
            if v < best:
                best = v
            else:
                first_bad = i
                break
        if first_bad is not None:
            assert len(trace) == first_bad + 1
        else:
            assert len(trace) == cfg.epochs

    def test_restores_parameters_of_best_validation_epoch(self):
        train = separable_data(seed=5)
        val = separable_data(n_per=6, seed=6)
        model = toy_classifier(seed=5)
        cfg = ALConfig(lr=5e-2, epochs=12, patience=12, seed=5)
        result = fine_tune(model, train, val, cfg, np.random.default_rng(5))
        from altune.numerics import cross_entropy, one_hot

        probs = model.predict_proba_batch(val.feature_matrix())
        val_loss = cross_entropy(probs, one_hot(val.labels(), 2))
        assert val_loss == pytest.approx(min(result.val_trace), abs=1e-12)
        assert result.val_trace[result.best_epoch] == min(result.val_trace)


def standard_pool(n_per=250, seed=0):
    data, _ = synth_pool(
        SynthConfig(classes=4, dim=32, per_class=n_per, separation=2.5, noise_rate=0.1, seed=seed)
    )
    return data


def quick_al_config(**kw):
    base = dict(epochs=3, patience=3, lr=3e-3, seed=0)
    base.update(kw)
    return ALConfig(**base)


def quick_tapt_config(**kw):
    base = dict(epochs=2, seed=0)
    base.update(kw)
    return TaptConfig(**base)


class TestRunAL:
    def prepared(self, n_per=250, seed=0):
        data = standard_pool(n_per=n_per, seed=seed)
        return prepare_fold(data, SplitSpec(5, 0, 0.10, seed))

    def test_budget_equal_to_init_fraction_degenerates(self):
        pool, oracle, val, test = self.prepared()
        cfg = quick_al_config(init_fraction=0.01, budget=0.01, k=50)
        log = run_al(pool, oracle, val, test, cfg)
        assert len(log.rows) == 1
        assert log.rows[0].iteration == 0
        assert oracle.reveal_count == log.rows[0].labeled_count

    def test_algorithm_trace_on_thousand_sample_pool(self):
        from altune.dataset import apply_normalization

        pool_data = standard_pool(n_per=250, seed=2)  # N = 1000 exactly
        held_out = standard_pool(n_per=40, seed=22)   # disjoint val/test source
        _, val, test = kfold_split(held_out, SplitSpec(2, 0, 0.25, 22))
        pool, oracle = make_pool(pool_data)
        pool, stats = zscore_normalize(pool)
        val = apply_normalization(val, stats)
        test = apply_normalization(test, stats)
        cfg = quick_al_config(init_fraction=0.01, k=50, budget=0.20, epochs=2)
        log = run_al(pool, oracle, val, test, cfg)
        n = len(pool)
        assert n == 1000
        # init row + ceil((200 - 10) / 50) = 4 acquisition rounds
        assert [r.iteration for r in log.rows] == [0, 1, 2, 3, 4]
        assert [r.labeled_count for r in log.rows] == [10, 60, 110, 160, 200]
        assert log.rows[-1].labeled_count - log.rows[-2].labeled_count == 40
        assert oracle.reveal_count == 200
        counts = [r.labeled_count for r in log.rows]
        assert all(a < b for a, b in zip(counts, counts[1:]))
        fractions = [r.labeled_fraction for r in log.rows]
        assert fractions[-1] == pytest.approx(0.20)
        elapsed = [r.elapsed_ms for r in log.rows]
        assert all(a < b for a, b in zip(elapsed, elapsed[1:]))

    def test_identical_seeds_identical_runlogs(self):
        logs = []
        for _ in range(2):
            pool, oracle, val, test = self.prepared(n_per=60, seed=7)
            cfg = quick_al_config(seed=7, budget=0.1, k=10, epochs=2)
            logs.append(run_al(pool, oracle, val, test, cfg))
        assert format_runlog_csv([logs[0]]) == format_runlog_csv([logs[1]])

    def test_budget_below_init_fraction_rejected_before_training(self):
        pool, oracle, val, test = self.prepared(n_per=60)
        cfg = quick_al_config(init_fraction=0.05, budget=0.01)
        with pytest.raises(ConfigError, match="budget"):
            run_al(pool, oracle, val, test, cfg)
        assert oracle.reveal_count == 0

    def test_labeled_pool_rejected(self):
        data = standard_pool(n_per=30)
        _, oracle, val, test = self.prepared(n_per=30)
        with pytest.raises(ValueError, match="unlabeled"):
            run_al(data, oracle, val, test, quick_al_config())

    def test_random_and_bald_strategies_run(self):
        for kind in ("random", "bald", "least_confidence", "margin"):
            pool, oracle, val, test = self.prepared(n_per=25, seed=4)
            cfg = quick_al_config(
                seed=4,
                budget=0.08,
                k=4,
                epochs=1,
                acquisition=AcquisitionSpec(kind=kind, committee_size=3),
            )
            log = run_al(pool, oracle, val, test, cfg)
            assert oracle.reveal_count == log.final.labeled_count


class TestGrid:
    def test_single_budget_single_seed_gives_four_runs(self):
        data = standard_pool(n_per=40, seed=1)
        grid = ablation_grid(
            data,
            budgets=[0.1],
            seeds=[3],
            base_al=quick_al_config(epochs=1, k=8),
            base_tapt=quick_tapt_config(epochs=1),
        )
        assert len(grid.runs) == 4
        assert len(grid.summary) == 4
        cells = {key[:2] for key, _ in grid.runs}
        assert cells == {
            ("random", "ft"), ("random", "tapt_ft"),
            ("entropy", "ft"), ("entropy", "tapt_ft"),
        }

    def test_grid_cell_matches_standalone_pipeline(self):
        data = standard_pool(n_per=40, seed=5)
        base_al = quick_al_config(epochs=1, k=8)
        base_tapt = quick_tapt_config(epochs=1)
        grid = ablation_grid(
            data, budgets=[0.1], seeds=[9], base_al=base_al, base_tapt=base_tapt
        )
        cell_log = next(
            log for key, log in grid.runs if key[:3] == ("entropy", "tapt_ft", 0.1)
        )
        pcfg = PipelineConfig(
            al=replace(base_al, seed=9, budget=0.1,
                       acquisition=replace(base_al.acquisition, kind="entropy")),
            tapt=replace(base_tapt, seed=9),
            use_tapt=True,
            split=SplitSpec(5, 0, 0.10, seed=9),
            run_id=cell_log.run_id,
        )
        standalone = run_pipeline(data, pcfg)
        assert format_runlog_csv([standalone.runlog]) == format_runlog_csv([cell_log])

    def test_row_count_scales_with_budgets_and_seeds(self):
        data = standard_pool(n_per=30, seed=6)
        grid = ablation_grid(
            data,
            budgets=[0.05, 0.1],
            seeds=[1, 2],
            base_al=quick_al_config(epochs=1, k=5, init_fraction=0.02),
            base_tapt=quick_tapt_config(epochs=1),
        )
        assert len(grid.runs) == 4 * 2 * 2
        assert len(grid.summary) == 4 * 2
        for row in grid.summary:
            assert row["n_seeds"] == 2

    def test_summary_means_match_runs(self):
        data = standard_pool(n_per=30, seed=8)
        grid = ablation_grid(
            data,
            budgets=[0.1],
            seeds=[1, 2, 3],
            base_al=quick_al_config(epochs=1, k=5),
            base_tapt=quick_tapt_config(epochs=1),
        )
        for row in grid.summary:
            finals = [
                log.final.ua
                for key, log in grid.runs
                if key[:3] == (row["sampling"], row["pretrain"], row["budget"])
            ]
            assert row["mean_ua"] == pytest.approx(float(np.mean(finals)))


class TestKfold:
    def test_degenerate_symmetric_dataset_gives_identical_folds(self):
        # every sample identical: each fold sees the same problem exactly
        samples = [Sample(f"s{i:02d}", np.ones(8), 0) for i in range(40)]
        data = Dataset(samples, class_count=2)
        pcfg = PipelineConfig(
            al=quick_al_config(epochs=1, budget=0.2, k=4, init="random"),
            tapt=quick_tapt_config(epochs=0),
            use_tapt=False,
            split=SplitSpec(2, 0, 0.10, seed=1),
        )
        per_fold, mean = kfold_experiment(data, 2, pcfg)
        assert per_fold[0].ua == per_fold[1].ua
        assert per_fold[0].wa == per_fold[1].wa

    def test_mean_is_arithmetic_mean_of_folds(self):
        data = standard_pool(n_per=30, seed=9)
        pcfg = PipelineConfig(
            al=quick_al_config(epochs=1, budget=0.1, k=4),
            tapt=quick_tapt_config(epochs=0),
            use_tapt=False,
            split=SplitSpec(3, 0, 0.10, seed=2),
        )
        per_fold, mean = kfold_experiment(data, 3, pcfg)
        assert len(per_fold) == 3
        assert mean.ua == pytest.approx(float(np.mean([m.ua for m in per_fold])))
        assert mean.wa == pytest.approx(float(np.mean([m.wa for m in per_fold])))

    def test_fold_test_sets_partition_the_dataset(self):
        data = standard_pool(n_per=30, seed=10)
        spec = SplitSpec(4, 0, 0.10, seed=3)
        test_ids = []
        for fold in range(4):
            _, _, test = kfold_split(data, replace(spec, fold_index=fold))
            test_ids.extend(test.ids())
        assert sorted(test_ids) == sorted(data.ids())
