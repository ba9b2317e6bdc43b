import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gtn.evaluation import (CHANCE_LOSS, DIVERGENCE_CAP, WN_RANGES, FewStepReport, bootstrap_ci,
                            class_pixel_mean, curriculum_ablation, endless_data_eval, ensemble_eval,
                            few_step_accuracy, final_loss, flip_counts, label_flip_ranking,
                            probe_predictions, run_meta_training, sample_wn_configs, train_learner,
                            wn_robustness_study, wn_run)
from gtn.meta import InnerHyper, mnist_config, predict_proba
from gtn.teacher import RealDataSource, TeacherState

TINY = dict(inner_steps=2, inner_batch=8, outer_batch=16, iterations=2, eval_interval=0,
            learner_width=0.0625, generator_width=0.03)


def small_teacher(variant="no-curriculum", batch_size=16):
    return TeacherState.create("mnist", variant, 0, n_batches=4, batch_size=batch_size, width=0.03)


# ---------------------------------------------------------------- bootstrap and reports

@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.integers(0, 100))
def test_bootstrap_interval_contains_mean(values, seed):
    lo, hi = bootstrap_ci(values, seed=seed)
    assert lo <= float(np.mean(values)) <= hi


def test_bootstrap_is_seeded_and_degenerate_on_constants():
    values = np.random.default_rng(0).random(30)
    assert bootstrap_ci(values, seed=3) == bootstrap_ci(values, seed=3)
    assert bootstrap_ci([0.5] * 10) == (0.5, 0.5)
    with pytest.raises(ValueError):
        bootstrap_ci([])


def test_interval_narrows_with_more_seeds():
    rng = np.random.default_rng(1)
    small = FewStepReport.from_accuracies("x", 4, [], rng.random(10))
    large = FewStepReport.from_accuracies("x", 4, [], rng.random(1000))
    assert large.ci_width < small.ci_width


def test_report_merge_pools_accuracies():
    a = FewStepReport.from_accuracies("t", 4, [0, 1], [0.2, 0.4])
    b = FewStepReport.from_accuracies("t", 4, [2], [0.9])
    m = a.merge(b)
    assert m.accuracies == [0.2, 0.4, 0.9] and m.mean == pytest.approx(0.5) and m.seeds == [0, 1, 2]
    assert m.ci_low <= m.mean <= m.ci_high and m.row()["n"] == 3


# ---------------------------------------------------------------- few-step accuracy

def test_zero_steps_is_chance(mnist_splits):
    rep = few_step_accuracy(small_teacher(), InnerHyper.create(), mnist_splits.test, 0, range(10),
                            learner_width=0.125)
    assert abs(rep.mean - 0.1) <= 0.03
    assert all(0 <= a <= 1 for a in rep.accuracies) and rep.ci_low <= rep.ci_high


def test_untrained_teacher_is_near_chance(mnist_splits):
    rep = few_step_accuracy(small_teacher(), InnerHyper.create(), mnist_splits.test, 8, range(10),
                            learner_width=0.125)
    assert abs(rep.mean - 0.1) <= 0.03


def test_real_data_beats_chance(tiny_splits):
    src = RealDataSource(tiny_splits.train, 32)
    rep = few_step_accuracy(src, InnerHyper.create(0.05, 0.9), tiny_splits.test, 20, range(3),
                            learner_width=0.125)
    assert rep.mean > 0.3 and rep.source == "real"


def test_diverged_learner_scores_zero(tiny_splits):
    src = RealDataSource(tiny_splits.train, 32)
    rep = few_step_accuracy(src, InnerHyper.create(1e6, 0.9), tiny_splits.test, 10, [0], learner_width=0.125)
    assert rep.accuracies == [0.0]


def test_ablation_is_reproducible(tiny_splits):
    base = mnist_config(**TINY)
    reports = [curriculum_ablation(base, tiny_splits, [0], [5, 6], variants=["full-curriculum", "no-curriculum"])
               for _ in range(2)]
    assert set(reports[0]) == {"full-curriculum", "no-curriculum"}
    for v in reports[0]:
        assert reports[0][v].accuracies == reports[1][v].accuracies


def test_ablation_pools_seeds(tiny_splits):
    calls = []

    def fake_train(config, splits):
        calls.append((config.variant, config.seed))
        return run_meta_training(config, splits)

    base = mnist_config(**{**TINY, "iterations": 0})
    rep = curriculum_ablation(base, tiny_splits, [0, 1], [5], variants=["shuffled-batch"], train_fn=fake_train)
    assert calls == [("shuffled-batch", 0), ("shuffled-batch", 1)]
    assert len(rep["shuffled-batch"].accuracies) == 2


# ---------------------------------------------------------------- weight-norm study

def test_wn_samples_respect_ranges():
    samples = sample_wn_configs(200, seed=0)
    assert sample_wn_configs(200, seed=0) == samples
    for key in WN_RANGES:
        lo, hi = WN_RANGES[key]
        assert all(lo <= getattr(s, key) <= hi for s in samples)


def test_final_loss_caps_divergence():
    assert final_loss([1.0] * 9 + [3.0]) == 3.0
    assert final_loss([1.0, 2.0, float("nan")]) == DIVERGENCE_CAP
    assert final_loss([1e9]) == DIVERGENCE_CAP
    assert final_loss([]) == DIVERGENCE_CAP
    assert DIVERGENCE_CAP == pytest.approx(10 * math.log(10)) and CHANCE_LOSS == pytest.approx(math.log(10))


def test_identical_config_gives_identical_loss(tiny_splits):
    cfg = mnist_config(**TINY)
    assert wn_run(cfg, tiny_splits) == wn_run(cfg, tiny_splits)


def test_diverged_run_reports_the_cap(tiny_splits):
    loss, diverged = wn_run(mnist_config(**TINY, divergence_threshold=0.0), tiny_splits)
    assert diverged and loss == DIVERGENCE_CAP


def test_study_runs_both_arms_with_shared_seeds(tiny_splits):
    seen = []

    def fake(config, splits):
        seen.append((config.seed, config.outer_lr, config.weight_norm))
        return (1.0 if config.weight_norm else 2.0), False

    study = wn_robustness_study(3, mnist_config(**TINY), tiny_splits, run_fn=fake)
    assert [s[2] for s in seen] == [True, False] * 3
    assert seen[0][:2] == seen[1][:2]
    assert study.median_with == 1.0 and study.median_without == 2.0 and len(list(study.rows())) == 3


# ---------------------------------------------------------------- endless data and ensembles

def test_endless_data_needs_no_curriculum_teacher(tiny_splits):
    with pytest.raises(ValueError):
        endless_data_eval(small_teacher("full-curriculum"), InnerHyper.create(), tiny_splits.test,
                          "batch_sweep", [16], [0])
    with pytest.raises(ValueError):
        endless_data_eval(small_teacher(), InnerHyper.create(), tiny_splits.test, "width_sweep", [16], [0])


def test_meta_training_level_reproduces_few_step_accuracy(tiny_splits):
    t, hyper = small_teacher(), InnerHyper.create()
    base = few_step_accuracy(t, hyper, tiny_splits.test, 4, [0, 1], learner_width=0.0625)
    by_batch = endless_data_eval(t, hyper, tiny_splits.test, "batch_sweep", [16, 32], [0, 1], steps=4,
                                 learner_width=0.0625)
    by_steps = endless_data_eval(t, hyper, tiny_splits.test, "step_sweep", [4, 8], [0, 1], learner_width=0.0625)
    assert by_batch[16].accuracies == base.accuracies and by_steps[4].accuracies == base.accuracies
    assert set(by_batch) == {16, 32} and set(by_steps) == {4, 8}


def test_single_learner_ensemble_degenerates_exactly(tiny_splits):
    rep = ensemble_eval(small_teacher(), InnerHyper.create(), tiny_splits.test, 1, 3, seed=2, learner_width=0.0625)
    assert rep.ensemble_accuracy == rep.individual[0] == rep.mean_individual
    with pytest.raises(ValueError):
        ensemble_eval(small_teacher(), InnerHyper.create(), tiny_splits.test, 0, 3)


def test_ensemble_probabilities_are_distributions(tiny_splits):
    learner, params, stats = train_learner(small_teacher(), InnerHyper.create(), "mnist", 3, 0, 0.0625)
    probs = predict_proba(learner, params, stats, tiny_splits.test)
    assert (probs >= 0).all()
    assert torch.allclose(probs.sum(1), torch.ones(len(tiny_splits.test), dtype=probs.dtype))
    rep = ensemble_eval(small_teacher(), InnerHyper.create(), tiny_splits.test, 3, 3, learner_width=0.0625)
    assert len(rep.individual) == 3 and rep.ci_low <= rep.mean_individual <= rep.ci_high


# ---------------------------------------------------------------- realism analyses

def test_flip_count_examples():
    assert flip_counts([3, 3, 7, 7, 3]).tolist() == [2]
    assert flip_counts([4] * 6).tolist() == [0]
    s = 7
    assert flip_counts([i % 2 for i in range(s)]).tolist() == [s - 1]
    assert flip_counts(np.zeros((1, 5))).tolist() == [0] * 5


def test_flip_ranking_orders_by_count_then_index():
    preds = np.array([[0, 1, 2, 3],
                      [1, 1, 2, 4],
                      [0, 1, 3, 3]])
    ranking = label_flip_ranking(preds)
    assert ranking.counts.tolist() == [2, 0, 1, 2]
    assert ranking.order.tolist() == [1, 2, 0, 3]
    assert ranking.histogram.tolist() == [1, 1, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 20), st.integers(0, 1000))
def test_flip_ranking_is_a_permutation(steps, n, seed):
    preds = np.random.default_rng(seed).integers(0, 3, (steps, n))
    ranking = label_flip_ranking(preds)
    assert sorted(ranking.order.tolist()) == list(range(n))
    assert ranking.histogram.sum() == n
    assert np.all(np.diff(ranking.counts[ranking.order]) >= 0)


def test_probe_trace_shape(tiny_splits):
    images = torch.randn(5, 1, 28, 28)
    preds = probe_predictions(images, tiny_splits.train, 3, learner_width=0.0625, batch_size=16)
    assert preds.shape == (3, 5) and preds.min() >= 0 and preds.max() <= 9


def test_class_pixel_mean_examples():
    x = torch.randn(2, 1, 3, 3)
    means = class_pixel_mean(torch.cat([x[:1], -x[:1], x[1:], x[1:]]), [0, 0, 4, 4])
    assert torch.allclose(means[0], torch.zeros(1, 3, 3, dtype=torch.float64))
    assert torch.equal(means[4], x[1].double())
    assert set(means) == {0, 4}
    single = class_pixel_mean(x, [2, 3])
    assert torch.equal(single[2], x[0].double())
