"""Measurement procedures: few-step accuracy and the studies built on it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .autodiff import DivergedError
from .learners import instantiate, sample_learner
from .meta import (LEARNER_DOMAIN, InnerHyper, InnerLoop, MetaTrainer, derive_seed, evaluate,
                   predict_proba, run_inner_loop)
from .teacher import CurriculumVariant, RealDataSource

BOOTSTRAP_RESAMPLES = 1000
CHANCE_LOSS = math.log(10)
DIVERGENCE_CAP = 10 * CHANCE_LOSS

# sampling ranges for the weight-norm robustness study
WN_RANGES = {"outer_lr": (1e-4, 1e-1), "init_lr": (1e-3, 1e-1), "init_momentum": (0.1, 0.9)}

_LEARNER, _PLAN = 10, 11


def bootstrap_ci(values, n_resamples=BOOTSTRAP_RESAMPLES, level=0.95, seed=0):
    """Percentile bootstrap interval for the mean."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("bootstrap needs at least one value")
    rng = np.random.default_rng(seed)
    means = values[rng.integers(0, len(values), (n_resamples, len(values)))].mean(1)
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(means, [tail, 100 - tail])
    mean = float(values.mean())
    # the percentile interval of the resampled means always brackets the sample mean
    # up to rounding; clamp so the report is self-consistent
    return min(float(lo), mean), max(float(hi), mean)


@dataclass
class FewStepReport:
    source: str
    steps: int
    seeds: list
    accuracies: list
    mean: float = 0.0
    ci_low: float = 0.0
    ci_high: float = 0.0
    label: str = ""

    FIELDS = ("label", "source", "steps", "n", "mean", "ci_low", "ci_high")

    @classmethod
    def from_accuracies(cls, source, steps, seeds, accuracies, label="", bootstrap_seed=0):
        lo, hi = bootstrap_ci(accuracies, seed=bootstrap_seed)
        return cls(source, steps, list(seeds), [float(a) for a in accuracies],
                   float(np.mean(accuracies)), lo, hi, label)

    @property
    def ci_width(self):
        return self.ci_high - self.ci_low

    @property
    def half_width(self):
        return max(self.mean - self.ci_low, self.ci_high - self.mean)

    def merge(self, other, label=None) -> "FewStepReport":
        """Pool the per-learner accuracies of two reports."""
        return FewStepReport.from_accuracies(self.source, self.steps, self.seeds + other.seeds,
                                             self.accuracies + other.accuracies,
                                             self.label if label is None else label)

    def row(self):
        return dict(label=self.label, source=self.source, steps=self.steps, n=len(self.accuracies),
                    mean=self.mean, ci_low=self.ci_low, ci_high=self.ci_high)


def train_learner(source, hyper, dataset_kind, steps, seed, learner_width=1.0, weight_norm=True,
                  loss_kind="cross_entropy", dtype=torch.float32):
    """Sample a fresh learner from ``seed`` and train it ``steps`` batches on ``source``."""
    spec = sample_learner(LEARNER_DOMAIN[dataset_kind], derive_seed(seed, _LEARNER), learner_width)
    learner = instantiate(spec, weight_norm, dtype)
    params, stats, trace = run_inner_loop(source, learner, steps, hyper, derive_seed(seed, _PLAN),
                                          loss_kind=loss_kind)
    return learner, params, stats


def few_step_accuracy(source, hyper: InnerHyper, dataset, steps, seeds, learner_width=1.0,
                      weight_norm=True, label="", dtype=torch.float32) -> FewStepReport:
    """Test accuracy of fresh learners trained ``steps`` inner steps on ``source``."""
    accs = []
    for seed in seeds:
        try:
            learner, params, stats = train_learner(source, hyper, dataset.kind, steps, seed,
                                                   learner_width, weight_norm, dtype=dtype)
            accs.append(evaluate(learner, params, stats, dataset, dtype=dtype))
        except DivergedError:
            accs.append(0.0)
    return FewStepReport.from_accuracies(getattr(source, "kind", "source"), steps, seeds, accs, label)


def trainer_accuracy(trainer: MetaTrainer, dataset, seeds, steps=None, label=""):
    """Few-step accuracy of a meta-trained source with its learned hyperparameters."""
    cfg = trainer.config
    return few_step_accuracy(trainer.source, trainer.hyper, dataset,
                             cfg.inner_steps if steps is None else steps, seeds,
                             cfg.learner_width, cfg.weight_norm, label, trainer.dtype)


def run_meta_training(config, splits):
    trainer = MetaTrainer(config, splits)
    record = trainer.train()
    return record, trainer


def curriculum_ablation(base_config, splits, seeds, eval_seeds, variants=None, train_fn=run_meta_training,
                        dataset=None) -> dict:
    """Meta-train one teacher per (variant, seed) and pool their few-step accuracies per variant."""
    dataset = splits.test if dataset is None else dataset
    variants = list(CurriculumVariant) if variants is None else [CurriculumVariant(v) for v in variants]
    reports = {}
    for variant in variants:
        pooled = None
        for seed in seeds:
            config = replace(base_config, source="teacher", variant=variant.value, seed=seed)
            _, trainer = train_fn(config, splits)
            report = trainer_accuracy(trainer, dataset, eval_seeds, label=variant.value)
            pooled = report if pooled is None else pooled.merge(report)
        reports[variant.value] = pooled
    return reports


# ---------------------------------------------------------------------------
# weight normalization robustness

@dataclass
class WNSample:
    index: int
    outer_lr: float
    init_lr: float
    init_momentum: float
    seed: int


@dataclass
class WNStudy:
    samples: list
    with_wn: list = field(default_factory=list)
    without_wn: list = field(default_factory=list)
    diverged_with: list = field(default_factory=list)
    diverged_without: list = field(default_factory=list)

    @property
    def median_with(self):
        return float(np.median(self.with_wn))

    @property
    def median_without(self):
        return float(np.median(self.without_wn))

    def rows(self):
        for s, a, b, da, db in zip(self.samples, self.with_wn, self.without_wn,
                                   self.diverged_with, self.diverged_without):
            yield dict(index=s.index, outer_lr=s.outer_lr, init_lr=s.init_lr,
                       init_momentum=s.init_momentum, seed=s.seed, loss_with_wn=a,
                       loss_without_wn=b, diverged_with_wn=da, diverged_without_wn=db)


def sample_wn_configs(n_samples, seed=0, ranges=WN_RANGES):
    rng = np.random.default_rng(seed)

    def log_uniform(lo, hi):
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

    out = []
    for i in range(n_samples):
        out.append(WNSample(i, log_uniform(*ranges["outer_lr"]), log_uniform(*ranges["init_lr"]),
                            float(rng.uniform(*ranges["init_momentum"])), int(rng.integers(2 ** 31))))
    return out


def final_loss(meta_losses, tail=0.1, cap=DIVERGENCE_CAP):
    """Mean meta-loss over the last ``tail`` fraction of iterations, capped."""
    if not meta_losses:
        return cap
    k = max(1, int(math.ceil(len(meta_losses) * tail)))
    value = float(np.mean(meta_losses[-k:]))
    return cap if not math.isfinite(value) else min(value, cap)


def wn_run(config, splits):
    """Final loss of one meta-training run and whether it diverged."""
    trainer = MetaTrainer(config, splits)
    losses = []
    try:
        record = trainer.train()
        losses = [r["meta_loss"] for r in record.rows]
    except DivergedError:
        return DIVERGENCE_CAP, True
    return final_loss(losses), False


def wn_robustness_study(n_samples, base_config, splits, seed=0, ranges=WN_RANGES, run_fn=wn_run,
                        callback=None) -> WNStudy:
    """Each sampled configuration is meta-trained twice, with and without weight normalization."""
    study = WNStudy(sample_wn_configs(n_samples, seed, ranges))
    for s in study.samples:
        for wn, losses, flags in ((True, study.with_wn, study.diverged_with),
                                  (False, study.without_wn, study.diverged_without)):
            config = replace(base_config, outer_lr=s.outer_lr, init_lr=s.init_lr,
                             init_momentum=s.init_momentum, seed=s.seed, weight_norm=wn)
            loss, diverged = run_fn(config, splits)
            losses.append(loss)
            flags.append(diverged)
        if callback is not None:
            callback(study)
    return study


# ---------------------------------------------------------------------------
# endless data and ensembles

def endless_data_eval(teacher, hyper, dataset, mode, levels, seeds, steps=16, learner_width=1.0,
                      weight_norm=True) -> dict:
    """Accuracy per level of either the inner batch size or the number of inner steps."""
    if teacher.variant is not CurriculumVariant.NO_CURRICULUM:
        raise ValueError("endless-data sweeps need the unbounded no-curriculum teacher")
    out = {}
    for level in levels:
        if mode == "batch_sweep":
            source, n_steps = teacher.with_batch_size(level), steps
        elif mode == "step_sweep":
            source, n_steps = teacher, level
        else:
            raise ValueError(f"unknown sweep mode {mode!r}")
        out[level] = few_step_accuracy(source, hyper, dataset, n_steps, seeds, learner_width,
                                       weight_norm, label=f"{mode}={level}")
    return out


@dataclass
class EnsembleReport:
    k: int
    ensemble_accuracy: float
    individual: list
    mean_individual: float
    ci_low: float
    ci_high: float

    @property
    def half_width(self):
        return max(self.mean_individual - self.ci_low, self.ci_high - self.mean_individual)


def ensemble_eval(source, hyper, dataset, k, steps, seed=0, learner_width=1.0,
                  weight_norm=True) -> EnsembleReport:
    """Average the class probabilities of ``k`` independently trained learners."""
    if k < 1:
        raise ValueError("ensemble needs at least one learner")
    labels = torch.as_tensor(dataset.labels)
    total = None
    individual = []
    for i in range(k):
        learner, params, stats = train_learner(source, hyper, dataset.kind, steps, derive_seed(seed, i),
                                               learner_width, weight_norm)
        probs = predict_proba(learner, params, stats, dataset)
        individual.append(float((probs.argmax(1) == labels).double().mean()))
        total = probs if total is None else total + probs
    mean_probs = total / k
    ens = float((mean_probs.argmax(1) == labels).double().mean())
    lo, hi = bootstrap_ci(individual, seed=seed)
    return EnsembleReport(k, ens, individual, float(np.mean(individual)), lo, hi)


# ---------------------------------------------------------------------------
# realism analyses

def flip_counts(predictions) -> np.ndarray:
    """Number of adjacent-step prediction changes per image; ``predictions`` is steps x images."""
    predictions = np.asarray(predictions)
    if predictions.ndim == 1:
        predictions = predictions[:, None]
    if len(predictions) < 2:
        return np.zeros(predictions.shape[1], dtype=np.int64)
    return (predictions[1:] != predictions[:-1]).sum(0).astype(np.int64)


@dataclass
class FlipRanking:
    order: np.ndarray         # image indices, fewest flips first, ties by index
    counts: np.ndarray        # flips per image (original order)
    histogram: np.ndarray     # histogram[c] = number of images with c flips


def label_flip_ranking(predictions) -> FlipRanking:
    counts = flip_counts(predictions)
    order = np.lexsort((np.arange(len(counts)), counts))
    return FlipRanking(order, counts, np.bincount(counts, minlength=1))


def probe_predictions(images, dataset, steps, seed=0, learner_width=1.0, lr=0.05, momentum=0.9,
                      batch_size=128, chunk=1024):
    """Train a probe on real data; after each step classify every image. Returns steps x n labels."""
    spec = sample_learner(LEARNER_DOMAIN[dataset.kind], derive_seed(seed, _LEARNER), learner_width)
    learner = instantiate(spec)
    source = RealDataSource(dataset, batch_size)
    loop = InnerLoop(learner, source, source.plan(derive_seed(seed, _PLAN)), InnerHyper.create(lr, momentum))
    state = loop.initial_state()
    rows = []
    for t in range(steps):
        state, side = loop.step(t, state, False)
        state = tuple(s.detach() for s in state)
        params, stats = loop.unpack(state, tuple(s.detach() for s in side))
        preds = []
        with torch.no_grad():
            for start in range(0, len(images), chunk):
                out, _ = learner.forward(params, images[start:start + chunk], train=False, stats=stats)
                preds.append(out.argmax(1))
        rows.append(torch.cat(preds).numpy())
    return np.stack(rows)


def class_pixel_mean(images, labels, n_classes=10) -> dict:
    """Mean image per class; classes without images are absent from the result."""
    images = torch.as_tensor(images)
    labels = torch.as_tensor(labels)
    return {c: images[labels == c].double().mean(0) for c in range(n_classes) if bool((labels == c).any())}
