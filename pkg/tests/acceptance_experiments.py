"""Desk-scale experiments behind the slow acceptance checks.

Every meta-training run is checkpointed under ``acceptance_results/runs`` and
every measurement is cached as JSON keyed by a fingerprint of its settings,
so the acceptance tests reuse finished work and an interrupted sweep resumes
where it stopped. ``scripts/run_acceptance.py`` fills the cache ahead of time.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from gtn.autodiff import DivergedError
from gtn.data import prepare
from gtn.evaluation import (DIVERGENCE_CAP, FewStepReport, endless_data_eval, ensemble_eval,
                            final_loss, sample_wn_configs, trainer_accuracy)
from gtn.io import load_checkpoint, read_record, save_checkpoint, write_record
from gtn.meta import ExperimentRecord, MetaTrainer, mnist_config, cifar_config
from gtn.nas import Blueprint, Evaluator, candidates, rank_correlation
from gtn.teacher import CurriculumVariant

log = logging.getLogger("acceptance")

ROOT = Path(__file__).resolve().parents[1]
RESULTS = Path(os.environ.get("GTN_ACCEPTANCE_DIR", ROOT / "acceptance_results"))
MNIST_DIR = ROOT / "data" / "mnist"

SEEDS = (0, 1, 2)
EVAL_SEEDS = tuple(range(1000, 1020))     # fresh learners per trained source

# 16 inner steps, inner batch 64, 500 outer iterations; everything else shrunk to fit one CPU
DESK = dict(inner_steps=16, inner_batch=64, outer_batch=128, iterations=500, eval_interval=100,
            eval_learners=1, learner_width=0.125, generator_width=0.125, checkpointing=False)

# weight-norm study: many short runs
WN_TINY = dict(inner_steps=8, inner_batch=32, outer_batch=64, iterations=100, eval_interval=0,
               learner_width=0.125, generator_width=0.125, checkpointing=False)
WN_SAMPLES = 20

ENDLESS_BATCHES = (64, 128, 256)          # 1x, 2x, 4x the meta-training batch
ENDLESS_STEPS = (16, 32)                  # T, 2T
ENSEMBLE_K = 32

NAS_CANDIDATES = 20
NAS_BLUEPRINT = Blueprint(n=1, f=8)
NAS_TRAIN_SUBSET = 5000
NAS_STEPS = dict(gtn=128, long=2000)


def fingerprint(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def cached(name, settings, compute):
    """Return the JSON result stored for ``(name, settings)``, computing it once."""
    path = RESULTS / f"{name}-{fingerprint(settings)}.json"
    if path.exists():
        return json.loads(path.read_text())
    t0 = time.perf_counter()
    result = compute()
    result["seconds"] = time.perf_counter() - t0
    result["settings"] = settings
    RESULTS.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(result, indent=1, sort_keys=True, default=float))
    tmp.replace(path)
    return result


_splits = {}


def mnist_splits():
    if "mnist" not in _splits:
        if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
            raise FileNotFoundError(f"MNIST files missing under {MNIST_DIR}")
        _splits["mnist"] = prepare("mnist", MNIST_DIR, 0)
    return _splits["mnist"]


def cifar_dir():
    for candidate in (os.environ.get("GTN_CIFAR_DIR"), ROOT / "data" / "cifar"):
        if candidate and (Path(candidate) / "data_batch_1.bin").exists():
            return Path(candidate)
    return None


# ---------------------------------------------------------------------------
# meta-training runs

def desk_config(**overrides):
    return mnist_config(**{**DESK, **overrides})


def run_dir(config):
    cfg = config.to_dict()
    tag = f"{cfg['domain']}-{cfg['source']}-{cfg['variant']}-s{cfg['seed']}"
    return RESULTS / "runs" / f"{tag}-{fingerprint(cfg)}"


def trained(config, splits, save_every=50):
    """Meta-train ``config`` (or resume / reload it) and return the finished trainer."""
    directory = run_dir(config)
    final, partial, record_path = directory / "final.ckpt", directory / "partial.ckpt", directory / "record.csv"
    if final.exists():
        return load_checkpoint(final).trainer(splits, config)
    if partial.exists():
        trainer = load_checkpoint(partial).trainer(splits, config)
        record = read_record(record_path, config.to_dict())
        record.rows = record.rows[:trainer.iteration]
    else:
        trainer, record = MetaTrainer(config, splits), ExperimentRecord(config.to_dict())

    def checkpoint(tr, rec):
        if tr.iteration % save_every == 0:
            write_record(record_path, rec)
            save_checkpoint(partial, tr)

    log.info("training %s from iteration %d", directory.name, trainer.iteration)
    trainer.train(record=record, callback=checkpoint)
    write_record(record_path, record)
    save_checkpoint(final, trainer)
    partial.unlink(missing_ok=True)
    return trainer


def source_accuracy(config, splits, eval_seeds=EVAL_SEEDS):
    trainer = trained(config, splits)
    report = trainer_accuracy(trainer, splits.test, eval_seeds)
    return dict(accuracies=report.accuracies, alpha=float(trainer.hyper.lr.detach()),
                beta=float(trainer.hyper.momentum.detach()))


def pooled(name, configs, splits):
    """Per-seed accuracies (cached individually) pooled into one report."""
    accs, seeds = [], []
    for cfg in configs:
        res = cached(f"fewstep-{name}-s{cfg.seed}", dict(config=cfg.to_dict(), eval=EVAL_SEEDS),
                     lambda cfg=cfg: source_accuracy(cfg, splits))
        accs += res["accuracies"]
        seeds += [f"{cfg.seed}:{s}" for s in EVAL_SEEDS]
    return FewStepReport.from_accuracies(name, configs[0].inner_steps, seeds, accs, label=name)


# ---------------------------------------------------------------------------
# measurements

def source_comparison():
    """GTN, real-data and distilled-tensor sources at desk scale."""
    splits = mnist_splits()
    out = {}
    for name, source in (("gtn", "teacher"), ("real", "real"), ("distilled", "distilled")):
        configs = [desk_config(source=source, seed=s) for s in SEEDS]
        out[name] = pooled(name, configs, splits)
    return out


def curriculum_variants():
    splits = mnist_splits()
    return {v.value: pooled(f"variant-{v.value}",
                            [desk_config(source="teacher", variant=v.value, seed=s) for s in SEEDS], splits)
            for v in CurriculumVariant}


def ensemble_result():
    splits = mnist_splits()
    config = desk_config(source="teacher", variant="full-curriculum", seed=SEEDS[0])

    def compute():
        trainer = trained(config, splits)
        rep = ensemble_eval(trainer.source, trainer.hyper, splits.test, ENSEMBLE_K, config.inner_steps,
                            seed=7, learner_width=config.learner_width)
        return dict(k=rep.k, ensemble=rep.ensemble_accuracy, individual=rep.individual,
                    mean=rep.mean_individual, ci_low=rep.ci_low, ci_high=rep.ci_high,
                    half_width=rep.half_width)

    return cached("ensemble", dict(config=config.to_dict(), k=ENSEMBLE_K), compute)


def endless_result():
    splits = mnist_splits()
    configs = [desk_config(source="teacher", variant="no-curriculum", seed=s) for s in SEEDS]

    def compute():
        sweeps = {"batch_sweep": {}, "step_sweep": {}}
        for cfg in configs:
            trainer = trained(cfg, splits)
            teacher, hyper = trainer.source, trainer.hyper
            for mode, levels in (("batch_sweep", ENDLESS_BATCHES), ("step_sweep", ENDLESS_STEPS)):
                reports = endless_data_eval(teacher, hyper, splits.test, mode, levels, EVAL_SEEDS,
                                            steps=cfg.inner_steps, learner_width=cfg.learner_width)
                for level, rep in reports.items():
                    sweeps[mode].setdefault(str(level), []).extend(rep.accuracies)
        return sweeps

    raw = cached("endless", dict(configs=[c.to_dict() for c in configs], batches=ENDLESS_BATCHES,
                                 steps=ENDLESS_STEPS, eval=EVAL_SEEDS), compute)
    return {mode: {int(level): FewStepReport.from_accuracies("teacher", 0, [], accs, label=f"{mode}={level}")
                   for level, accs in raw[mode].items()}
            for mode in ("batch_sweep", "step_sweep")}


def _wn_single(config, splits):
    trainer = MetaTrainer(config, splits)
    losses = []

    def keep(tr, rec):
        losses.append(rec.rows[-1]["meta_loss"])

    try:
        trainer.train(callback=keep)
    except DivergedError:
        return dict(loss=DIVERGENCE_CAP, diverged=True, iterations=len(losses))
    loss = final_loss(losses)
    return dict(loss=loss, diverged=loss >= DIVERGENCE_CAP, iterations=len(losses))


def wn_result():
    splits = mnist_splits()
    base = mnist_config(**WN_TINY)
    samples = sample_wn_configs(WN_SAMPLES, seed=0)
    rows = []
    for s in samples:
        row = dict(index=s.index, outer_lr=s.outer_lr, init_lr=s.init_lr, init_momentum=s.init_momentum,
                   seed=s.seed)
        for wn in (True, False):
            cfg = replace(base, outer_lr=s.outer_lr, init_lr=s.init_lr, init_momentum=s.init_momentum,
                          seed=s.seed, weight_norm=wn)
            res = cached(f"wn-{s.index:02d}-{'with' if wn else 'without'}", cfg.to_dict(),
                         lambda cfg=cfg: _wn_single(cfg, splits))
            row["with" if wn else "without"] = res
        rows.append(row)
    with_wn = [r["with"]["loss"] for r in rows]
    without = [r["without"]["loss"] for r in rows]
    return dict(rows=rows, median_with=float(np.median(with_wn)), median_without=float(np.median(without)),
                capped_with=sum(r["with"]["diverged"] for r in rows),
                capped_without=sum(r["without"]["diverged"] for r in rows))


def nas_result():
    """Spearman correlation of gtn and real-long scores over random genotypes on CIFAR."""
    root = cifar_dir()
    if root is None:
        return None
    full = prepare("cifar", root, 0)
    rng = np.random.default_rng(0)
    train = full.train.subset(np.sort(rng.permutation(len(full.train))[:NAS_TRAIN_SUBSET]), "train")
    splits = replace(full, train=train)
    config = cifar_config(**{**DESK, "seed": 0})

    def compute():
        trainer = trained(config, splits)
        gtn = Evaluator("gtn", splits, trainer.source, trainer.hyper, NAS_STEPS["gtn"], NAS_BLUEPRINT)
        real = Evaluator("real-long", splits, steps=NAS_STEPS["long"], blueprint=NAS_BLUEPRINT)
        rows = []
        for genotype, seed in candidates(NAS_CANDIDATES, 0):
            a, b = gtn(genotype, seed), real(genotype, seed)
            rows.append(dict(genotype=genotype.to_text(), gtn=a.score, real_long=b.score))
        rho = rank_correlation([r["gtn"] for r in rows], [r["real_long"] for r in rows])
        return dict(rows=rows, rho=rho.rho, n=rho.n, degenerate=rho.degenerate)

    return cached("nas", dict(config=config.to_dict(), n=NAS_CANDIDATES, steps=NAS_STEPS,
                              subset=NAS_TRAIN_SUBSET), compute)


def gap_holds(better: FewStepReport, worse: FewStepReport):
    """Mean gap and whether it exceeds the wider of the two full 95% intervals."""
    gap = better.mean - worse.mean
    return gap, max(better.ci_width, worse.ci_width), gap > max(better.ci_width, worse.ci_width)


def monotone_with_tolerance(reports: dict, levels):
    """Split level-to-level accuracy drops into those within the larger bootstrap
    half-width of the pair (tolerable) and the rest."""
    tolerated, hard = [], []
    for lo, hi in zip(levels, levels[1:]):
        a, b = reports[lo], reports[hi]
        if b.mean >= a.mean:
            continue
        if a.mean - b.mean <= max(a.half_width, b.half_width):
            tolerated.append((lo, hi))
        else:
            hard.append((lo, hi))
    return tolerated, hard



ALL = dict(source_comparison=source_comparison, curriculum_variants=curriculum_variants,
           ensemble=ensemble_result, endless=endless_result, wn=wn_result, nas=nas_result)


def setup_threads():
    torch.set_num_threads(int(os.environ.get("GTN_THREADS", "1")))
