"""Command-line entry point: ``gtn train | eval | nas | export``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from . import io, nas
from .autodiff import DivergedError
from .data import DataFormatError, data_root, prepare
from .meta import ExperimentRecord, MetaTrainer, OuterConfig, cifar_config, mnist_config
from .nn import ConfigError
from .teacher import CurriculumVariant

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("gtn")


class UsageError(Exception):
    """Invalid configuration; the message names the offending flag or field."""


# ---------------------------------------------------------------------------
# helpers

def load_splits(args, kind):
    root = data_root(args.data, kind)
    if root is None:
        raise UsageError("--data: no dataset directory given and GTN_DATA_DIR is not set")
    if not root.is_dir():
        raise UsageError(f"--data: dataset directory {root} does not exist")
    try:
        return prepare(kind, root, args.split_seed)
    except FileNotFoundError as err:
        raise UsageError(f"--data: missing dataset file {err}") from None


def output_dir(args, command):
    """Fresh timestamped directory under ``--out``."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(args.out) / f"{command}-{stamp}"
    path, i = base, 1
    while path.exists():
        path, i = Path(f"{base}-{i}"), i + 1
    path.mkdir(parents=True)
    return path


def run_metadata(args, **extra):
    return dict(argv=sys.argv[1:], seed=getattr(args, "seed", None), torch=torch.__version__,
                numpy=np.__version__, python=platform.python_version(),
                torch_threads=torch.get_num_threads(), **extra)


def write_metadata(path, args, **extra):
    io.atomic_write(path, json.dumps(run_metadata(args, **extra), indent=2, sort_keys=True) + "\n")


def finish(directory):
    io.write_manifest(directory)
    print(directory)


def load_ckpt(path):
    if path is None:
        raise UsageError("--checkpoint: a teacher checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"--checkpoint: {path} does not exist")
    return io.load_checkpoint(path)


def check_batch(flag, size, dataset):
    if size > len(dataset):
        raise UsageError(f"{flag}: {size} exceeds the {len(dataset)} images of the {dataset.split} split")


def seeds_from(args):
    return list(range(args.seed, args.seed + args.seeds))


# ---------------------------------------------------------------------------
# train

TRAIN_FLAGS = {
    "domain": "domain", "variant": "variant", "source": "source", "steps": "inner_steps",
    "inner_batch": "inner_batch", "outer_batch": "outer_batch", "iters": "iterations",
    "outer_lr": "outer_lr", "seed": "seed", "eval_interval": "eval_interval",
    "eval_learners": "eval_learners", "learner_width": "learner_width",
    "generator_width": "generator_width", "bank_batches": "bank_batches", "clip_norm": "clip_norm",
    "loss": "loss",
}


def build_config(args) -> OuterConfig:
    sections = io.read_config(args.config) if args.config else {}
    values = dict(sections.get("train", {}))
    domain = getattr(args, "domain", None) or values.get("domain", "mnist")
    base = cifar_config() if domain == "cifar" else mnist_config()
    for flag, field in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[field] = value
    if getattr(args, "no_weight_norm", False):
        values["weight_norm"] = False
    if getattr(args, "no_checkpointing", False):
        values["checkpointing"] = False
    if getattr(args, "xy", False):
        values["xy"] = True
    if "seed" not in values:
        raise UsageError("--seed: a seed is required (flag or [train] seed in the config file)")
    try:
        return io.outer_config_from(values, base)
    except (ValueError, TypeError) as err:
        raise UsageError(f"config: {err}") from None


def cmd_train(args):
    if args.resume:
        ckpt = load_ckpt(args.resume)
        config = ckpt.config
        if args.iters is not None:
            config = replace(config, iterations=args.iters)
    else:
        config = build_config(args)
    splits = load_splits(args, config.domain)
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    record = ExperimentRecord(config.to_dict())
    if args.resume:
        trainer = ckpt.trainer(splits, config)
        previous = out / "record.csv"
        if previous.exists():
            record.rows = [r for r in io.read_record(previous).rows if r["iteration"] < trainer.iteration]
    else:
        check_batch("--outer-batch", config.outer_batch, splits.train)
        trainer = MetaTrainer(config, splits)
    io.write_config(out / "config.ini", {"run": {"schema": io.CONFIG_SCHEMA},
                                         "train": config.to_dict()})
    write_metadata(out / "run.json", args)

    def on_iteration(tr, rec):
        if args.checkpoint_every and tr.iteration % args.checkpoint_every == 0:
            io.save_checkpoint(out / "checkpoints" / f"iter_{tr.iteration:05d}.ckpt", tr)
            io.write_record(out / "record.csv", rec)

    try:
        trainer.train(record=record, callback=on_iteration)
    except DivergedError:
        io.write_record(out / "record.csv", record)
        io.save_checkpoint(out / "checkpoints" / f"diverged_{trainer.iteration:05d}.ckpt", trainer)
        raise
    io.write_record(out / "record.csv", record)
    io.save_checkpoint(out / "teacher.ckpt", trainer)
    print(out / "teacher.ckpt")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval_few_step(args):
    ckpt = load_ckpt(args.checkpoint)
    cfg = ckpt.config
    splits = load_splits(args, cfg.domain)
    report = ev.few_step_accuracy(ckpt.source(splits), ckpt.hyper(), splits.test,
                                  args.steps or cfg.inner_steps, seeds_from(args), cfg.learner_width,
                                  cfg.weight_norm, label=cfg.source)
    out = output_dir(args, "few-step")
    io.write_csv(out / "few_step.csv", [report.row()], ev.FewStepReport.FIELDS)
    io.write_csv(out / "accuracies.csv", [dict(seed=s, accuracy=a) for s, a in zip(report.seeds, report.accuracies)],
                 ("seed", "accuracy"))
    write_metadata(out / "run.json", args, checkpoint=str(args.checkpoint))
    finish(out)
    return EXIT_OK


def cmd_eval_ablation(args):
    """Pool few-step accuracy of teachers grouped by curriculum variant."""
    if not args.checkpoints:
        raise UsageError("--checkpoints: at least one teacher checkpoint is required")
    reports = {}
    splits = None
    for path in args.checkpoints:
        ckpt = load_ckpt(path)
        cfg = ckpt.config
        splits = splits or load_splits(args, cfg.domain)
        rep = ev.few_step_accuracy(ckpt.source(splits), ckpt.hyper(), splits.test, cfg.inner_steps,
                                   seeds_from(args), cfg.learner_width, cfg.weight_norm, label=cfg.variant)
        reports[cfg.variant] = reports[cfg.variant].merge(rep) if cfg.variant in reports else rep
    out = output_dir(args, "ablation")
    rows = [reports[v.value].row() for v in CurriculumVariant if v.value in reports]
    io.write_csv(out / "ablation.csv", rows, ev.FewStepReport.FIELDS)
    write_metadata(out / "run.json", args)
    finish(out)
    return EXIT_OK


def cmd_eval_wn_study(args):
    base = build_config(args)
    splits = load_splits(args, base.domain)
    out = output_dir(args, "wn-study")
    columns = ("index", "outer_lr", "init_lr", "init_momentum", "seed", "loss_with_wn",
               "loss_without_wn", "diverged_with_wn", "diverged_without_wn")

    def progress(study):
        io.write_csv(out / "wn_study.csv", list(study.rows()), columns)

    study = ev.wn_robustness_study(args.samples, base, splits, args.seed, callback=progress)
    io.write_csv(out / "summary.csv", [dict(
        median_with_wn=study.median_with, median_without_wn=study.median_without,
        diverged_with_wn=sum(study.diverged_with), diverged_without_wn=sum(study.diverged_without))],
        ("median_with_wn", "median_without_wn", "diverged_with_wn", "diverged_without_wn"))
    write_metadata(out / "run.json", args)
    finish(out)
    return EXIT_OK


def cmd_eval_endless(args):
    ckpt = load_ckpt(args.checkpoint)
    cfg = ckpt.config
    splits = load_splits(args, cfg.domain)
    mode = {"batch": "batch_sweep", "step": "step_sweep"}[args.mode]
    levels = args.levels or ([128, 256, 512, 1024] if mode == "batch_sweep" else [16, 32, 64])
    try:
        reports = ev.endless_data_eval(ckpt.source(splits), ckpt.hyper(), splits.test, mode, levels,
                                       seeds_from(args), args.steps or cfg.inner_steps,
                                       cfg.learner_width, cfg.weight_norm)
    except ValueError as err:
        raise UsageError(f"--checkpoint: {err}") from None
    out = output_dir(args, "endless")
    io.write_csv(out / "endless.csv", [dict(r.row(), level=lv) for lv, r in reports.items()],
                 ("level",) + ev.FewStepReport.FIELDS)
    write_metadata(out / "run.json", args)
    finish(out)
    return EXIT_OK


def cmd_eval_ensemble(args):
    ckpt = load_ckpt(args.checkpoint)
    cfg = ckpt.config
    splits = load_splits(args, cfg.domain)
    rep = ev.ensemble_eval(ckpt.source(splits), ckpt.hyper(), splits.test, args.k,
                           args.steps or cfg.inner_steps, args.seed, cfg.learner_width, cfg.weight_norm)
    out = output_dir(args, "ensemble")
    io.write_csv(out / "ensemble.csv", [dict(k=rep.k, ensemble_accuracy=rep.ensemble_accuracy,
                                             mean_individual=rep.mean_individual, ci_low=rep.ci_low,
                                             ci_high=rep.ci_high)],
                 ("k", "ensemble_accuracy", "mean_individual", "ci_low", "ci_high"))
    io.write_csv(out / "individual.csv", [dict(learner=i, accuracy=a) for i, a in enumerate(rep.individual)],
                 ("learner", "accuracy"))
    write_metadata(out / "run.json", args)
    finish(out)
    return EXIT_OK


def cmd_eval_realism(args):
    ckpt = load_ckpt(args.checkpoint)
    cfg = ckpt.config
    splits = load_splits(args, cfg.domain)
    source = ckpt.source(splits)
    x, y, _ = io.generate_curriculum(source, args.batches or getattr(source, "n_batches", None) or cfg.inner_steps,
                                     args.seed)
    labels = y.argmax(1)
    check_batch("--probe-batch", args.probe_batch, splits.train)
    preds = ev.probe_predictions(x, splits.train, args.probe_steps, args.seed, cfg.learner_width,
                                 batch_size=args.probe_batch)
    ranking = ev.label_flip_ranking(preds)
    out = output_dir(args, "realism")
    pixels = io.to_uint8(x)
    suffix = io.image_suffix(x.shape[1])
    io.write_image(out / f"ranked_grid{suffix}", io.grid(pixels[ranking.order], args.columns))
    io.write_csv(out / "ranking.csv", [dict(rank=r, index=int(i), label=int(labels[i]), flips=int(ranking.counts[i]))
                                       for r, i in enumerate(ranking.order)], ("rank", "index", "label", "flips"))
    io.write_csv(out / "flip_histogram.csv", [dict(flips=c, images=int(n)) for c, n in enumerate(ranking.histogram)],
                 ("flips", "images"))
    means = ev.class_pixel_mean(x, labels)
    rows = []
    for c in range(10):
        if c in means:
            name = f"class_mean_{c}{suffix}"
            io.write_image(out / name, io.to_uint8(means[c]))
            rows.append(dict(label=c, present=True, file=name, images=int((labels == c).sum())))
        else:
            rows.append(dict(label=c, present=False, file="", images=0))
    io.write_csv(out / "class_means.csv", rows, ("label", "present", "file", "images"))
    write_metadata(out / "run.json", args)
    finish(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# nas

def cmd_nas_search(args):
    blueprint = nas.Blueprint(args.n, args.f)
    teacher = hyper = None
    if args.evaluator == "gtn":
        ckpt = load_ckpt(args.checkpoint)
        kind = ckpt.config.domain
        splits = load_splits(args, kind)
        teacher, hyper = ckpt.source(splits), ckpt.hyper()
    else:
        splits = load_splits(args, args.domain)
        check_batch("--batch-size", args.batch_size, splits.train)
    evaluator = nas.Evaluator(args.evaluator, splits, teacher, hyper, args.steps, blueprint,
                              batch_size=args.batch_size)
    results = nas.random_search(args.candidates, evaluator, args.seed, jobs=args.jobs)
    out = output_dir(args, f"nas-{args.evaluator}")
    nas.write_results(out / "results.csv", results)
    io.atomic_write(out / "best_genotype.txt", results[0].genotype)
    write_metadata(out / "run.json", args)
    finish(out)
    return EXIT_OK


def cmd_nas_correlate(args):
    for flag, path in (("--log-a", args.log_a), ("--log-b", args.log_b)):
        if not Path(path).is_file():
            raise UsageError(f"{flag}: {path} does not exist")
    a, b = nas.read_results(args.log_a), nas.read_results(args.log_b)
    rows = []
    for fraction in (None, args.top_fraction) if args.top_fraction else (None,):
        try:
            res = nas.correlate_logs(a, b, fraction)
        except nas.UndefinedCorrelation as err:
            raise UsageError(f"--log-a/--log-b: {err}") from None
        rows.append(dict(top_fraction=fraction or 1.0, n=res.n, rho=res.rho, degenerate=res.degenerate))
    out = output_dir(args, "nas-correlate")
    io.write_csv(out / "correlation.csv", rows, ("top_fraction", "n", "rho", "degenerate"))
    write_metadata(out / "run.json", args)
    finish(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# export

def cmd_export(args):
    ckpt = load_ckpt(args.checkpoint)
    if ckpt.config.source == "real":
        raise UsageError("--checkpoint: a real-data run has nothing to export")
    source = ckpt.source()
    n_batches = args.batches
    if n_batches is None:
        n_batches = getattr(source, "n_batches", None)
        if getattr(source, "variant", None) is CurriculumVariant.NO_CURRICULUM:
            n_batches = ckpt.config.inner_steps
    out = Path(args.out)
    count = io.export_curriculum(out, source, n_batches, args.seed, args.columns)
    io.write_manifest(out)
    print(f"{count} images -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _common(p, out_default="runs"):
    p.add_argument("--data", help="dataset directory (default: $GTN_DATA_DIR)")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the train/validation split")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")


def _train_flags(p):
    p.add_argument("--config", help="INI run configuration; flags override it")
    p.add_argument("--domain", choices=("mnist", "cifar"))
    p.add_argument("--variant", choices=[v.value for v in CurriculumVariant])
    p.add_argument("--source", choices=("teacher", "distilled", "real"))
    p.add_argument("--steps", type=int, help="inner-loop steps")
    p.add_argument("--inner-batch", type=int)
    p.add_argument("--outer-batch", type=int)
    p.add_argument("--iters", type=int, help="outer-loop iterations")
    p.add_argument("--outer-lr", type=float)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--eval-learners", type=int)
    p.add_argument("--learner-width", type=float, help="multiplier on sampled learner widths")
    p.add_argument("--generator-width", type=float, help="multiplier on generator widths")
    p.add_argument("--bank-batches", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--loss", choices=("cross_entropy", "mse"))
    p.add_argument("--no-weight-norm", action="store_true")
    p.add_argument("--no-checkpointing", action="store_true", help="keep the whole unroll in memory")
    p.add_argument("--xy", action="store_true", help="generator emits soft labels")


def build_parser():
    parser = argparse.ArgumentParser(prog="gtn", description="Generative teaching networks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train a data source")
    _common(p)
    _train_flags(p)
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluation suites")
    esub = p.add_subparsers(dest="suite", required=True)

    e = esub.add_parser("few-step")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--seeds", type=int, default=5)
    e.add_argument("--steps", type=int)
    e.set_defaults(func=cmd_eval_few_step, seed_default=0)

    e = esub.add_parser("ablation")
    _common(e)
    e.add_argument("--checkpoints", nargs="+")
    e.add_argument("--seeds", type=int, default=5)
    e.set_defaults(func=cmd_eval_ablation, seed_default=0)

    e = esub.add_parser("wn-study")
    _common(e)
    _train_flags(e)
    e.add_argument("--samples", type=int, default=20)
    e.set_defaults(func=cmd_eval_wn_study)

    e = esub.add_parser("endless")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--mode", choices=("batch", "step"), default="batch")
    e.add_argument("--levels", type=int, nargs="+")
    e.add_argument("--steps", type=int)
    e.add_argument("--seeds", type=int, default=3)
    e.set_defaults(func=cmd_eval_endless, seed_default=0)

    e = esub.add_parser("ensemble")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--k", type=int, default=32)
    e.add_argument("--steps", type=int)
    e.set_defaults(func=cmd_eval_ensemble, seed_default=0)

    e = esub.add_parser("realism")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--batches", type=int)
    e.add_argument("--probe-steps", type=int, default=100)
    e.add_argument("--probe-batch", type=int, default=128, help="real-data batch size of the probe")
    e.add_argument("--columns", type=int, default=32)
    e.set_defaults(func=cmd_eval_realism, seed_default=0)

    p = sub.add_parser("nas", help="architecture search")
    nsub = p.add_subparsers(dest="nas_command", required=True)
    n = nsub.add_parser("search")
    _common(n)
    n.add_argument("--evaluator", choices=nas.EVALUATORS, default="gtn")
    n.add_argument("--candidates", type=int, default=800)
    n.add_argument("--checkpoint")
    n.add_argument("--domain", choices=("mnist", "cifar"), default="cifar")
    n.add_argument("--steps", type=int, help="training steps per candidate")
    n.add_argument("--n", type=int, default=1, help="normal cells per stage")
    n.add_argument("--f", type=int, default=8, help="base channel width")
    n.add_argument("--batch-size", type=int, default=128, help="real-data batch size of real-* evaluators")
    n.set_defaults(func=cmd_nas_search, seed_default=0)
    n = nsub.add_parser("correlate")
    _common(n)
    n.add_argument("--log-a", required=True)
    n.add_argument("--log-b", required=True)
    n.add_argument("--top-fraction", type=float)
    n.set_defaults(func=cmd_nas_correlate, seed_default=0)

    p = sub.add_parser("export", help="dump a learned curriculum as images")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--batches", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--columns", type=int, default=16)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if getattr(args, "seed", None) is None and hasattr(args, "seed_default"):
        args.seed = args.seed_default
    try:
        return args.func(args)
    except (UsageError, ConfigError, io.CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataFormatError as err:
        print(f"data format error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
