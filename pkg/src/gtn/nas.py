"""Cell-based architecture search with cheap proxy evaluation.

A genotype fixes two cells (normal and reduction) of five nodes each. Every
node sums two operations applied to two earlier tensors: index 0 and 1 are
the outputs of the two preceding cells, index ``k >= 2`` is node ``k - 2``.
Nodes never consumed inside the cell are concatenated and projected back to
the cell width.

The blueprint stacks ``N`` normal cells, a reduction cell, ``N`` normal
cells, a reduction cell and ``N`` normal cells, doubling the width at each
reduction. Networks follow the functional ``(params, x) -> (logits, stats)``
convention so they train through the same inner loop as ordinary learners.
"""
from __future__ import annotations

import csv
import hashlib
import math
import shlex
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import DivergedError
from .data import IMAGE_SHAPES, NUM_CLASSES
from .meta import InnerHyper, evaluate as score_learner, run_inner_loop
from .nn import ConfigError, Context, batch_norm, bn_params, conv2d, linear, weight_params
from .teacher import RealDataSource

N_NODES = 5
CELLS = ("normal", "reduction")

OPS = (
    "identity",
    "1x1 convolution",
    "3x3 convolution",
    "1x3 + 3x1 convolution",
    "1x7 + 7x1 convolution",
    "2x2 max pooling",
    "3x3 max pooling",
    "5x5 max pooling",
    "2x2 average pooling",
    "3x3 average pooling",
    "5x5 average pooling",
)
OP_IDS = {name: i for i, name in enumerate(OPS)}

# kernel shapes of the parametric ops; factorized convs apply their factors in order
CONV_KERNELS = {1: [(1, 1)], 2: [(3, 3)], 3: [(1, 3), (3, 1)], 4: [(1, 7), (7, 1)]}
POOLS = {5: ("max", 2), 6: ("max", 3), 7: ("max", 5), 8: ("avg", 2), 9: ("avg", 3), 10: ("avg", 5)}

EVALUATORS = ("gtn", "real-short", "real-long")


class UndefinedCorrelation(ValueError):
    pass


def op_id(name: str) -> int:
    key = " ".join(name.replace("×", "x").split())
    if key not in OP_IDS:
        raise ConfigError(f"unknown operation {name!r}")
    return OP_IDS[key]


# ---------------------------------------------------------------------------
# genotypes

@dataclass(frozen=True)
class CellGenotype:
    """``normal`` and ``reduction`` are tuples of ``(in_a, op_a, in_b, op_b)``."""
    normal: tuple
    reduction: tuple

    def __post_init__(self):
        for cell in CELLS:
            nodes = getattr(self, cell)
            if len(nodes) != N_NODES:
                raise ConfigError(f"{cell} cell needs {N_NODES} nodes, got {len(nodes)}")
            for i, (a, oa, b, ob) in enumerate(nodes):
                for idx in (a, b):
                    if not 0 <= idx <= i + 1:
                        raise ConfigError(f"{cell}:{i} input {idx} outside 0..{i + 1}")
                for op in (oa, ob):
                    if not 0 <= op < len(OPS):
                        raise ConfigError(f"{cell}:{i} operation id {op} outside 0..{len(OPS) - 1}")

    def to_text(self) -> str:
        lines = []
        for cell in CELLS:
            for i, (a, oa, b, ob) in enumerate(getattr(self, cell)):
                lines.append(f'{cell}:{i} {a} "{OPS[oa]}" {b} "{OPS[ob]}"')
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CellGenotype":
        cells = {c: {} for c in CELLS}
        for line in text.strip().splitlines():
            fields = shlex.split(line)
            if len(fields) != 5:
                raise ConfigError(f"malformed genotype line {line!r}")
            cell, node = fields[0].split(":")
            if cell not in cells:
                raise ConfigError(f"unknown cell {cell!r}")
            cells[cell][int(node)] = (int(fields[1]), op_id(fields[2]), int(fields[3]), op_id(fields[4]))
        return cls(*(tuple(cells[c][i] for i in sorted(cells[c])) for c in CELLS))

    @property
    def id(self) -> str:
        return hashlib.sha1(self.to_text().encode()).hexdigest()[:12]


def sample_genotype(rng: np.random.Generator) -> CellGenotype:
    """Uniform inputs and operations, independently per node slot."""
    cells = []
    for _ in CELLS:
        nodes = []
        for i in range(N_NODES):
            a, b = (int(rng.integers(0, i + 2)) for _ in range(2))
            oa, ob = (int(rng.integers(0, len(OPS))) for _ in range(2))
            nodes.append((a, oa, b, ob))
        cells.append(tuple(nodes))
    return CellGenotype(*cells)


def loose_nodes(nodes) -> list:
    used = {idx - 2 for a, _, b, _ in nodes for idx in (a, b) if idx >= 2}
    return [i for i in range(len(nodes)) if i not in used]


# ---------------------------------------------------------------------------
# networks

@dataclass(frozen=True)
class Blueprint:
    n: int = 1
    f: int = 8

    def __post_init__(self):
        if self.n < 1 or self.f < 1:
            raise ConfigError(f"blueprint needs N >= 1 and F >= 1, got N={self.n}, F={self.f}")


def _pool(x, kind, k, stride):
    if k == 2:
        if stride == 1:
            x = F.pad(x, (0, 1, 0, 1), mode="replicate")
            return F.max_pool2d(x, 2, 1) if kind == "max" else F.avg_pool2d(x, 2, 1)
        if kind == "max":
            return F.max_pool2d(x, 2, 2, ceil_mode=True)
        return F.avg_pool2d(x, 2, 2, ceil_mode=True)
    if kind == "max":
        return F.max_pool2d(x, k, stride, padding=k // 2)
    return F.avg_pool2d(x, k, stride, padding=k // 2, count_include_pad=False)


class NasNetwork:
    """Network assembled from a genotype and a blueprint."""

    def __init__(self, genotype: CellGenotype, blueprint=Blueprint(), domain="cifar",
                 weight_norm=True, dtype=torch.float32, seed=0):
        self.genotype = genotype
        self.blueprint = blueprint
        self.in_shape = IMAGE_SHAPES[domain]
        self.weight_norm = weight_norm
        self.params = {}
        self._gen = torch.Generator().manual_seed(seed)
        self._dtype = dtype
        self.cells = self._layout()
        self._init()
        del self._gen

    def _layout(self):
        n, f = self.blueprint.n, self.blueprint.f
        kinds = ["normal"] * n + ["reduction"] + ["normal"] * n + ["reduction"] + ["normal"] * n
        layout = []
        c_pp = c_p = f
        reduced_pp = False
        width = f
        for i, kind in enumerate(kinds):
            if kind == "reduction":
                width *= 2
            layout.append(dict(name=f"cell{i}", kind=kind, c_pp=c_pp, c_p=c_p, width=width,
                               reduce_pp=reduced_pp))
            reduced_pp = kind == "reduction"
            c_pp, c_p = c_p, width
        self.out_width = width
        return layout

    def _conv(self, name, c_in, c_out, kernel):
        self.params.update(weight_params(name, (c_out, c_in, *kernel), self._gen, self._dtype,
                                         self.weight_norm, bias=False))

    def _bn(self, name, c):
        self.params.update(bn_params(name, c, self._dtype))

    def _init(self):
        c_in = self.in_shape[0]
        f = self.blueprint.f
        self._conv("nas.stem", c_in, f, (3, 3))
        self._bn("nas.stem.bn", f)
        for cell in self.cells:
            name, w = cell["name"], cell["width"]
            self._conv(f"{name}.pre0", cell["c_pp"], w, (1, 1))
            self._bn(f"{name}.pre0.bn", w)
            self._conv(f"{name}.pre1", cell["c_p"], w, (1, 1))
            self._bn(f"{name}.pre1.bn", w)
            nodes = getattr(self.genotype, cell["kind"])
            for i, (a, oa, b, ob) in enumerate(nodes):
                for slot, (idx, op) in enumerate(((a, oa), (b, ob))):
                    self._init_op(f"{name}.n{i}.{slot}", op, w, cell["kind"] == "reduction" and idx < 2)
            loose = loose_nodes(nodes)
            self._conv(f"{name}.out", w * len(loose), w, (1, 1))
            self._bn(f"{name}.out.bn", w)
        self.params.update(weight_params("nas.fc", (NUM_CLASSES, self.out_width), self._gen, self._dtype,
                                         self.weight_norm))

    def _init_op(self, name, op, width, strided):
        if op in CONV_KERNELS:
            for j, kernel in enumerate(CONV_KERNELS[op]):
                self._conv(f"{name}.c{j}", width, width, kernel)
            self._bn(f"{name}.bn", width)
        elif op == 0 and strided:
            self._conv(f"{name}.c0", width, width, (1, 1))
            self._bn(f"{name}.bn", width)

    # -- forward

    def _relu_conv_bn(self, params, name, x, ctx, stride=1):
        return batch_norm(params, f"{name}.bn", conv2d(params, name, F.relu(x), stride), ctx)

    def _apply_op(self, params, name, op, x, stride, ctx):
        if op in CONV_KERNELS:
            h = F.relu(x)
            for j, _ in enumerate(CONV_KERNELS[op]):
                h = conv2d(params, f"{name}.c{j}", h, stride if j == 0 else 1)
            return batch_norm(params, f"{name}.bn", h, ctx)
        if op == 0:
            if stride == 1:
                return x
            return batch_norm(params, f"{name}.bn", conv2d(params, f"{name}.c0", F.relu(x), stride), ctx)
        kind, k = POOLS[op]
        return _pool(x, kind, k, stride)

    def _cell(self, params, cell, h_pp, h_p, ctx):
        name = cell["name"]
        s0 = self._relu_conv_bn(params, f"{name}.pre0", h_pp, ctx, 2 if cell["reduce_pp"] else 1)
        s1 = self._relu_conv_bn(params, f"{name}.pre1", h_p, ctx)
        states = [s0, s1]
        reduction = cell["kind"] == "reduction"
        nodes = getattr(self.genotype, cell["kind"])
        for i, (a, oa, b, ob) in enumerate(nodes):
            parts = []
            for slot, (idx, op) in enumerate(((a, oa), (b, ob))):
                stride = 2 if reduction and idx < 2 else 1
                parts.append(self._apply_op(params, f"{name}.n{i}.{slot}", op, states[idx], stride, ctx))
            if parts[0].shape != parts[1].shape:
                raise ConfigError(f"{name} node {i}: operand shapes {tuple(parts[0].shape)} "
                                  f"and {tuple(parts[1].shape)} differ")
            states.append(parts[0] + parts[1])
        out = torch.cat([states[2 + i] for i in loose_nodes(nodes)], dim=1)
        return self._relu_conv_bn(params, f"{name}.out", out, ctx)

    def forward(self, params, x, train=True, stats=None):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ConfigError(f"nas.stem: expected input {self.in_shape}, got {tuple(x.shape[1:])}")
        ctx = Context(train, stats)
        h = batch_norm(params, "nas.stem.bn", conv2d(params, "nas.stem", x), ctx)
        h_pp = h_p = h
        for cell in self.cells:
            h_pp, h_p = h_p, self._cell(params, cell, h_pp, h_p, ctx)
        return linear(params, "nas.fc", F.relu(h_p).mean((2, 3))), ctx.stats

    def channel_widths(self):
        return [c["width"] for c in self.cells]


def build_network(genotype, blueprint=Blueprint(), domain="cifar", weight_norm=True,
                  dtype=torch.float32, seed=0) -> NasNetwork:
    return NasNetwork(genotype, blueprint, domain, weight_norm, dtype, seed)


# ---------------------------------------------------------------------------
# evaluation and search

@dataclass
class EvalResult:
    genotype_id: str
    evaluator: str
    score: float
    steps: int
    wall_time: float
    diverged: bool = False
    genotype: str = ""

    FIELDS = ("genotype_id", "evaluator", "score", "steps", "wall_time", "diverged", "genotype")


class Evaluator:
    """Scores a genotype by briefly training a fresh network and measuring accuracy.

    ``gtn`` trains on the teacher's batches with its meta-learned inner
    hyperparameters; ``real-short``/``real-long`` train on real training
    batches with fixed SGD-with-momentum settings.
    """

    DEFAULT_STEPS = {"gtn": 128, "real-short": 200, "real-long": 2000}

    def __init__(self, kind, splits, teacher=None, hyper=None, steps=None, blueprint=Blueprint(),
                 lr=0.05, momentum=0.9, batch_size=128, dataset="val", dtype=torch.float32):
        if kind not in EVALUATORS:
            raise ConfigError(f"unknown evaluator {kind!r}")
        if kind == "gtn" and (teacher is None or hyper is None):
            raise ConfigError("gtn evaluation needs a trained teacher and its inner hyperparameters")
        self.kind = kind
        self.splits = splits
        self.steps = self.DEFAULT_STEPS[kind] if steps is None else steps
        self.blueprint = blueprint
        self.dataset = getattr(splits, dataset)
        self.dtype = dtype
        if kind == "gtn":
            self.source, self.hyper = teacher, hyper
        else:
            self.source = RealDataSource(splits.train, batch_size, dtype)
            self.hyper = InnerHyper.create(lr, momentum, dtype)

    def __call__(self, genotype: CellGenotype, seed=0) -> EvalResult:
        t0 = time.perf_counter()
        net = build_network(genotype, self.blueprint, self.splits.kind, dtype=self.dtype, seed=seed)
        diverged = False
        try:
            params, stats, _ = run_inner_loop(self.source, net, self.steps, self.hyper, seed)
            score = score_learner(net, params, stats, self.dataset, dtype=self.dtype)
        except DivergedError:
            score, diverged = 0.0, True
        return EvalResult(genotype.id, self.kind, float(score), self.steps, time.perf_counter() - t0,
                          diverged, genotype.to_text())


def candidate_seed(seed, i) -> int:
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def candidates(n, seed):
    """The ``n`` genotypes (with their evaluation seeds) a search with ``seed`` visits."""
    for i in range(n):
        s = candidate_seed(seed, i)
        yield sample_genotype(np.random.default_rng(s)), s


def rank_results(results):
    """Sort by score descending; ties keep genotype-id order so the ranking is order-free."""
    return sorted(results, key=lambda r: (-r.score, r.genotype_id))


def _evaluate_candidate(job):
    evaluator, genotype, seed = job
    return evaluator(genotype, seed)


def random_search(n_candidates, evaluator, seed=0, callback=None, jobs=1):
    """Sample and score ``n_candidates`` genotypes; returns them ranked best first."""
    if n_candidates < 1:
        raise ConfigError("random search needs at least one candidate")
    work = [(evaluator, g, s) for g, s in candidates(n_candidates, seed)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_evaluate_candidate, work))
    else:
        results = []
        for job in work:
            results.append(_evaluate_candidate(job))
            if callback is not None:
                callback(results[-1])
    return rank_results(results)


def write_results(path, results):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EvalResult.FIELDS)
        writer.writeheader()
        for r in results:
            writer.writerow(asdict(r))


def read_results(path):
    with open(path, newline="") as fh:
        return [EvalResult(r["genotype_id"], r["evaluator"], float(r["score"]), int(r["steps"]),
                           float(r["wall_time"]), r["diverged"] == "True", r["genotype"])
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# rank correlation

@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    n: int
    degenerate: bool = False


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    start = 0
    while start < len(values):
        end = start
        while end + 1 < len(values) and sorted_vals[end + 1] == sorted_vals[start]:
            end += 1
        ranks[order[start:end + 1]] = (start + end) / 2 + 1
        start = end + 1
    return ranks


def rank_correlation(xs, ys, top_fraction=None) -> SpearmanResult:
    """Spearman's rho as the Pearson correlation of average ranks.

    With ``top_fraction`` only the ``ceil(n * top_fraction)`` pairs with the
    highest ``xs`` are kept. A side whose ranks are all tied has no defined
    correlation; the result is then ``rho=0`` flagged ``degenerate``.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("score vectors must be one-dimensional and of equal length")
    if top_fraction is not None:
        if not 0 < top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")
        keep = np.argsort(-xs, kind="stable")[:math.ceil(len(xs) * top_fraction)]
        xs, ys = xs[keep], ys[keep]
    if len(xs) < 2:
        raise UndefinedCorrelation(f"need at least 2 pairs, have {len(xs)}")
    rx = average_ranks(xs) - (len(xs) + 1) / 2
    ry = average_ranks(ys) - (len(ys) + 1) / 2
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        return SpearmanResult(0.0, len(xs), True)
    return SpearmanResult(float(np.clip(rx @ ry / denom, -1.0, 1.0)), len(xs))


def correlate_logs(results_a, results_b, top_fraction=None) -> SpearmanResult:
    """Spearman rho between two evaluator logs joined on genotype id."""
    b = {r.genotype_id: r.score for r in results_b}
    pairs = [(r.score, b[r.genotype_id]) for r in results_a if r.genotype_id in b]
    if not pairs:
        raise UndefinedCorrelation("the two logs share no genotypes")
    xs, ys = zip(*pairs)
    return rank_correlation(xs, ys, top_fraction)


def save_genotype(path, genotype):
    Path(path).write_text(genotype.to_text())


def load_genotype(path):
    return CellGenotype.from_text(Path(path).read_text())
