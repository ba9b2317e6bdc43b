"""Nested optimization: SGD-with-momentum inner loop, Adam outer loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from . import autodiff
from .autodiff import DivergedError
from .data import BatchSampler, augment, one_hot
from .learners import instantiate, sample_learner
from .nn import loss as loss_fn
from .teacher import CurriculumVariant, DistilledTensorBank, RealDataSource, TeacherState

log = logging.getLogger(__name__)

LEARNER_DOMAIN = {"mnist": "mnist-proxy", "cifar": "cifar-proxy"}

# purposes for derived seeds
_LEARNER, _PLAN, _OUTER, _EVAL = 0, 1, 2, 3


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


class InnerHyper:
    """Meta-learned inner-loop learning rate and momentum.

    Stored as free scalars: lr = exp(log_lr), momentum = sigmoid(logit_momentum),
    so lr > 0 and 0 < momentum < 1 whatever the outer optimizer does.
    """

    def __init__(self, log_lr: torch.Tensor, logit_momentum: torch.Tensor):
        self.log_lr = log_lr
        self.logit_momentum = logit_momentum

    @classmethod
    def create(cls, lr=0.02, momentum=0.5, dtype=torch.float32):
        log_lr = torch.tensor(math.log(lr), dtype=dtype, requires_grad=True)
        logit = torch.tensor(math.log(momentum / (1 - momentum)), dtype=dtype, requires_grad=True)
        return cls(log_lr, logit)

    @property
    def lr(self):
        return torch.exp(self.log_lr)

    @property
    def momentum(self):
        return torch.sigmoid(self.logit_momentum)

    @property
    def params(self):
        return {"hyper.log_lr": self.log_lr, "hyper.logit_momentum": self.logit_momentum}


def momentum_update(params, velocity, grads, lr, momentum):
    """v' = momentum * v + grad;  theta' = theta - lr * v'."""
    new_v = [momentum * v + g for v, g in zip(velocity, grads)]
    new_p = [p - lr * v for p, v in zip(params, new_v)]
    return new_p, new_v


def inner_step(model, params: dict, velocity: dict, x, y, lr, momentum, create_graph=True,
               loss_kind="cross_entropy"):
    """One differentiable SGD-with-momentum step; returns (params, velocity, loss, stats)."""
    names = list(params)
    leaves = [params[n] for n in names]
    if not create_graph:
        leaves = [p.detach().requires_grad_() for p in leaves]
    out, stats = model.forward(dict(zip(names, leaves)), x, train=True)
    loss = loss_fn(loss_kind, out, y)
    if not torch.isfinite(loss):
        raise DivergedError("non-finite inner loss")
    grads = torch.autograd.grad(loss, leaves, create_graph=create_graph, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]
    vel = [velocity[n] for n in names]
    if create_graph:
        new_p, new_v = momentum_update(leaves, vel, grads, lr, momentum)
    else:
        with torch.no_grad():
            new_p, new_v = momentum_update([p.detach() for p in leaves], vel, grads,
                                           _value(lr), _value(momentum))
    return dict(zip(names, new_p)), dict(zip(names, new_v)), loss.detach(), stats


def _value(t):
    return t.detach() if isinstance(t, torch.Tensor) else t


class InnerLoop:
    """Binds a model, a data source and hyperparameters into an unrollable step.

    The state tuple is ``(*params, *velocity)`` in the model's parameter
    order; the side output is the flattened batch-norm statistics of the
    step's batch, which evaluation reuses (batch-norm momentum 0).
    """

    def __init__(self, model, source, plan, hyper: InnerHyper, loss_kind="cross_entropy"):
        self.model = model
        self.source = source
        self.plan = plan
        self.hyper = hyper
        self.loss_kind = loss_kind
        self.names = list(model.params)
        self.stat_keys = None
        self.losses = {}

    def initial_state(self):
        params = [self.model.params[n].detach().requires_grad_() for n in self.names]
        return tuple(params) + tuple(torch.zeros_like(p) for p in params)

    def step(self, t, state, create_graph):
        n = len(self.names)
        params = dict(zip(self.names, state[:n]))
        velocity = dict(zip(self.names, state[n:]))
        with torch.set_grad_enabled(create_graph):
            x, y = self.source.batch(self.plan, t)
        try:
            params, velocity, loss, stats = inner_step(
                self.model, params, velocity, x, y, self.hyper.lr, self.hyper.momentum,
                create_graph, self.loss_kind)
        except DivergedError as err:
            raise DivergedError(f"{err} at inner step {t}", step=t) from None
        self.losses[t] = float(loss)
        self.stat_keys = list(stats)
        side = tuple(s for k in self.stat_keys for s in stats[k])
        return tuple(params[k] for k in self.names) + tuple(velocity[k] for k in self.names), side

    def unpack(self, state, side):
        n = len(self.names)
        params = dict(zip(self.names, state[:n]))
        keys = self.stat_keys or []
        stats = {k: (side[2 * i], side[2 * i + 1]) for i, k in enumerate(keys)} if side else {}
        return params, stats


@dataclass
class InnerTrace:
    schedule: autodiff.CheckpointSchedule
    losses: list
    plan_seed: int

    @property
    def steps(self):
        return self.schedule.boundaries


def run_inner_loop(source, model, steps, hyper: InnerHyper, plan_seed, create_graph=False,
                   loss_kind="cross_entropy"):
    """Train ``model`` for ``steps`` batches; returns (params, stats, trace)."""
    loop = InnerLoop(model, source, source.plan(plan_seed, steps), hyper, loss_kind)
    state, side, schedule = autodiff.unroll(loop.step, loop.initial_state(), steps, create_graph)
    params, stats = loop.unpack(state, side)
    trace = InnerTrace(schedule, [loop.losses[t] for t in range(steps)], plan_seed)
    return params, stats, trace


def evaluate(model, params, stats, dataset, chunk=1000, dtype=torch.float32):
    """Accuracy in eval mode using the stored last-batch statistics."""
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), chunk):
            x, y = dataset.tensors(np.arange(start, min(start + chunk, len(dataset))), dtype)
            out, _ = model.forward(params, x, train=False, stats=stats)
            correct += int((out.argmax(1) == y).sum())
    return correct / len(dataset)


def predict_proba(model, params, stats, dataset, chunk=1000, dtype=torch.float32):
    outs = []
    with torch.no_grad():
        for start in range(0, len(dataset), chunk):
            x, _ = dataset.tensors(np.arange(start, min(start + chunk, len(dataset))), dtype)
            out, _ = model.forward(params, x, train=False, stats=stats)
            outs.append(torch.softmax(out.double(), dim=1))
    return torch.cat(outs)


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.betas
        with torch.no_grad():
            for name, p in params.items():
                g = grads[name]
                m = self.m.get(name, torch.zeros_like(p)) * b1 + (1 - b1) * g
                v = self.v.get(name, torch.zeros_like(p)) * b2 + (1 - b2) * g * g
                self.m[name], self.v[name] = m, v
                m_hat = m / (1 - b1 ** self.t)
                v_hat = v / (1 - b2 ** self.t)
                p -= self.lr * m_hat / (torch.sqrt(v_hat) + self.eps)


def clip_global_norm(grads: dict, max_norm):
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


@dataclass
class OuterConfig:
    domain: str = "mnist"
    source: str = "teacher"               # teacher | distilled | real
    variant: str = "full-curriculum"
    inner_steps: int = 32
    inner_batch: int = 128
    outer_batch: int = 128
    iterations: int = 2000
    outer_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_lr: float = 0.02
    init_momentum: float = 0.5
    seed: int = 0
    weight_norm: bool = True
    checkpointing: bool = True
    clip_norm: float = 0.0                # 0 disables clipping
    eval_interval: int = 100
    eval_learners: int = 1
    learner_width: float = 1.0
    generator_width: float = 1.0
    latent: int = 128
    xy: bool = False
    bank_batches: int = 0                 # 0 -> one bank batch per inner step
    divergence_threshold: float = 1e4
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.inner_steps < 1 or self.inner_batch < 1 or self.outer_batch < 1:
            raise ValueError("inner steps and batch sizes must be >= 1")
        if self.source not in ("teacher", "distilled", "real"):
            raise ValueError(f"unknown source {self.source!r}")
        CurriculumVariant(self.variant)

    @property
    def n_bank_batches(self):
        return self.bank_batches or self.inner_steps

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def mnist_config(**overrides) -> OuterConfig:
    """Table-2 settings."""
    return OuterConfig(**{**dict(domain="mnist", inner_steps=32, inner_batch=128, outer_batch=128,
                                 iterations=2000, outer_lr=0.01, beta1=0.9, beta2=0.999),
                          **overrides})


def cifar_config(**overrides) -> OuterConfig:
    """Table-3 settings."""
    return OuterConfig(**{**dict(domain="cifar", inner_steps=128, inner_batch=128, outer_batch=256,
                                 iterations=1700, outer_lr=0.002, beta1=0.9, beta2=0.9,
                                 adam_eps=1e-5), **overrides})


def build_source(config: OuterConfig, splits, dtype=torch.float32):
    seed = derive_seed(config.seed, 99)
    if config.source == "teacher":
        return TeacherState.create(config.domain, config.variant, seed, config.n_bank_batches,
                                   config.inner_batch, config.generator_width, config.weight_norm,
                                   config.xy, config.latent, dtype)
    if config.source == "distilled":
        return DistilledTensorBank.create(config.domain, seed, config.n_bank_batches,
                                          config.inner_batch, dtype)
    return RealDataSource(splits.train, config.inner_batch, dtype)


@dataclass
class ExperimentRecord:
    config: dict
    rows: list = field(default_factory=list)

    COLUMNS = ("iteration", "meta_loss", "val_few_step_acc", "alpha", "beta", "wall_time")

    def without_time(self):
        # NaN marks rows without validation; map it to None so equal records compare equal
        return [{k: None if isinstance(v, float) and math.isnan(v) else v
                 for k, v in r.items() if k != "wall_time"} for r in self.rows]

    def same_as(self, other) -> bool:
        """Equality of everything except wall-clock timings."""
        return self.config == other.config and self.without_time() == other.without_time()


class MetaTrainer:
    """One meta-training run. State is fully determined by (config, iteration,
    source params, hyper, Adam moments) so it checkpoints and resumes exactly."""

    def __init__(self, config: OuterConfig, splits, source=None, hyper=None, adam=None,
                 iteration=0, dtype=torch.float32):
        self.config = config
        self.splits = splits
        self.dtype = dtype
        self.source = source if source is not None else build_source(config, splits, dtype)
        self.hyper = hyper if hyper is not None else InnerHyper.create(config.init_lr, config.init_momentum, dtype)
        self.adam = adam if adam is not None else Adam(config.outer_lr, (config.beta1, config.beta2), config.adam_eps)
        self.iteration = iteration
        self.learner_domain = LEARNER_DOMAIN[config.domain]
        self.outer_sampler = None
        if splits is not None:
            self.outer_sampler = BatchSampler(len(splits.train), config.outer_batch,
                                              derive_seed(config.seed, _OUTER))

    def meta_params(self) -> dict:
        return {**self.source.params, **self.hyper.params}

    def fresh_learner(self, iteration, purpose=_LEARNER):
        spec = sample_learner(self.learner_domain, derive_seed(self.config.seed, iteration, purpose),
                              self.config.learner_width)
        return instantiate(spec, self.config.weight_norm, self.dtype)

    def outer_batch(self, iteration):
        idx = self.outer_sampler.indices(iteration)
        x, y = self.splits.train.tensors(idx, self.dtype)
        x = augment(x, self.config.domain, np.random.default_rng(derive_seed(self.config.seed, iteration, _OUTER)))
        return x, one_hot(y, self.dtype)

    def meta_gradient(self, learner, plan_seed, real_x, real_y):
        """Meta-loss and its gradient for every meta-parameter."""
        cfg = self.config
        loop = InnerLoop(learner, self.source, self.source.plan(plan_seed, cfg.inner_steps),
                         self.hyper, cfg.loss)
        wrt = self.meta_params()

        def final(state, side):
            params, stats = loop.unpack(state, side)
            out, _ = learner.forward(params, real_x, train=False, stats=stats)
            return loss_fn(cfg.loss, out, real_y)

        if cfg.checkpointing:
            _, _, schedule = autodiff.unroll(loop.step, loop.initial_state(), cfg.inner_steps, False)
            meta_loss, grads = autodiff.checkpointed_backward(schedule, loop.step, final, wrt)
        else:
            state, side, schedule = autodiff.unroll(loop.step, loop.initial_state(), cfg.inner_steps, True)
            meta_loss = final(state, side)
            grads = autodiff.metagrad(meta_loss, wrt, schedule)
            meta_loss = meta_loss.detach()
        return float(meta_loss), grads

    def outer_step(self):
        cfg = self.config
        it = self.iteration
        learner = self.fresh_learner(it)
        real_x, real_y = self.outer_batch(it)
        try:
            meta_loss, grads = self.meta_gradient(learner, derive_seed(cfg.seed, it, _PLAN), real_x, real_y)
        except DivergedError as err:
            raise DivergedError(f"outer iteration {it}: {err}", step=err.step, iteration=it) from None
        if not math.isfinite(meta_loss) or meta_loss > cfg.divergence_threshold:
            raise DivergedError(f"outer iteration {it}: meta-loss {meta_loss}", iteration=it)
        if cfg.clip_norm:
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
        self.adam.step(self.meta_params(), grads)
        self.iteration += 1
        return meta_loss

    def few_step_score(self, dataset, iteration, n_learners=1, steps=None):
        """Mean accuracy of freshly sampled learners trained on the source."""
        steps = self.config.inner_steps if steps is None else steps
        accs = []
        for k in range(n_learners):
            learner = self.fresh_learner(derive_seed(iteration, k), _EVAL)
            params, stats, _ = run_inner_loop(self.source, learner, steps, self.hyper,
                                              derive_seed(self.config.seed, iteration, k, _EVAL),
                                              loss_kind=self.config.loss)
            accs.append(evaluate(learner, params, stats, dataset, dtype=self.dtype))
        return float(np.mean(accs))

    def train(self, iterations=None, record=None, callback=None) -> ExperimentRecord:
        cfg = self.config
        end = cfg.iterations if iterations is None else self.iteration + iterations
        record = record if record is not None else ExperimentRecord(cfg.to_dict())
        while self.iteration < end:
            t0 = time.perf_counter()
            it = self.iteration
            meta_loss = self.outer_step()
            val = float("nan")
            if cfg.eval_interval and ((it + 1) % cfg.eval_interval == 0 or it + 1 == cfg.iterations):
                val = self.few_step_score(self.splits.val, it, cfg.eval_learners)
            record.rows.append(dict(
                iteration=it, meta_loss=meta_loss, val_few_step_acc=val,
                alpha=float(self.hyper.lr.detach()), beta=float(self.hyper.momentum.detach()),
                wall_time=time.perf_counter() - t0))
            if it % 50 == 0 or not math.isnan(val):
                log.info("iter %d meta_loss %.4f val %.4f lr %.4f mom %.3f", it, meta_loss, val,
                         float(self.hyper.lr.detach()), float(self.hyper.momentum.detach()))
            if callback is not None:
                callback(self, record)
        return record


def train(config: OuterConfig, splits, callback=None):
    """Run a full meta-training; returns (ExperimentRecord, MetaTrainer)."""
    trainer = MetaTrainer(config, splits)
    record = trainer.train(callback=callback)
    return record, trainer
