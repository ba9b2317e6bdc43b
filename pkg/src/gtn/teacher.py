"""Training-data sources: the generative teacher and its two baselines.

Every source exposes the same small contract so the meta-trainer never needs
to know which one it drives:

``params``
    dict of meta-learned leaf tensors (may be empty);
``plan(seed, steps)``
    per-episode randomness, sampled up front so a step can be recomputed
    bit-for-bit during checkpointed differentiation;
``batch(plan, t)``
    the ``t``-th inner-loop batch ``(x, y)`` with ``y`` a class distribution,
    differentiable w.r.t. ``params``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .data import IMAGE_SHAPES, NUM_CLASSES, BatchSampler, augment, one_hot
from .nn import LayerSpec, Network

LATENT_DIM = 128
BANK_BATCHES = 32
BANK_BATCH_SIZE = 128


class CurriculumExhausted(IndexError):
    pass


class CurriculumVariant(str, Enum):
    NO_CURRICULUM = "no-curriculum"
    ALL_SHUFFLED = "all-shuffled"
    SHUFFLED_BATCH = "shuffled-batch"
    FULL_CURRICULUM = "full-curriculum"

    @property
    def has_bank(self):
        return self is not CurriculumVariant.NO_CURRICULUM


def round_robin_labels(n_batches, batch_size):
    """Fixed class assignment for a learned bank; every batch is class-balanced."""
    return torch.arange(n_batches * batch_size).remainder(NUM_CLASSES).reshape(n_batches, batch_size)


def _episode_rng(seed, *keys):
    return np.random.default_rng([int(seed), *keys])


@dataclass(frozen=True)
class EpisodePlan:
    seed: int
    order: np.ndarray | None = None


class Generator:
    """Conditional generator: (z, one-hot y) -> image in [-1, 1].

    Layout: FC(1024) -> FC(128 * (H/4)^2) -> reshape -> [2x upsample, conv 64,
    BN, LeakyReLU] -> [2x upsample, conv C, tanh], BN + LeakyReLU after both FC
    layers. ``width`` scales every hidden width. With ``xy=True`` the input is
    z alone and a softmax head emits soft labels from the first hidden layer.
    """

    def __init__(self, domain="mnist", latent=LATENT_DIM, width=1.0, weight_norm=True, xy=False):
        self.domain = domain
        self.latent = latent
        self.width = width
        self.xy = xy
        c_out, h, _ = IMAGE_SHAPES[domain]
        hidden = max(1, round(1024 * width))
        c0 = max(1, round(128 * width))
        c1 = max(1, round(64 * width))
        s = h // 4
        in_dim = latent if xy else latent + NUM_CLASSES
        self.trunk = Network(
            [LayerSpec("fc", hidden), LayerSpec("batchnorm"), LayerSpec("activation")],
            (in_dim,), weight_norm, prefix="gen.trunk.")
        self.image = Network(
            [LayerSpec("fc", c0 * s * s), LayerSpec("batchnorm"), LayerSpec("activation"),
             LayerSpec("reshape", shape=(c0, s, s)),
             LayerSpec("upsample"), LayerSpec("conv", c1), LayerSpec("batchnorm"), LayerSpec("activation"),
             LayerSpec("upsample"), LayerSpec("conv", c_out), LayerSpec("activation", fn="tanh")],
            (hidden,), weight_norm, prefix="gen.image.")
        self.label = Network([LayerSpec("fc", NUM_CLASSES)], (hidden,), weight_norm,
                             prefix="gen.label.") if xy else None

    def init(self, gen, dtype=torch.float32):
        params = self.trunk.init(gen, dtype)
        params.update(self.image.init(gen, dtype))
        if self.label is not None:
            params.update(self.label.init(gen, dtype))
        return params

    def __call__(self, params, z, y=None):
        inp = z if self.xy else torch.cat([z, y], dim=1)
        h, _ = self.trunk.forward(params, inp, train=True)
        x, _ = self.image.forward(params, h, train=True)
        if self.label is None:
            return x, y
        logits, _ = self.label.forward(params, h, train=True)
        return x, torch.softmax(logits, dim=1)


class TeacherState:
    """Generator parameters plus, for curriculum variants, a learned z bank."""

    kind = "teacher"

    def __init__(self, generator: Generator, params: dict, variant=CurriculumVariant.FULL_CURRICULUM,
                 n_batches=BANK_BATCHES, batch_size=BANK_BATCH_SIZE):
        self.generator = generator
        self.params = params
        self.variant = CurriculumVariant(variant)
        self.n_batches = n_batches
        self.batch_size = batch_size
        self.labels = round_robin_labels(n_batches, batch_size) if self.variant.has_bank else None
        if self.variant.has_bank != ("bank.z" in params):
            raise ValueError("a z bank must be present exactly for curriculum variants")

    @classmethod
    def create(cls, domain="mnist", variant=CurriculumVariant.FULL_CURRICULUM, seed=0,
               n_batches=BANK_BATCHES, batch_size=BANK_BATCH_SIZE, width=1.0,
               weight_norm=True, xy=False, latent=LATENT_DIM, dtype=torch.float32):
        gen = torch.Generator().manual_seed(seed)
        generator = Generator(domain, latent, width, weight_norm, xy)
        params = generator.init(gen, dtype)
        if CurriculumVariant(variant).has_bank:
            params["bank.z"] = torch.randn(n_batches, batch_size, latent, generator=gen, dtype=dtype)
        for p in params.values():
            p.requires_grad_(True)
        return cls(generator, params, variant, n_batches, batch_size)

    def with_batch_size(self, batch_size):
        """View of the same parameters emitting a different NoCurriculum batch size."""
        if self.variant.has_bank:
            raise ValueError("only the no-curriculum teacher can change its batch size")
        return TeacherState(self.generator, self.params, self.variant, self.n_batches, batch_size)

    @property
    def bank_size(self):
        return self.n_batches * self.batch_size

    def generate_batch(self, z, y):
        x, _ = self.generator(self.params, z, y)
        return x

    def xy_generate(self, z):
        if not self.generator.xy:
            raise ValueError("teacher was not built in XY mode")
        return self.generator(self.params, z)

    def plan(self, seed, steps=None) -> EpisodePlan:
        rng = _episode_rng(seed, 0)
        if self.variant is CurriculumVariant.ALL_SHUFFLED:
            return EpisodePlan(seed, rng.permutation(self.bank_size))
        if self.variant is CurriculumVariant.SHUFFLED_BATCH:
            return EpisodePlan(seed, rng.permutation(self.n_batches))
        if self.variant is CurriculumVariant.FULL_CURRICULUM:
            return EpisodePlan(seed, np.arange(self.n_batches))
        return EpisodePlan(seed)

    def next_inner_batch(self, plan: EpisodePlan, t):
        dtype = next(iter(self.params.values())).dtype
        if self.variant is CurriculumVariant.NO_CURRICULUM:
            rng = _episode_rng(plan.seed, 1, t)
            z = torch.as_tensor(rng.standard_normal((self.batch_size, self.generator.latent)), dtype=dtype)
            labels = torch.as_tensor(rng.integers(0, NUM_CLASSES, self.batch_size))
        else:
            if t >= self.n_batches:
                raise CurriculumExhausted(f"curriculum has {self.n_batches} batches, step {t} requested")
            bank = self.params["bank.z"]
            if self.variant is CurriculumVariant.ALL_SHUFFLED:
                idx = torch.as_tensor(plan.order[t * self.batch_size:(t + 1) * self.batch_size])
                z = bank.reshape(-1, bank.shape[-1])[idx]
                labels = self.labels.reshape(-1)[idx]
            else:
                b = int(plan.order[t])
                z = bank[b]
                labels = self.labels[b]
        y = one_hot(labels, dtype)
        if self.generator.xy:
            return self.generator(self.params, z)
        return self.generator(self.params, z, y)

    batch = next_inner_batch


class DistilledTensorBank:
    """Dataset-distillation baseline: the images themselves are the parameters.

    Batches are served in a fixed order (batch ``t`` of the bank).
    """

    kind = "distilled"

    def __init__(self, params, n_batches, batch_size):
        self.params = params
        self.n_batches = n_batches
        self.batch_size = batch_size
        self.labels = round_robin_labels(n_batches, batch_size)

    @classmethod
    def create(cls, domain="mnist", seed=0, n_batches=BANK_BATCHES, batch_size=BANK_BATCH_SIZE,
               dtype=torch.float32):
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(n_batches, batch_size, *IMAGE_SHAPES[domain], generator=gen, dtype=dtype)
        return cls({"bank.x": x.requires_grad_(True)}, n_batches, batch_size)

    def plan(self, seed, steps=None):
        return EpisodePlan(seed, np.arange(self.n_batches))

    def batch(self, plan, t):
        if t >= self.n_batches:
            raise CurriculumExhausted(f"bank has {self.n_batches} batches, step {t} requested")
        x = self.params["bank.x"][t]
        return x, one_hot(self.labels[t], x.dtype)


class RealDataSource:
    """Random real training batches (with augmentation for CIFAR)."""

    kind = "real"

    def __init__(self, dataset, batch_size, dtype=torch.float32):
        self.dataset = dataset
        self.batch_size = batch_size
        self.dtype = dtype
        self.params = {}

    def plan(self, seed, steps=None):
        return EpisodePlan(seed)

    def batch(self, plan, t):
        sampler = BatchSampler(len(self.dataset), self.batch_size, plan.seed)
        idx = sampler.indices(t)
        x, y = self.dataset.tensors(idx, self.dtype)
        x = augment(x, self.dataset.kind, _episode_rng(plan.seed, 2, t))
        return x, one_hot(y, self.dtype)


def source_batch(source, plan, t):
    return source.batch(plan, t)
