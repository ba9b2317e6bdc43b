"""Random learner architectures sampled afresh for every outer iteration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import IMAGE_SHAPES, NUM_CLASSES
from .nn import ConfigError, LayerSpec, Network

# inclusive filter ranges per domain
MNIST_RANGES = {"conv1": (32, 128), "conv2": (64, 256), "fc": (64, 256)}
CIFAR_RANGES = {"conv1": (32, 128), "conv": (64, 256)}
CIFAR_STRIDES = (1, 2, 1, 2, 1)

DOMAIN_DATA = {"mnist-proxy": "mnist", "cifar-proxy": "cifar"}


def scaled_range(lo, hi, width=1.0):
    """Shrink an integer range by ``width`` (desk-scale runs); endpoints stay >= 1."""
    if width == 1.0:
        return lo, hi
    lo_s = max(1, round(lo * width))
    return lo_s, max(lo_s, round(hi * width))


def _draw(rng, lo, hi, width):
    lo, hi = scaled_range(lo, hi, width)
    return int(rng.integers(lo, hi + 1))


@dataclass(frozen=True)
class LearnerSpec:
    domain: str
    layers: tuple
    seed: int
    width: float = 1.0

    @property
    def in_shape(self):
        return IMAGE_SHAPES[DOMAIN_DATA[self.domain]]

    def filters(self):
        return [l.out for l in self.layers if l.kind in ("conv", "fc")]

    def to_text(self) -> str:
        lines = [f"domain = {self.domain}", f"seed = {self.seed}", f"width = {self.width}"]
        lines += [f"layer{i} = {l.to_text()}" for i, l in enumerate(self.layers)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = dict(line.split(" = ", 1) for line in text.strip().splitlines())
        layers = []
        i = 0
        while f"layer{i}" in fields:
            layers.append(LayerSpec.from_text(fields[f"layer{i}"]))
            i += 1
        return cls(fields["domain"], tuple(layers), int(fields["seed"]), float(fields["width"]))


def _conv_block(out, stride=1):
    return [LayerSpec("conv", out, 3, stride), LayerSpec("batchnorm"), LayerSpec("activation")]


def sample_learner(domain: str, seed: int, width=1.0) -> LearnerSpec:
    rng = np.random.default_rng(seed)
    if domain == "mnist-proxy":
        c1 = _draw(rng, *MNIST_RANGES["conv1"], width)
        c2 = _draw(rng, *MNIST_RANGES["conv2"], width)
        hidden = _draw(rng, *MNIST_RANGES["fc"], width)
        layers = (_conv_block(c1) + [LayerSpec("maxpool", kernel=2, stride=2)]
                  + _conv_block(c2) + [LayerSpec("maxpool", kernel=2, stride=2)]
                  + [LayerSpec("flatten"), LayerSpec("fc", hidden), LayerSpec("batchnorm"),
                     LayerSpec("activation"), LayerSpec("fc", NUM_CLASSES)])
    elif domain == "cifar-proxy":
        widths = [_draw(rng, *CIFAR_RANGES["conv1"], width)]
        widths += [_draw(rng, *CIFAR_RANGES["conv"], width) for _ in range(4)]
        layers = []
        for w, s in zip(widths, CIFAR_STRIDES):
            layers += _conv_block(w, s)
        layers += [LayerSpec("globalavgpool"), LayerSpec("fc", NUM_CLASSES)]
    else:
        raise ConfigError(f"unknown learner domain {domain!r}")
    return LearnerSpec(domain, tuple(layers), int(seed), width)


class Learner:
    """A sampled architecture bound to freshly initialized parameters."""

    def __init__(self, spec: LearnerSpec, weight_norm=True, dtype=torch.float32):
        self.spec = spec
        self.network = Network(spec.layers, spec.in_shape, weight_norm, prefix="learner.")
        if self.network.out_shape != (NUM_CLASSES,):
            raise ConfigError(f"learner produces {self.network.out_shape}, expected ({NUM_CLASSES},)")
        self.params = self.network.init(torch.Generator().manual_seed(spec.seed), dtype)

    def forward(self, params, x, train=True, stats=None):
        return self.network.forward(params, x, train, stats)


def instantiate(spec: LearnerSpec, weight_norm=True, dtype=torch.float32) -> Learner:
    return Learner(spec, weight_norm, dtype)
