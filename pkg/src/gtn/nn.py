"""Functional layer kit shared by the generator, the learners and NAS cells.

Parameters live in flat ``{name: tensor}`` dicts instead of module state so
that an inner loop can produce a new dict per step and keep every update on
the autograd tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
WN_EPS = 1e-12

KINDS = (
    "conv", "fc", "batchnorm", "maxpool", "avgpool", "globalavgpool",
    "activation", "flatten", "upsample", "reshape",
)


class ConfigError(ValueError):
    """Raised when a network description is inconsistent."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 3
    stride: int = 1
    fn: str = "leaky_relu"
    slope: float = LEAKY_SLOPE
    shape: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "fc") and self.out < 1:
            raise ConfigError(f"{self.kind} layer needs a positive width, got {self.out}")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError("kernel size must be positive and stride >= 1")

    def to_text(self) -> str:
        parts = [self.kind]
        if self.kind in ("conv", "fc"):
            parts.append(f"out={self.out}")
        if self.kind in ("conv", "maxpool", "avgpool"):
            parts += [f"kernel={self.kernel}", f"stride={self.stride}"]
        if self.kind == "activation":
            parts.append(f"fn={self.fn}")
            if self.fn == "leaky_relu":
                parts.append(f"slope={self.slope}")
        if self.kind == "reshape":
            parts.append("shape=" + "x".join(str(s) for s in self.shape))
        return " ".join(parts)

    @classmethod
    def from_text(cls, text: str) -> "LayerSpec":
        kind, *fields = text.split()
        kw = {}
        for field in fields:
            key, value = field.split("=", 1)
            if key in ("out", "kernel", "stride"):
                kw[key] = int(value)
            elif key == "slope":
                kw[key] = float(value)
            elif key == "shape":
                kw[key] = tuple(int(s) for s in value.split("x"))
            else:
                kw[key] = value
        return cls(kind, **kw)


class Context:
    """Batch-norm bookkeeping for one forward pass.

    In train mode every batch-norm layer normalizes with the current batch and
    writes its (mean, var) into ``stats``. In eval mode the layers read them
    back; a missing entry falls back to the statistics of the batch at hand.
    """

    def __init__(self, train: bool = True, stats: dict | None = None):
        self.train = train
        self.stats = {} if stats is None else dict(stats)


# ---------------------------------------------------------------------------
# weight normalization and initialization

def _row_view(t: torch.Tensor, ndim: int) -> torch.Tensor:
    return t.reshape(-1, *([1] * (ndim - 1)))


def weight_normalize(v: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Return ``g * v / ||v||`` with one norm and one gain per output row."""
    norm = torch.sqrt(v.reshape(v.shape[0], -1).pow(2).sum(1) + WN_EPS)
    return _row_view(g / norm, v.dim()) * v


def kaiming_std(fan_in: int, slope: float = LEAKY_SLOPE) -> float:
    return math.sqrt(2.0 / ((1.0 + slope ** 2) * max(fan_in, 1)))


def kaiming_init(shape, gen: torch.Generator, dtype=torch.float32, slope=LEAKY_SLOPE):
    """Kaiming-normal weights for a (out, in, ...) shaped tensor."""
    fan_in = int(math.prod(shape[1:]))
    w = torch.randn(*shape, generator=gen, dtype=dtype)
    return w * kaiming_std(fan_in, slope)


def weight_params(name, shape, gen, dtype, weight_norm=True, bias=True):
    w = kaiming_init(shape, gen, dtype)
    params = {}
    if weight_norm:
        params[f"{name}.v"] = w
        params[f"{name}.g"] = w.reshape(shape[0], -1).norm(dim=1)
    else:
        params[f"{name}.w"] = w
    if bias:
        params[f"{name}.b"] = torch.zeros(shape[0], dtype=dtype)
    return params


def bn_params(name, channels, dtype):
    return {
        f"{name}.gamma": torch.ones(channels, dtype=dtype),
        f"{name}.beta": torch.zeros(channels, dtype=dtype),
    }


def get_weight(params, name):
    if f"{name}.v" in params:
        return weight_normalize(params[f"{name}.v"], params[f"{name}.g"])
    return params[f"{name}.w"]


# ---------------------------------------------------------------------------
# primitives

def conv2d(params, name, x, stride=1, padding="same"):
    w = get_weight(params, name)
    if padding == "same":
        padding = (w.shape[2] // 2, w.shape[3] // 2)
    return F.conv2d(x, w, params.get(f"{name}.b"), stride=stride, padding=padding)


def linear(params, name, x):
    return F.linear(x, get_weight(params, name), params.get(f"{name}.b"))


def batch_norm(params, name, x, ctx: Context):
    dims = (0,) if x.dim() == 2 else (0, 2, 3)
    if ctx.train or name not in ctx.stats:
        mean = x.mean(dims)
        var = x.var(dims, unbiased=False)
        if ctx.train:
            ctx.stats[name] = (mean, var)
    else:
        mean, var = ctx.stats[name]
    shape = (1, -1) if x.dim() == 2 else (1, -1, 1, 1)
    xhat = (x - mean.reshape(shape)) / torch.sqrt(var.reshape(shape) + BN_EPS)
    return xhat * params[f"{name}.gamma"].reshape(shape) + params[f"{name}.beta"].reshape(shape)


def activation(x, fn="leaky_relu", slope=LEAKY_SLOPE):
    if fn == "leaky_relu":
        return F.leaky_relu(x, slope)
    if fn == "relu":
        return F.relu(x)
    if fn == "tanh":
        return torch.tanh(x)
    if fn == "softmax":
        return torch.softmax(x, dim=1)
    if fn == "identity":
        return x
    raise ConfigError(f"unknown activation {fn!r}")


# ---------------------------------------------------------------------------
# sequential networks

class Network:
    """An ordered stack of :class:`LayerSpec` with functional parameters."""

    def __init__(self, layers, in_shape, weight_norm=True, prefix=""):
        self.layers = tuple(layers)
        self.in_shape = tuple(in_shape)
        self.weight_norm = weight_norm
        self.prefix = prefix
        self.names = []
        self._plan = []
        shape = self.in_shape
        for i, spec in enumerate(self.layers):
            name = f"{prefix}{i}.{spec.kind}"
            self.names.append(name)
            new_shape = self._infer(spec, shape, name)
            self._plan.append((spec, name, shape))
            shape = new_shape
        self.out_shape = shape

    @staticmethod
    def _infer(spec, shape, name):
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"{name}: conv expects a CxHxW input, got {shape}")
            c, h, w = shape
            return (spec.out, -(-h // spec.stride), -(-w // spec.stride))
        if spec.kind == "fc":
            if len(shape) != 1:
                raise ConfigError(f"{name}: fc expects a flat input, got {shape}")
            return (spec.out,)
        if spec.kind in ("maxpool", "avgpool"):
            if len(shape) != 3:
                raise ConfigError(f"{name}: pooling expects a CxHxW input, got {shape}")
            c, h, w = shape
            if h < spec.kernel or w < spec.kernel:
                raise ConfigError(f"{name}: {h}x{w} input is smaller than the pooling window")
            return (c, (h - spec.kernel) // spec.stride + 1, (w - spec.kernel) // spec.stride + 1)
        if spec.kind == "globalavgpool":
            return (shape[0],)
        if spec.kind == "flatten":
            return (int(math.prod(shape)),)
        if spec.kind == "upsample":
            c, h, w = shape
            return (c, 2 * h, 2 * w)
        if spec.kind == "reshape":
            if math.prod(spec.shape) != math.prod(shape):
                raise ConfigError(f"{name}: cannot reshape {shape} into {spec.shape}")
            return tuple(spec.shape)
        return shape

    def init(self, gen: torch.Generator, dtype=torch.float32) -> dict:
        params = {}
        for spec, name, shape in self._plan:
            if spec.kind == "conv":
                params.update(weight_params(
                    name, (spec.out, shape[0], spec.kernel, spec.kernel), gen, dtype, self.weight_norm))
            elif spec.kind == "fc":
                params.update(weight_params(name, (spec.out, shape[0]), gen, dtype, self.weight_norm))
            elif spec.kind == "batchnorm":
                params.update(bn_params(name, shape[0], dtype))
        return params

    def forward(self, params, x, train=True, stats=None):
        """Run the stack; returns ``(output, batch_stats)``."""
        if tuple(x.shape[1:]) != self.in_shape:
            first = self.names[0] if self.names else "input"
            raise ConfigError(f"{first}: expected input {self.in_shape}, got {tuple(x.shape[1:])}")
        ctx = Context(train, stats)
        for spec, name, _ in self._plan:
            x = self._apply(spec, name, params, x, ctx)
        return x, ctx.stats

    def _apply(self, spec, name, params, x, ctx):
        kind = spec.kind
        if kind == "conv":
            return conv2d(params, name, x, stride=spec.stride)
        if kind == "fc":
            return linear(params, name, x)
        if kind == "batchnorm":
            return batch_norm(params, name, x, ctx)
        if kind == "activation":
            return activation(x, spec.fn, spec.slope)
        if kind == "maxpool":
            return F.max_pool2d(x, spec.kernel, spec.stride)
        if kind == "avgpool":
            return F.avg_pool2d(x, spec.kernel, spec.stride)
        if kind == "globalavgpool":
            return x.mean((2, 3))
        if kind == "flatten":
            return x.flatten(1)
        if kind == "upsample":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        if kind == "reshape":
            return x.reshape(x.shape[0], *spec.shape)
        raise ConfigError(f"{name}: unsupported layer kind {kind!r}")


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits, targets):
    """Mean cross-entropy against class distributions (or integer labels)."""
    if targets.dim() == 1:
        targets = F.one_hot(targets.long(), logits.shape[1]).to(logits.dtype)
    return -(targets * torch.log_softmax(logits, dim=1)).sum(1).mean()


def mse(predictions, targets):
    return (predictions - targets).pow(2).mean()


def loss(kind, predictions, targets):
    if kind == "cross_entropy":
        return cross_entropy(predictions, targets)
    if kind == "mse":
        return mse(predictions, targets)
    raise ValueError(f"unknown loss {kind!r}")


def accuracy(logits, labels) -> float:
    if labels.dim() == 2:
        labels = labels.argmax(1)
    return (logits.argmax(1) == labels).to(torch.float64).mean().item()
