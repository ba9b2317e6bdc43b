"""Meta-gradients through unrolled inner loops.

torch.autograd records the tape and supplies the primitive vector-Jacobian
products. This module adds what differentiating through training needs:

* ``backward`` returns a gradient for every requested tensor, with exact
  zeros for tensors that have no path to the loss;
* ``unroll`` drives a functional step ``(t, state) -> (state', side)`` for T
  steps and records a :class:`CheckpointSchedule`;
* ``metagrad`` differentiates a loss built through a fully recorded unroll;
* ``checkpointed_backward`` keeps only the per-step states and recomputes one
  step at a time during the reverse sweep, so retained activations never
  exceed a single inner step;
* ``finite_difference_check`` is the central-difference oracle used by tests.

A step function has the signature ``step(t, state, create_graph)`` where
``state`` is a tuple of tensors (learner parameters followed by optimizer
velocity) and it returns ``(next_state, side)``. ``side`` carries whatever
the final loss needs from the last step besides the state (batch-norm
statistics of the last batch, for instance).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

REL_EPS = 1e-12


class DivergedError(RuntimeError):
    def __init__(self, message, step=None, iteration=None):
        super().__init__(message)
        self.step = step
        self.iteration = iteration


class DeterminismError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass
class CheckpointSchedule:
    """Detached states at every inner-step boundary.

    ``snapshots[0]`` is the initial state and ``snapshots[t + 1]`` the state
    after step ``t``; nothing else from the forward pass is kept.
    """
    snapshots: list = field(default_factory=list)

    @property
    def boundaries(self) -> int:
        return max(len(self.snapshots) - 1, 0)


def _detach(state):
    return tuple(s.detach() for s in state)


def _all_finite(tensors) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)


def backward(loss: torch.Tensor, wrt: Mapping[str, torch.Tensor], create_graph=False,
             retain_graph=None) -> dict:
    """Gradient of a scalar ``loss`` for every tensor in ``wrt``."""
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(wrt)
    tensors = [wrt[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True,
                                create_graph=create_graph, retain_graph=retain_graph)
    return {n: torch.zeros_like(t) if g is None else g
            for n, t, g in zip(names, tensors, grads)}


def unroll(step: Callable, state, steps: int, create_graph=True):
    """Run ``steps`` inner steps; returns ``(state, side, schedule)``.

    With ``create_graph`` the whole trajectory stays on the tape. Without it
    each state is detached after its step, which is the forward sweep of
    checkpointed differentiation.
    """
    state = tuple(state)
    schedule = CheckpointSchedule([_detach(state)])
    side = ()
    for t in range(steps):
        state, side = step(t, state, create_graph)
        if not create_graph:
            state = _detach(state)
            side = _detach(side)
        if not _all_finite(state):
            raise DivergedError(f"non-finite learner state after inner step {t}", step=t)
        schedule.snapshots.append(_detach(state))
    return state, side, schedule


def _first_bad_step(schedule):
    if schedule is None:
        return None
    for t, snap in enumerate(schedule.snapshots[1:]):
        if not _all_finite(snap):
            return t
    return schedule.boundaries


def metagrad(meta_loss: torch.Tensor, wrt: Mapping[str, torch.Tensor], schedule=None) -> dict:
    """Differentiate a meta-loss built through a fully recorded unroll."""
    if not torch.isfinite(meta_loss):
        raise DivergedError("non-finite meta-loss", step=_first_bad_step(schedule))
    grads = backward(meta_loss, wrt)
    bad = [n for n, g in grads.items() if not bool(torch.isfinite(g).all())]
    if bad:
        raise DivergedError(f"non-finite meta-gradient for {bad[0]}", step=_first_bad_step(schedule))
    return grads


def checkpointed_backward(schedule: CheckpointSchedule, step: Callable, final: Callable,
                          wrt: Mapping[str, torch.Tensor], atol=0.0):
    """Reverse sweep that recomputes each inner step from its stored state.

    ``final(state, side)`` builds the meta-loss from the last state. Returns
    ``(meta_loss_value, grads)``. A recomputed state that differs from the
    stored one raises :class:`DeterminismError`.
    """
    names = list(wrt)
    leaves = [wrt[n] for n in names]
    total = {n: torch.zeros_like(t) for n, t in zip(names, leaves)}
    steps = schedule.boundaries

    if steps == 0:
        state = tuple(s.detach().requires_grad_() for s in schedule.snapshots[0])
        loss = final(state, ())
        return loss.detach(), metagrad(loss, wrt)

    cotangent = None
    loss_value = None
    for t in reversed(range(steps)):
        state = tuple(s.detach().requires_grad_() for s in schedule.snapshots[t])
        nxt, side = step(t, state, True)
        stored = schedule.snapshots[t + 1]
        for a, b in zip(nxt, stored):
            if not _same(a.detach(), b, atol):
                raise DeterminismError(f"recomputed inner step {t} does not match its checkpoint", step=t)
        if t == steps - 1:
            loss = final(nxt, side)
            if not torch.isfinite(loss):
                raise DivergedError("non-finite meta-loss", step=t)
            loss_value = loss.detach()
            outputs, grad_outputs = [loss], [None]
        else:
            pairs = [(o, c) for o, c in zip(nxt, cotangent) if o.requires_grad]
            outputs = [o for o, _ in pairs]
            grad_outputs = [c for _, c in pairs]
        inputs = list(state) + leaves
        grads = torch.autograd.grad(outputs, inputs, grad_outputs, allow_unused=True)
        cotangent = tuple(torch.zeros_like(s) if g is None else g
                          for s, g in zip(state, grads[:len(state)]))
        for n, g in zip(names, grads[len(state):]):
            if g is not None:
                total[n] = total[n] + g
        if not _all_finite(cotangent) or not _all_finite(total.values()):
            raise DivergedError(f"non-finite meta-gradient at inner step {t}", step=t)
    return loss_value, total


def _same(a, b, atol):
    if atol == 0.0:
        return torch.equal(a, b)
    return bool(torch.allclose(a, b, rtol=0.0, atol=atol))


def finite_difference_check(f: Callable, point, h=1e-4, analytic=None, eps=REL_EPS) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``point`` is a tensor or a dict of tensors; ``f`` maps it to a scalar.
    When ``analytic`` is omitted it is obtained with :func:`backward`.
    """
    single = isinstance(point, torch.Tensor)
    params = {"x": point} if single else dict(point)
    params = {k: v.detach().clone() for k, v in params.items()}

    def call(p):
        out = f(p["x"] if single else p)
        return float(out.detach())

    if analytic is None:
        leaves = {k: v.clone().requires_grad_() for k, v in params.items()}
        out = f(leaves["x"] if single else leaves)
        analytic = backward(out, leaves)
    elif single:
        analytic = {"x": analytic}

    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        grad = analytic[name].detach().reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = call(params)
            flat[i] = orig - h
            down = call(params)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = grad[i].item()
            err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
            worst = max(worst, err)
    return worst
