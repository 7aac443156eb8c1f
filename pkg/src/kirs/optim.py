"""Adaptive-subgradient (Adagrad) updates with L2 and unit-norm plane constraints."""

from __future__ import annotations

import torch

from .hyperplane import renormalize_

ADAGRAD_EPS = 1e-10


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def _touched(grad):
    """Mask of the slices along dim 0 that received any gradient."""
    if grad.dim() < 2:
        return (grad != 0).any().expand_as(grad)
    rows = (grad != 0).flatten(1).any(1)
    return rows.view(-1, *([1] * (grad.dim() - 1)))


@torch.no_grad()
def optimizer_step(params, grads, state, lr=0.005, l2=0.0, eps=ADAGRAD_EPS, unit_norm=()):
    """One Adagrad step over ``params`` (name -> tensor), in place.

    ``state`` holds the squared-gradient accumulators and is updated in place.
    The L2 term ``l2 * param`` is added only to the rows that received a
    gradient, so untouched embedding rows keep both value and accumulator.
    Parameters named in ``unit_norm`` are renormalised afterwards.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(name)
        if l2:
            g = g + l2 * p * _touched(g)
        acc = state.get(name)
        if acc is None:
            acc = state[name] = torch.zeros_like(p)
        acc.add_(g * g)
        p.sub_(lr * g / torch.sqrt(acc + eps))
    for name in unit_norm:
        renormalize_(params[name])
    return params


class Adagrad:
    """Stateful wrapper over :func:`optimizer_step` for ``named_parameters()`` style input."""

    def __init__(self, named_params, lr=0.005, l2=0.0, eps=ADAGRAD_EPS, unit_norm=()):
        self.params = dict(named_params)
        self.lr, self.l2, self.eps = lr, l2, eps
        self.unit_norm = tuple(unit_norm)
        self.state = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        optimizer_step(self.params, grads, self.state, self.lr, self.l2, self.eps, self.unit_norm)
