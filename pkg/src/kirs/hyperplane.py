"""Hyperplane-translation kernel shared by semantic pretraining and the recommender.

Functions accept numpy arrays or torch tensors (batched along leading axes)
and return the same kind they were given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .kg_data import SamplingError

DEFAULT_MARGIN = 1.0


def _check_dims(*vs):
    dims = {v.shape[-1] for v in vs}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {[tuple(v.shape) for v in vs]}")


def _dot(a, b):
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return (a * b).sum(-1, keepdim=True)
    return np.sum(a * b, axis=-1, keepdims=True)


def project(v, w):
    """Remove the component of ``v`` along the unit normal ``w``: v - (w.v) w."""
    _check_dims(v, w)
    return v - _dot(v, w) * w


def triple_distance(h, r, t, w):
    """L1 norm of ``project(h, w) + r - project(t, w)`` over the last axis."""
    _check_dims(h, r, t, w)
    diff = project(h, w) + r - project(t, w)
    return abs(diff).sum(-1)


def margin_loss(pos, neg, margin=DEFAULT_MARGIN):
    """Hinge ``max(0, pos + margin - neg)`` elementwise."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    gap = pos + margin - neg
    if isinstance(gap, torch.Tensor):
        return torch.clamp(gap, min=0.0)
    return np.maximum(gap, 0.0)


def normalize_rows(w, eps=1e-12):
    """Unit-L2 rows; all-zero rows stay zero."""
    if isinstance(w, torch.Tensor):
        n = w.norm(dim=-1, keepdim=True)
        return torch.where(n > eps, w / n.clamp_min(eps), w)
    w = np.asarray(w)
    n = np.linalg.norm(w, axis=-1, keepdims=True)
    return np.where(n > eps, w / np.maximum(n, eps), w)


@torch.no_grad()
def renormalize_(param):
    """In-place unit renormalisation of a plane parameter after an optimizer step."""
    param.copy_(normalize_rows(param))
    return param


# ---------------------------------------------------------------------------
# corruption


@dataclass(frozen=True)
class Corruption:
    triple: object
    mode: str
    exhausted: bool = False


def _resample_other(rng, n, current):
    j = int(rng.integers(n - 1))
    return j + (j >= current)


def corrupt_triple(triple, kg, rng, mode=None, max_attempts=100, corrupt_head=False):
    """Replace the tail or the relation (50/50 when ``mode`` is None) of ``triple``.

    Resamples until the corrupted triple is not in ``kg``; after
    ``max_attempts`` rejections the last sample is returned with
    ``exhausted=True``.
    """
    if mode is None:
        modes = ("tail", "relation", "head") if corrupt_head else ("tail", "relation")
        mode = modes[int(rng.integers(len(modes)))]
    if mode in ("tail", "head"):
        if kg.n_entities < 2:
            raise SamplingError("need at least two entities to corrupt an entity slot")
    elif mode == "relation":
        if kg.n_relations < 2:
            raise SamplingError("need at least two relations to corrupt the relation")
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    h, r, t = triple.head, triple.relation, triple.tail
    for _ in range(max_attempts):
        if mode == "tail":
            h2, r2, t2 = h, r, _resample_other(rng, kg.n_entities, t)
        elif mode == "head":
            h2, r2, t2 = _resample_other(rng, kg.n_entities, h), r, t
        else:
            h2, r2, t2 = h, _resample_other(rng, kg.n_relations, r), t
        if not kg.contains([h2], [r2], [t2])[0]:
            return Corruption(kg.make_triple(h2, r2, t2), mode)
    return Corruption(kg.make_triple(h2, r2, t2), mode, exhausted=True)


def corrupt_batch(heads, relations, tails, kg, rng, max_attempts=100, corrupt_head=False,
                  modes=None):
    """Vectorised :func:`corrupt_triple` over index arrays.

    Returns ``(heads, relations, tails, exhausted)``. Relation corruption is
    only chosen when the KG has two or more relations.
    """
    heads, relations, tails = (np.array(x, dtype=np.int64, copy=True) for x in (heads, relations, tails))
    n = len(heads)
    if modes is None:
        choices = ["tail", "relation"] if kg.n_relations > 1 else ["tail"]
        if corrupt_head:
            choices.append("head")
        modes = np.array(choices)[rng.integers(len(choices), size=n)]
    modes = np.asarray(modes)
    h0, r0, t0 = heads.copy(), relations.copy(), tails.copy()
    todo = np.ones(n, dtype=bool)
    for _ in range(max_attempts):
        idx = np.flatnonzero(todo)
        if len(idx) == 0:
            break
        m = modes[idx]
        for name, orig, out, size in (
            ("tail", t0, tails, kg.n_entities),
            ("head", h0, heads, kg.n_entities),
            ("relation", r0, relations, kg.n_relations),
        ):
            sel = idx[m == name]
            if len(sel):
                j = rng.integers(size - 1, size=len(sel))
                out[sel] = j + (j >= orig[sel])
        todo[idx] = kg.contains(heads[idx], relations[idx], tails[idx])
    return heads, relations, tails, todo
