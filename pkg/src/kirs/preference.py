"""Hyperplane preference-connection recommender.

A user ``u`` reaches an item ``i`` through latent preference factors ``P``
(one per KG relation). Attention over ``P`` picks the aggregated preference
``p`` and a hyperplane normal ``W``; the link distance is

    j(u, i | p) = || u_perp + p - i_perp ||_1,   v_perp = v - (W.v) W

Lower is better. After the Infomax update, items and preferences are read
as ``i + d_i`` and ``p + d_p`` with the Infomax vectors held as frozen
buffers, and ``W`` is refined with the relation plane of the dominant
preference.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .hyperplane import project

logger = logging.getLogger(__name__)

REFINEMENTS = ("dominant", "weighted")
SIMILARITIES = ("dot", "cosine")


def attention_weights(users, items, prefs, similarity="dot"):
    """``softmax(sim(u + i, p'))`` over preferences; ``(B, n_pref)``."""
    q = users + items
    if similarity == "cosine":
        q = F.normalize(q, dim=-1)
        prefs = F.normalize(prefs, dim=-1)
    return torch.softmax(q @ prefs.T, dim=-1)


def projection_vectors(weights, prefs, planes=None, refinement="dominant", eps=1e-12):
    """Unit normals ``normalize(sum pi p' [+ w_r])``, falling back to the dominant preference."""
    w = weights @ prefs
    dominant = weights.argmax(dim=-1)
    if planes is not None:
        w = w + (planes[dominant] if refinement == "dominant" else weights @ planes)
    norm = w.norm(dim=-1, keepdim=True)
    degenerate = norm.squeeze(-1) < eps
    if degenerate.any():
        logger.warning("%d zero-norm projection sums; using the dominant preference", int(degenerate.sum()))
        fallback = F.normalize(prefs[dominant], dim=-1)
        safe = torch.where(degenerate[:, None], torch.ones_like(norm), norm)
        return torch.where(degenerate[:, None], fallback, w / safe)
    return w / norm


def link_distance_from(users, items, prefs, planes=None, refinement="dominant", similarity="dot"):
    """``(distance, weights)`` for row-aligned user and item vectors."""
    weights = attention_weights(users, items, prefs, similarity)
    p = weights @ prefs
    w = projection_vectors(weights, prefs, planes, refinement)
    dist = (project(users, w) + p - project(items, w)).abs().sum(dim=-1)
    return dist, weights


def bpr_from_distances(pos_dist, neg_dist):
    """Mean ``-ln sigmoid(j_neg - j_pos)``."""
    return F.softplus(pos_dist - neg_dist).mean()


class PreferenceModel(nn.Module):
    """User, item and preference embeddings plus frozen Infomax buffers."""

    def __init__(self, n_users, n_items, n_preferences, dim, dtype=torch.float32,
                 refinement="dominant", similarity="dot"):
        super().__init__()
        if n_preferences < 1:
            raise ValueError("need at least one preference factor")
        if refinement not in REFINEMENTS or similarity not in SIMILARITIES:
            raise ValueError(f"unknown refinement {refinement!r} or similarity {similarity!r}")
        bound = 6.0 / np.sqrt(dim)
        init = lambda n: nn.Parameter(torch.empty(n, dim, dtype=dtype).uniform_(-bound, bound))
        self.user = init(n_users)
        self.item = init(n_items)
        self.pref = init(n_preferences)
        self.refinement = refinement
        self.similarity = similarity
        # preference k <-> relation k
        self.register_buffer("pref_to_relation", torch.arange(n_preferences))
        self.register_buffer("item_infomax", torch.zeros(n_items, dim, dtype=dtype))
        self.register_buffer("pref_infomax", torch.zeros(n_preferences, dim, dtype=dtype))
        self.register_buffer("preference_planes", torch.zeros(n_preferences, dim, dtype=dtype))
        self.augmented = False

    @property
    def dim(self):
        return self.item.shape[1]

    def item_vectors(self, items=None):
        v = self.item if items is None else self.item[items]
        if self.augmented:
            v = v + (self.item_infomax if items is None else self.item_infomax[items])
        return v

    def pref_vectors(self):
        return self.pref + self.pref_infomax if self.augmented else self.pref

    def link_distance(self, users, items):
        """``(distance, weights)`` for aligned index tensors."""
        planes = self.preference_planes if self.augmented else None
        return link_distance_from(
            self.user[users], self.item_vectors(items), self.pref_vectors(),
            planes, self.refinement, self.similarity,
        )

    def bpr_loss(self, users, pos_items, neg_items):
        j_pos, _ = self.link_distance(users, pos_items)
        j_neg, _ = self.link_distance(users, neg_items)
        return bpr_from_distances(j_pos, j_neg)

    @torch.no_grad()
    def user_distances(self, user, chunk=4096):
        """Distances from one user to every item, as a numpy array."""
        n = self.item.shape[0]
        out = []
        for start in range(0, n, chunk):
            items = torch.arange(start, min(n, start + chunk))
            users = torch.full((len(items),), int(user))
            out.append(self.link_distance(users, items)[0])
        return torch.cat(out).double().numpy()

    def apply_infomax_update(self, store, item_entities):
        """Switch to ``i + d_i``, ``p + d_p`` and plane refinement; allowed once."""
        if self.augmented:
            raise RuntimeError("Infomax update already applied")
        if store.dim != self.dim:
            raise ValueError(f"Infomax dim {store.dim} != embedding dim {self.dim}")
        rel = self.pref_to_relation.tolist()
        as_t = lambda a: torch.as_tensor(a, dtype=self.item.dtype)
        self.item_infomax.copy_(as_t(store.entity_matrix(np.asarray(item_entities))))
        self.pref_infomax.copy_(as_t(store.relation_matrix(rel)))
        self.preference_planes.copy_(as_t(store.plane_matrix(rel)))
        self.augmented = True
        return self

    def state_tables(self):
        """Named float arrays for checkpointing."""
        out = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        out["augmented"] = np.array([float(self.augmented)])
        return out

    def load_tables(self, tables):
        tables = dict(tables)
        self.augmented = bool(np.ravel(tables.pop("augmented"))[0])
        state = {}
        for k, v in self.state_dict().items():
            arr = np.asarray(tables[k]).reshape(v.shape)
            state[k] = torch.as_tensor(arr, dtype=v.dtype)
        self.load_state_dict(state)
        return self
