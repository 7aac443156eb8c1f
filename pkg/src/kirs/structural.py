"""Composition-based multi-relational graph convolution over the reversal-augmented KG.

Layer update for entity ``h`` with neighbours ``(t, r)``::

    e_h' = ReLU( sum W1 (e_t - e_r) + W2 e_h )      e_r' = W3 e_r

trained as a triple classifier with binary cross-entropy against corrupted
triples. The final-layer entity/relation vectors are the structural half of
the Infomax representation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .hyperplane import corrupt_batch
from .optim import Adagrad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentedGraph:
    """Original triples followed by their reversals under relation ``r + n_relations``."""

    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    n_entities: int
    n_relations: int

    @property
    def n_relations_total(self):
        return 2 * self.n_relations

    def __len__(self):
        return len(self.heads)

    @cached_property
    def neighbor_index(self):
        """entity -> list of ``(neighbour, relation)`` pairs."""
        out = [[] for _ in range(self.n_entities)]
        for h, r, t in zip(self.heads.tolist(), self.relations.tolist(), self.tails.tolist()):
            out[h].append((t, r))
        return out

    @cached_property
    def edges(self):
        """``(centre, neighbour, relation)`` long tensors for scatter aggregation."""
        return (
            torch.from_numpy(self.heads.copy()),
            torch.from_numpy(self.tails.copy()),
            torch.from_numpy(self.relations.copy()),
        )


def augment_graph(kg):
    if len(kg) == 0:
        raise ValueError("cannot augment an empty graph")
    h, r, t = np.asarray(kg.heads), np.asarray(kg.relations), np.asarray(kg.tails)
    return AugmentedGraph(
        heads=np.concatenate([h, t]),
        relations=np.concatenate([r, r + kg.n_relations]),
        tails=np.concatenate([t, h]),
        n_entities=kg.n_entities,
        n_relations=kg.n_relations,
    )


def propagate_layer(graph, entities, relations, w1, w2, w3):
    """One convolution step; isolated entities only see their own ``W2`` term."""
    centre, nbr, rel = graph.edges
    messages = (entities[nbr] - relations[rel]) @ w1.T
    agg = torch.zeros(entities.shape[0], w1.shape[0], dtype=entities.dtype)
    agg = agg.index_add(0, centre, messages)
    return F.relu(agg + entities @ w2.T), relations @ w3.T


@dataclass
class StructuralConfig:
    dim: int = 200
    num_layers: int = 2
    epochs: int = 50
    learning_rate: float = 0.005
    l2: float = 1e-5
    batch_size: int = 1024
    negatives: int = 1

    def validate(self):
        if self.num_layers < 1:
            raise ValueError("structural encoder needs at least one layer")
        if self.dim < 1 or self.negatives < 1:
            raise ValueError("dim and negatives must be positive")


class CompGCN(nn.Module):
    def __init__(self, n_entities, n_relations_total, dim=200, num_layers=2, dtype=torch.float32):
        super().__init__()
        if num_layers < 1:
            raise ValueError("structural encoder needs at least one layer")
        bound = 1.0 / np.sqrt(dim)
        self.entity = nn.Parameter(torch.empty(n_entities, dim, dtype=dtype).uniform_(-bound, bound))
        self.relation = nn.Parameter(
            torch.empty(n_relations_total, dim, dtype=dtype).uniform_(-bound, bound)
        )
        self.w1 = nn.ParameterList()
        self.w2 = nn.ParameterList()
        self.w3 = nn.ParameterList()
        for _ in range(num_layers):
            for plist in (self.w1, self.w2, self.w3):
                w = torch.empty(dim, dim, dtype=dtype)
                nn.init.xavier_uniform_(w)
                plist.append(nn.Parameter(w))
        self.classifier = nn.Sequential(
            nn.Linear(3 * dim, dim, dtype=dtype), nn.ReLU(), nn.Linear(dim, 1, dtype=dtype)
        )

    @property
    def num_layers(self):
        return len(self.w1)

    def forward(self, graph):
        e, r = self.entity, self.relation
        for w1, w2, w3 in zip(self.w1, self.w2, self.w3):
            e, r = propagate_layer(graph, e, r, w1, w2, w3)
        return e, r

    def logits(self, e, r, heads, relations, tails):
        x = torch.cat([e[heads], r[relations], e[tails]], dim=-1)
        return self.classifier(x).squeeze(-1)


def structural_loss(model, graph, pos, neg):
    """Mean binary cross-entropy: ``pos`` triples labelled 1, ``neg`` labelled 0."""
    e, r = model(graph)
    pos_logit = model.logits(e, r, *pos)
    neg_logit = model.logits(e, r, *neg)
    logits = torch.cat([pos_logit, neg_logit])
    labels = torch.cat([torch.ones_like(pos_logit), torch.zeros_like(neg_logit)])
    return F.binary_cross_entropy_with_logits(logits, labels)


def bce_from_probabilities(pos_prob, neg_prob):
    """Mean cross-entropy of classifier probabilities (reference form of the loss)."""
    p = np.concatenate([np.ravel(pos_prob), 1 - np.ravel(neg_prob)])
    return float(-np.mean(np.log(p)))


def train_structural(kg, config=None, seed=0, dtype=torch.float32, graph=None, epoch_callback=None):
    """Train the encoder on ``kg``; returns ``(model, graph, loss_history)``."""
    config = config or StructuralConfig()
    config.validate()
    graph = graph or augment_graph(kg)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = CompGCN(kg.n_entities, graph.n_relations_total, config.dim, config.num_layers, dtype)
    opt = Adagrad(model.named_parameters(), lr=config.learning_rate, l2=config.l2)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(kg))
        total, n = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            h, r, t = kg.heads[idx], kg.relations[idx], kg.tails[idx]
            rep = config.negatives
            nh, nr, nt, _ = corrupt_batch(np.repeat(h, rep), np.repeat(r, rep), np.repeat(t, rep), kg, rng)
            as_t = lambda *xs: tuple(torch.from_numpy(np.asarray(x, dtype=np.int64)) for x in xs)
            loss = structural_loss(model, graph, as_t(h, r, t), as_t(nh, nr, nt))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        history.append(total / n)
        if epoch_callback is not None:
            epoch_callback(epoch + 1, history[-1])
    return model, graph, history


@dataclass
class StructuralTable:
    entity_vectors: np.ndarray
    relation_vectors: np.ndarray
    entity_seen: np.ndarray = field(default=None, repr=False)

    @property
    def dim(self):
        return self.entity_vectors.shape[1]


@torch.no_grad()
def export_structural_table(model, graph):
    """Final-layer vectors; only the original (non-inverse) relations are exported."""
    e, r = model(graph)
    seen = np.zeros(graph.n_entities, dtype=bool)
    seen[graph.heads] = True
    return StructuralTable(
        e.double().numpy().copy(), r[: graph.n_relations].double().numpy().copy(), seen
    )


@torch.no_grad()
def tail_scores(model, graph, head, relation):
    """Classifier logit of ``(head, relation, x)`` for every entity ``x``."""
    e, r = model(graph)
    n = graph.n_entities
    tails = torch.arange(n)
    return model.logits(e, r, torch.full((n,), head), torch.full((n,), relation), tails).numpy()
