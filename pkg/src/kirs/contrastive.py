"""Contrastive warm-up between trained item embeddings and encoded Infomax vectors.

The encoder ``c = W5 relu(W4 d + b4) + b5`` maps an item's Infomax vector
into embedding space; InfoNCE then asks each item embedding to pick out its
own ``c`` among in-batch negatives, scored by ``exp(cos / tau)``.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_NEGATIVES = 127
TEMPERATURE = {"movielens": 0.3, "dbbook": 0.2}


class ContrastiveEncoder(nn.Module):
    def __init__(self, in_dim, out_dim, hidden_dim=None, dtype=torch.float32):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        self.w4 = nn.Linear(in_dim, hidden_dim, dtype=dtype)
        self.w5 = nn.Linear(hidden_dim, out_dim, dtype=dtype)

    def forward(self, d):
        if d.shape[-1] != self.w4.in_features:
            raise ValueError(f"input dim {d.shape[-1]} != encoder dim {self.w4.in_features}")
        return self.w5(F.relu(self.w4(d)))


def _norm(v):
    return v.norm(dim=-1) if isinstance(v, torch.Tensor) else np.linalg.norm(v, axis=-1)


def _cos(a, b):
    na, nb = _norm(a), _norm(b)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine of a zero vector")
    return (a * b).sum(-1) / (na * nb)


def density_ratio(i, c, tau):
    """``exp(cos(i, c) / tau)``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    x = _cos(i, c) / tau
    return torch.exp(x) if isinstance(x, torch.Tensor) else np.exp(x)


def infonce_from_cosines(pos_cos, neg_cos, tau):
    """Mean ``-ln(e^{c+/tau} / (e^{c+/tau} + sum_j e^{c_j/tau}))``; ``neg_cos`` is ``(B, J)``."""
    logits = torch.cat([pos_cos[:, None], neg_cos], dim=1) / tau
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def negative_index(batch_size, n_negatives=DEFAULT_NEGATIVES):
    """``(B, J)`` in-batch negatives: anchor ``k`` uses rows ``k+1 .. k+J`` (mod B)."""
    j = min(n_negatives, batch_size - 1)
    if j < 1:
        raise ValueError("InfoNCE needs at least two distinct items in a batch")
    return (np.arange(batch_size)[:, None] + np.arange(1, j + 1)[None, :]) % batch_size


def infonce_loss(anchors, candidates, tau, n_negatives=DEFAULT_NEGATIVES):
    """InfoNCE with row ``k`` of ``candidates`` as the positive of anchor ``k``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a = F.normalize(anchors, dim=-1)
    c = F.normalize(candidates, dim=-1)
    idx = torch.from_numpy(negative_index(len(a), n_negatives))
    pos = (a * c).sum(-1)
    neg = (a[:, None, :] * c[idx]).sum(-1)
    return infonce_from_cosines(pos, neg, tau)


def warmup_loss(bpr, infonce):
    return bpr + infonce
