"""Top-K recommendation metrics and KG completion ranks."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .hyperplane import triple_distance
from .kg_data import TEST, TRAIN, VALID

logger = logging.getLogger(__name__)

POLICIES = ("catalog", "test_only")


@dataclass(frozen=True)
class RankingResult:
    query: object
    candidates: np.ndarray  # best first
    relevant: frozenset


@dataclass(frozen=True)
class QueryMetrics:
    precision: float
    recall: float
    f1: float
    hit: float
    ndcg: float


@dataclass
class MetricReport:
    k: int
    n_queries: int
    precision: float = math.nan
    recall: float = math.nan
    f1: float = math.nan
    hit: float = math.nan
    ndcg: float = math.nan
    mean_rank: float = math.nan
    n_excluded: int = 0
    notes: list = field(default_factory=list)

    def row(self, columns):
        return {c: getattr(self, c) for c in columns}

    def to_csv(self, path, columns=None, label=None):
        columns = columns or [c for c in ("precision", "recall", "f1", "hit", "ndcg", "mean_rank")
                              if not math.isnan(getattr(self, c))]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow((["label"] if label else []) + ["k", "n_queries"] + columns)
            w.writerow(([label] if label else []) + [self.k, self.n_queries]
                       + [repr(getattr(self, c)) for c in columns])

    def table(self):
        """Aligned console table; rate metrics as percentages with 2 decimals."""
        names = {"precision": f"Precision@{self.k}", "recall": f"Recall@{self.k}", "f1": f"F1@{self.k}",
                 "hit": f"Hit@{self.k}", "ndcg": f"NDCG@{self.k}", "mean_rank": "MR"}
        cells = []
        for key, title in names.items():
            v = getattr(self, key)
            if not math.isnan(v):
                cells.append((title, f"{v:.2f}" if key == "mean_rank" else f"{100 * v:.2f}"))
        width = [max(len(a), len(b)) for a, b in cells]
        head = "  ".join(a.rjust(n) for (a, _), n in zip(cells, width))
        body = "  ".join(b.rjust(n) for (_, b), n in zip(cells, width))
        return f"{head}\n{body}"

    def as_dict(self):
        return asdict(self)


def order_candidates(distances, candidates):
    """Ascending distance, ties broken by ascending id."""
    candidates = np.asarray(candidates)
    d = np.asarray(distances)[candidates]
    return candidates[np.lexsort((candidates, d))]


def candidate_items(log, user, exclude=(TRAIN, VALID), policy="catalog"):
    if policy not in POLICIES:
        raise ValueError(f"unknown candidate policy {policy!r}")
    allowed = np.ones(log.n_items, dtype=bool)
    if policy == "test_only":
        allowed[:] = False
        allowed[log.items[log.split == TEST]] = True
    seen = log.items[(log.users == user) & np.isin(log.split, exclude)]
    allowed[seen] = False
    return np.flatnonzero(allowed)


def rank_items(distances, log, user, relevant_split=TEST, exclude=(TRAIN, VALID), policy="catalog"):
    """Rank one user's candidates given their distances to every item."""
    cand = candidate_items(log, user, exclude, policy)
    relevant = log.items[(log.users == user) & (log.split == relevant_split)]
    return RankingResult(user, order_candidates(distances, cand), frozenset(relevant.tolist()))


def metrics_at_k(result, k=10):
    """Per-query metrics, or ``None`` when there is nothing relevant."""
    if k < 1:
        raise ValueError("K must be at least 1")
    rel = result.relevant
    if not rel:
        return None
    top = result.candidates[:k]
    gains = np.fromiter((c in rel for c in top.tolist()), dtype=float, count=len(top))
    n_hit = gains.sum()
    precision = n_hit / k
    recall = n_hit / len(rel)
    f1 = 0.0 if n_hit == 0 else 2 * precision * recall / (precision + recall)
    discount = 1.0 / np.log2(np.arange(2, len(top) + 2))
    ideal = discount[: min(k, len(rel))].sum()
    return QueryMetrics(precision, recall, f1, float(n_hit > 0), float(gains @ discount / ideal))


def aggregate(per_query, k=10, ranks=None):
    """Macro averages over included queries; ``None`` entries count as excluded."""
    included = [m for m in per_query if m is not None]
    excluded = len(per_query) - len(included)
    if ranks is not None:
        ranks = np.asarray(ranks, dtype=float)
        if len(ranks) == 0:
            raise ValueError("no queries to aggregate")
        return MetricReport(k, len(ranks), hit=float(np.mean(ranks <= k)), mean_rank=float(ranks.mean()))
    if not included:
        raise ValueError("no queries with relevant items to aggregate")
    cols = {f: float(np.mean([getattr(m, f) for m in included])) for f in QueryMetrics.__dataclass_fields__}
    return MetricReport(k, len(included), n_excluded=excluded, **cols)


def evaluate_recommendation(model, log, k=10, split=TEST, policy="catalog"):
    """Rank every user with ``split`` positives; returns ``(report, per_user)``.

    Validation (``split=VALID``) excludes only training positives; test
    excludes training and validation positives.
    """
    exclude = (TRAIN,) if split == VALID else (TRAIN, VALID)
    has_train = np.zeros(log.n_users, dtype=bool)
    has_train[log.users[log.split == TRAIN]] = True
    targets = np.unique(log.users[log.split == split])
    per_user, skipped = {}, 0
    for u in targets.tolist():
        if not has_train[u]:
            skipped += 1
            continue
        res = rank_items(model.user_distances(u), log, u, split, exclude, policy)
        per_user[u] = metrics_at_k(res, k)
    report = aggregate(list(per_user.values()), k)
    if skipped:
        report.notes.append(f"{skipped} users without training interactions skipped")
    return report, per_user


def kg_completion_rank(distances, true_index, rng, known=None):
    """1-based rank of ``true_index`` under ascending distance, random tie order.

    ``known`` (optional boolean mask) removes other true answers first,
    giving the filtered setting.
    """
    d = np.asarray(distances, dtype=float)
    target = d[true_index]
    others = np.ones(len(d), dtype=bool)
    others[true_index] = False
    if known is not None:
        others &= ~np.asarray(known, dtype=bool)
    better = int(np.sum(d[others] < target))
    ties = int(np.sum(d[others] == target))
    return 1 + better + int(rng.integers(ties + 1))


def completion_distances(entities, relations, planes, head, relation, tail, missing="tail"):
    """Distance of every candidate substituted into the missing slot."""
    w = planes[relation][None, :]
    r = relations[relation][None, :]
    if missing == "tail":
        return triple_distance(entities[head][None, :], r, entities, w)
    if missing == "head":
        return triple_distance(entities, r, entities[tail][None, :], w)
    raise ValueError("missing must be 'head' or 'tail'")


def evaluate_completion(entities, relations, planes, kg, indices, rng, missing="tail", filtered=False, k=10):
    """Hit@k and mean rank over the triples at ``indices``."""
    ranks = []
    for n in np.asarray(indices).tolist():
        h, r, t = int(kg.heads[n]), int(kg.relations[n]), int(kg.tails[n])
        d = completion_distances(entities, relations, planes, h, r, t, missing)
        known = None
        if filtered:
            cand = np.arange(kg.n_entities)
            if missing == "tail":
                known = kg.contains(np.full_like(cand, h), np.full_like(cand, r), cand)
            else:
                known = kg.contains(cand, np.full_like(cand, r), np.full_like(cand, t))
        ranks.append(kg_completion_rank(d, t if missing == "tail" else h, rng, known))
    return aggregate([], k, ranks=ranks), ranks
