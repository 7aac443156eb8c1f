"""Loading, filtering, linking and splitting of interaction logs and KG triples.

Everything here is plain numpy + stdlib. Structures returned by this module
are treated as immutable: arrays are flagged read-only after construction.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
UNSPLIT = -1
SPLIT_NAMES = {TRAIN: "train", VALID: "valid", TEST: "test", UNSPLIT: "unsplit"}
SPLIT_CODES = {name: code for code, name in SPLIT_NAMES.items()}


class ParseError(ValueError):
    """A malformed input line."""

    def __init__(self, path, lineno, line):
        super().__init__(f"{path}:{lineno}: cannot parse line {line!r}")
        self.path = path
        self.lineno = lineno


class EmptyDatasetError(ValueError):
    """Filtering removed every record."""


class SamplingError(RuntimeError):
    """No admissible candidate exists for a sampling request."""


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int
    head_name: str
    relation_name: str
    tail_name: str

    def __post_init__(self):
        if not (self.head_name and self.relation_name and self.tail_name):
            raise ValueError(f"triple names must be non-empty: {self!r}")


@dataclass(frozen=True)
class DatasetStats:
    n_users: int = 0
    n_items: int = 0
    n_ratings: int = 0
    n_entities: int = 0
    n_relations: int = 0
    n_triples: int = 0

    def as_dict(self):
        return dict(self.__dict__)


def _readonly(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


def natural_sorted(ids):
    """Sort identifiers numerically when they all look like integers."""
    ids = list(ids)
    if all(re.fullmatch(r"-?\d+", s) for s in ids):
        return sorted(ids, key=int)
    return sorted(ids)


def normalize_name(name):
    """Case-insensitive, whitespace-collapsed key used for exact name matching."""
    return " ".join(name.split()).casefold()


def _iter_rows(path, min_cols, max_cols=None):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < min_cols or (max_cols and len(cols) > max_cols):
                raise ParseError(path, lineno, line)
            if any(not c.strip() for c in cols[:min_cols]):
                raise ParseError(path, lineno, line)
            yield lineno, [c.strip() for c in cols]


# ---------------------------------------------------------------------------
# interactions


@dataclass(frozen=True)
class InteractionLog:
    """Implicit-feedback records over contiguous user/item indices.

    ``users``, ``items`` and ``split`` are parallel arrays; ``split`` holds
    TRAIN/VALID/TEST codes (UNSPLIT before :func:`split_per_user`).
    ``item_to_entity`` maps item index to entity index (-1 when unlinked).
    """

    users: np.ndarray
    items: np.ndarray
    split: np.ndarray
    user_ids: tuple
    item_ids: tuple
    item_to_entity: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "users", _readonly(np.asarray(self.users, dtype=np.int64)))
        object.__setattr__(self, "items", _readonly(np.asarray(self.items, dtype=np.int64)))
        object.__setattr__(self, "split", _readonly(np.asarray(self.split, dtype=np.int8)))
        if self.item_to_entity is None:
            object.__setattr__(self, "item_to_entity", np.full(len(self.item_ids), -1))
        object.__setattr__(
            self, "item_to_entity", _readonly(np.asarray(self.item_to_entity, dtype=np.int64))
        )
        if not (len(self.users) == len(self.items) == len(self.split)):
            raise ValueError("users/items/split must have equal length")
        linked = self.item_to_entity[self.item_to_entity >= 0]
        if len(np.unique(linked)) != len(linked):
            raise ValueError("item_to_entity must be injective")

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    def __len__(self):
        return len(self.users)

    @cached_property
    def user_index(self):
        return {u: k for k, u in enumerate(self.user_ids)}

    @cached_property
    def item_index(self):
        return {i: k for k, i in enumerate(self.item_ids)}

    def records(self):
        """``(user-id, item-id, split-tag)`` tuples in storage order."""
        return [
            (self.user_ids[u], self.item_ids[i], SPLIT_NAMES[int(s)])
            for u, i, s in zip(self.users, self.items, self.split)
        ]

    def mask(self, *splits):
        codes = [SPLIT_CODES[s] if isinstance(s, str) else s for s in splits]
        return np.isin(self.split, codes)

    def pairs(self, *splits):
        m = self.mask(*splits)
        return self.users[m], self.items[m]

    def items_by_user(self, *splits):
        """List (indexed by user) of sorted item-index arrays for the given splits."""
        users, items = self.pairs(*splits)
        order = np.lexsort((items, users))
        users, items = users[order], items[order]
        bounds = np.searchsorted(users, np.arange(self.n_users + 1))
        return [items[bounds[u] : bounds[u + 1]] for u in range(self.n_users)]

    @cached_property
    def train_items(self):
        return self.items_by_user(TRAIN)

    @cached_property
    def _train_sets(self):
        return [set(a.tolist()) for a in self.train_items]

    def with_links(self, item_to_entity):
        return replace(self, item_to_entity=item_to_entity)


def _frequency_filter(users, items, min_user_freq, min_item_freq):
    keep = np.ones(len(users), dtype=bool)
    while True:
        u, i = users[keep], items[keep]
        uc, ic = Counter(u.tolist()), Counter(i.tolist())
        bad_u = {k for k, c in uc.items() if c < min_user_freq}
        bad_i = {k for k, c in ic.items() if c < min_item_freq}
        if not bad_u and not bad_i:
            return keep
        drop = np.isin(users, list(bad_u)) | np.isin(items, list(bad_i))
        keep &= ~drop


def filter_interactions(pairs, min_user_freq=1, min_item_freq=1):
    """Iteratively drop rare users/items from ``(user-id, item-id)`` string pairs.

    Returns an unsplit :class:`InteractionLog`. Duplicate pairs keep their
    first occurrence only.
    """
    seen = set()
    uniq = []
    for p in pairs:
        if p not in seen:
            seen.add(p)
            uniq.append(p)
    if not uniq:
        raise EmptyDatasetError("no interaction records")
    raw_u = np.array([u for u, _ in uniq], dtype=object)
    raw_i = np.array([i for _, i in uniq], dtype=object)
    keep = _frequency_filter(raw_u, raw_i, min_user_freq, min_item_freq)
    if not keep.any():
        raise EmptyDatasetError(
            f"filtering with min_user_freq={min_user_freq}, min_item_freq={min_item_freq} "
            "left no records"
        )
    raw_u, raw_i = raw_u[keep], raw_i[keep]
    user_ids = tuple(natural_sorted(set(raw_u.tolist())))
    item_ids = tuple(natural_sorted(set(raw_i.tolist())))
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    users = np.array([uidx[u] for u in raw_u], dtype=np.int64)
    items = np.array([iidx[i] for i in raw_i], dtype=np.int64)
    order = np.lexsort((items, users))
    return InteractionLog(
        users=users[order],
        items=items[order],
        split=np.full(len(users), UNSPLIT),
        user_ids=user_ids,
        item_ids=item_ids,
    )


def load_interactions(path, min_user_freq=1, min_item_freq=1):
    """Read ``user<TAB>item[<TAB>rating[<TAB>timestamp]]`` and filter to a fixed point."""
    pairs = [(c[0], c[1]) for _, c in _iter_rows(path, 2)]
    return filter_interactions(pairs, min_user_freq, min_item_freq)


def load_split(path):
    """Read a canonical ``user<TAB>item<TAB>split`` file written by :func:`write_split`."""
    rows = [(c[0], c[1], c[2]) for _, c in _iter_rows(path, 3, 3)]
    user_ids = tuple(natural_sorted({r[0] for r in rows}))
    item_ids = tuple(natural_sorted({r[1] for r in rows}))
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    try:
        split = [SPLIT_CODES[r[2]] for r in rows]
    except KeyError as exc:
        raise ValueError(f"{path}: unknown split tag {exc.args[0]!r}") from None
    return InteractionLog(
        users=[uidx[r[0]] for r in rows],
        items=[iidx[r[1]] for r in rows],
        split=split,
        user_ids=user_ids,
        item_ids=item_ids,
    )


def write_split(log, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i, s in log.records():
            fh.write(f"{u}\t{i}\t{s}\n")


def write_interactions(log, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i, _ in log.records():
            fh.write(f"{u}\t{i}\n")


# ---------------------------------------------------------------------------
# knowledge graph


@dataclass(frozen=True)
class KnowledgeGraph:
    """Triples plus their id/name vocabularies, with array views for training."""

    triples: tuple
    entity_names: tuple
    relation_names: tuple
    heads: np.ndarray = field(init=False, repr=False)
    relations: np.ndarray = field(init=False, repr=False)
    tails: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "triples", tuple(self.triples))
        arr = np.array(
            [(t.head, t.relation, t.tail) for t in self.triples], dtype=np.int64
        ).reshape(-1, 3)
        object.__setattr__(self, "heads", _readonly(arr[:, 0].copy()))
        object.__setattr__(self, "relations", _readonly(arr[:, 1].copy()))
        object.__setattr__(self, "tails", _readonly(arr[:, 2].copy()))

    @classmethod
    def from_triples(cls, triples):
        triples = list(triples)
        ents, rels = {}, {}
        for t in triples:
            ents[t.head] = t.head_name
            ents[t.tail] = t.tail_name
            rels[t.relation] = t.relation_name
        n_e = max(ents, default=-1) + 1
        n_r = max(rels, default=-1) + 1
        if sorted(ents) != list(range(n_e)) or sorted(rels) != list(range(n_r)):
            raise ValueError("entity and relation ids must be contiguous from 0")
        return cls(
            triples=triples,
            entity_names=tuple(ents[k] for k in range(n_e)),
            relation_names=tuple(rels[k] for k in range(n_r)),
        )

    @property
    def n_entities(self):
        return len(self.entity_names)

    @property
    def n_relations(self):
        return len(self.relation_names)

    def __len__(self):
        return len(self.triples)

    def encode(self, heads, relations, tails):
        """Collision-free int64 key per (h, r, t) used for membership tests."""
        heads, relations, tails = (np.asarray(x, dtype=np.int64) for x in (heads, relations, tails))
        return (heads * self.n_relations + relations) * self.n_entities + tails

    @cached_property
    def triple_keys(self):
        return np.unique(self.encode(self.heads, self.relations, self.tails))

    def contains(self, heads, relations, tails):
        keys = self.encode(heads, relations, tails)
        pos = np.searchsorted(self.triple_keys, keys)
        pos = np.minimum(pos, len(self.triple_keys) - 1)
        return self.triple_keys[pos] == keys

    @cached_property
    def entity_index(self):
        return {normalize_name(n): k for k, n in enumerate(self.entity_names)}

    def make_triple(self, h, r, t):
        return Triple(
            int(h), int(r), int(t),
            self.entity_names[h], self.relation_names[r], self.entity_names[t],
        )


def build_triples(rows, min_entity_freq=1, dropped_relations=()):
    """Turn ``(head, relation, tail)`` name rows into id-assigned :class:`Triple` s.

    Dropped relations go first, then entities with fewer than
    ``min_entity_freq`` appearances (head or tail position) are removed with
    their triples until nothing changes.
    """
    dropped = {normalize_name(r) for r in dropped_relations}
    rows = [r for r in rows if normalize_name(r[1]) not in dropped]
    while rows:
        freq = Counter()
        for h, _, t in rows:
            freq[h] += 1
            freq[t] += 1
        kept = [r for r in rows if freq[r[0]] >= min_entity_freq and freq[r[2]] >= min_entity_freq]
        if len(kept) == len(rows):
            break
        rows = kept
    if not rows:
        raise EmptyDatasetError(f"no triples left after filtering (min_entity_freq={min_entity_freq})")
    ents = {e: k for k, e in enumerate(natural_sorted({h for h, _, _ in rows} | {t for _, _, t in rows}))}
    rels = {r: k for k, r in enumerate(natural_sorted({r for _, r, _ in rows}))}
    return [Triple(ents[h], rels[r], ents[t], h, r, t) for h, r, t in rows]


def load_triples(path, min_entity_freq=1, dropped_relations=()):
    """Read ``head<TAB>relation<TAB>tail`` rows and filter them (see :func:`build_triples`)."""
    rows = [tuple(c) for _, c in _iter_rows(path, 3, 3)]
    return build_triples(rows, min_entity_freq, dropped_relations)


def write_triples(triples, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(f"{t.head_name}\t{t.relation_name}\t{t.tail_name}\n")


# ---------------------------------------------------------------------------
# item <-> entity linking


def load_item_links(path):
    """``item<TAB>entity-name`` rows as a dict (last row wins on duplicates)."""
    return {c[0]: c[1] for _, c in _iter_rows(path, 2, 2)}


def link_items(log, links, kg):
    """Attach KG entity indices to items by normalized exact name matching.

    Unmatched items stay at -1. When two items resolve to one entity, the
    item with the smaller index keeps it and the other is unlinked.
    """
    item_to_entity = np.full(log.n_items, -1, dtype=np.int64)
    taken = {}
    for k, item in enumerate(log.item_ids):
        name = links.get(item)
        if name is None:
            continue
        ent = kg.entity_index.get(normalize_name(name))
        if ent is None:
            continue
        if ent in taken:
            logger.warning(
                "items %r and %r both link to entity %r; keeping the first",
                log.item_ids[taken[ent]], item, name,
            )
            continue
        taken[ent] = k
        item_to_entity[k] = ent
    n_linked = int((item_to_entity >= 0).sum())
    logger.info("linked %d of %d items to KG entities", n_linked, log.n_items)
    return log.with_links(item_to_entity)


def write_item_links(log, kg, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for k, ent in enumerate(log.item_to_entity):
            if ent >= 0:
                fh.write(f"{log.item_ids[k]}\t{kg.entity_names[ent]}\n")


def dataset_stats(log, kg=None):
    return DatasetStats(
        n_users=log.n_users,
        n_items=log.n_items,
        n_ratings=len(log),
        n_entities=kg.n_entities if kg is not None else 0,
        n_relations=kg.n_relations if kg is not None else 0,
        n_triples=len(kg) if kg is not None else 0,
    )


# ---------------------------------------------------------------------------
# splitting


def split_counts(n, ratios):
    """Per-user (train, valid, test) counts: largest remainder, then >= 1 test."""
    ratios = np.asarray(ratios, dtype=float)
    exact = n * ratios
    counts = np.floor(exact).astype(int)
    rem = exact - counts
    # stable: ties resolved toward the earlier split
    for k in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    if n > 0 and counts[2] == 0:
        donor = 0 if counts[0] >= counts[1] else 1
        counts[donor] -= 1
        counts[2] = 1
    return tuple(int(c) for c in counts)


def split_per_user(log, ratios=(0.7, 0.1, 0.2), seed=0):
    """Randomly split every user's records into train/valid/test.

    The per-user order is drawn from a single generator walking users in index
    order, so the result depends only on ``(log, ratios, seed)``.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    order = np.lexsort((log.items, log.users))
    users = log.users[order]
    bounds = np.searchsorted(users, np.arange(log.n_users + 1))
    split = np.empty(len(log), dtype=np.int8)
    for u in range(log.n_users):
        idx = order[bounds[u] : bounds[u + 1]]
        n = len(idx)
        if n == 0:
            continue
        if n < 3:
            logger.warning("user %r has only %d record(s); test set gets priority", log.user_ids[u], n)
        n_tr, n_va, _ = split_counts(n, ratios)
        idx = idx[rng.permutation(n)]
        split[idx[:n_tr]] = TRAIN
        split[idx[n_tr : n_tr + n_va]] = VALID
        split[idx[n_tr + n_va :]] = TEST
    return replace(log, split=split)


def cold_start_subsets(log, fraction, seed=0):
    """Keep ``4 * fraction`` of four random per-user quarters of the training records."""
    quarters = fraction * 4
    if not (0 < fraction <= 1) or abs(quarters - round(quarters)) > 1e-9:
        raise ValueError(f"fraction must be a multiple of 0.25 in (0, 1], got {fraction}")
    quarters = int(round(quarters))
    if quarters == 4:
        return log
    if (log.split == UNSPLIT).any():
        raise ValueError("cold_start_subsets needs an already split log")
    rng = np.random.default_rng(seed)
    tr = np.flatnonzero(log.split == TRAIN)
    tr = tr[np.lexsort((log.items[tr], log.users[tr]))]
    users = log.users[tr]
    bounds = np.searchsorted(users, np.arange(log.n_users + 1))
    keep = np.ones(len(log), dtype=bool)
    for u in range(log.n_users):
        idx = tr[bounds[u] : bounds[u + 1]]
        if len(idx) == 0:
            continue
        parts = np.array_split(idx[rng.permutation(len(idx))], 4)
        for part in parts[quarters:]:
            keep[part] = False
    return replace(
        log,
        users=log.users[keep],
        items=log.items[keep],
        split=log.split[keep],
    )


def holdout_split(kg, fraction=0.1, seed=0):
    """``(train_kg, test_indices)``: held-out triples whose entities remain in training.

    Returned indices refer to ``kg``; ``train_kg`` keeps the same id space.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(kg))
    n_test = int(round(fraction * len(kg)))
    test, train = [], []
    deg = np.bincount(np.concatenate([kg.heads, kg.tails]), minlength=kg.n_entities)
    rel_count = np.bincount(kg.relations, minlength=kg.n_relations)
    for k in order:
        h, r, t = kg.heads[k], kg.relations[k], kg.tails[k]
        if len(test) < n_test and deg[h] > 1 and deg[t] > 1 and rel_count[r] > 1:
            test.append(k)
            deg[h] -= 1
            deg[t] -= 1
            rel_count[r] -= 1
        else:
            train.append(k)
    train_kg = KnowledgeGraph(
        triples=[kg.triples[k] for k in sorted(train)],
        entity_names=kg.entity_names,
        relation_names=kg.relation_names,
    )
    return train_kg, np.array(sorted(test))


# ---------------------------------------------------------------------------
# negative sampling


def sample_negative_item(log, user, rng):
    """Uniform draw from the items ``user`` has no training interaction with."""
    seen = log._train_sets[user]
    n_free = log.n_items - len(seen)
    if n_free <= 0:
        raise SamplingError(f"user {log.user_ids[user]!r} has interacted with every item")
    # rejection is cheap while the catalog is mostly unseen
    if n_free * 4 >= log.n_items:
        while True:
            j = int(rng.integers(log.n_items))
            if j not in seen:
                return j
    pool = np.setdiff1d(np.arange(log.n_items), log.train_items[user], assume_unique=True)
    return int(pool[rng.integers(len(pool))])


def sample_negative_items(log, users, rng):
    """Vectorised :func:`sample_negative_item` for a batch of users."""
    users = np.asarray(users, dtype=np.int64)
    out = rng.integers(log.n_items, size=len(users))
    sets = log._train_sets
    bad = np.array([out[k] in sets[u] for k, u in enumerate(users)], dtype=bool)
    for _ in range(20):
        if not bad.any():
            return out
        idx = np.flatnonzero(bad)
        out[idx] = rng.integers(log.n_items, size=len(idx))
        bad[idx] = [out[k] in sets[users[k]] for k in idx]
    for k in np.flatnonzero(bad):
        out[k] = sample_negative_item(log, int(users[k]), rng)
    return out
