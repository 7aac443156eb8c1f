"""Small synthetic worlds for tests, demos and desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .kg_data import KnowledgeGraph, build_triples, filter_interactions, link_items

WORDS = (
    "amber", "basil", "cobalt", "dune", "ember", "fjord", "garnet", "harbor",
    "indigo", "juniper", "kelp", "lagoon", "meadow", "nectar", "onyx", "pebble",
)
RELATION_WORDS = ("genre", "director", "starring", "studio", "country", "writer")


def block_kg(n_entities=50, n_relations=4, n_blocks=5, tails_per_relation=3, seed=0):
    """Block-structured KG with one category hub per block.

    ``n_blocks`` of the entities are hubs; every other entity belongs to a
    block, points at its hub through relation 0 ("category") and, for
    ``r >= 1``, at ``tails_per_relation`` random members of block
    ``(b + r) % n_blocks``. Held-out tails are therefore predictable from
    block membership, which the hubs expose one hop away.
    """
    rng = np.random.default_rng(seed)
    n_members = n_entities - n_blocks
    block = np.arange(n_members) % n_blocks
    names = [f"{WORDS[block[e] % len(WORDS)]} item {e}" for e in range(n_members)]
    hubs = [WORDS[b % len(WORDS)] for b in range(n_blocks)]
    rels = ["category"] + [RELATION_WORDS[r % len(RELATION_WORDS)] for r in range(1, n_relations)]
    rows = set()
    for e in range(n_members):
        rows.add((names[e], rels[0], hubs[block[e]]))
        for r in range(1, n_relations):
            target = np.flatnonzero(block == (block[e] + r) % n_blocks)
            for t in rng.choice(target, size=min(tails_per_relation, len(target)), replace=False):
                rows.add((names[e], rels[r], names[t]))
    return KnowledgeGraph.from_triples(build_triples(sorted(rows)))


def preference_world(n_users=20, n_items=30, n_clusters=5, per_user=6, noise=0.0, seed=0):
    """Users that each draw ``per_user`` items from one favourite item cluster.

    Returns an unsplit :class:`~kirs.kg_data.InteractionLog` and the item
    cluster array (indexed by item position in the log).
    """
    rng = np.random.default_rng(seed)
    cluster = np.arange(n_items) % n_clusters
    pairs = []
    for u in range(n_users):
        fav = u % n_clusters
        pool = np.flatnonzero(cluster == fav)
        picks = set(rng.choice(pool, size=min(per_user, len(pool)), replace=False).tolist())
        if noise:
            extra = rng.choice(n_items, size=int(round(noise * per_user)), replace=False)
            picks |= set(extra.tolist())
        pairs += [(f"u{u:03d}", f"i{i:03d}") for i in sorted(picks)]
    # every item must appear at least once to survive indexing
    pairs += [(f"u{u % n_users:03d}", f"i{i:03d}") for u, i in enumerate(range(n_items))]
    log = filter_interactions(pairs)
    item_cluster = np.array([int(i[1:]) % n_clusters for i in log.item_ids])
    return log, item_cluster


def recommendation_world(n_users=300, n_items=240, n_clusters=6, per_user=12, focus=0.85,
                         attrs_per_cluster=3, n_relations=4, link_noise=0.1, n_favourites=2, seed=0):
    """Clustered users/items plus a KG that reveals item clusters through attributes.

    Each user favours ``n_favourites`` clusters and draws ``focus`` of their items from
    them. Item ``k`` is KG entity ``"title k"``; every relation links it to a
    cluster-specific attribute entity (random attribute with probability
    ``link_noise``). Returns ``(log, kg, item_cluster)`` with items linked.
    """
    rng = np.random.default_rng(seed)
    cluster = rng.integers(n_clusters, size=n_items)
    by_cluster = [np.flatnonzero(cluster == c) for c in range(n_clusters)]
    pairs = []
    for u in range(n_users):
        favs = rng.choice(n_clusters, size=n_favourites, replace=False)
        n_focus = int(round(focus * per_user))
        pool = np.concatenate([by_cluster[c] for c in favs])
        items = set(rng.choice(pool, size=min(n_focus, len(pool)), replace=False).tolist())
        while len(items) < per_user:
            items.add(int(rng.integers(n_items)))
        pairs += [(f"u{u:04d}", f"i{i:04d}") for i in sorted(items)]
    log = filter_interactions(pairs, 1, 1)

    rows = []
    for k in range(n_items):
        for r in range(n_relations):
            c = cluster[k] if rng.random() >= link_noise else rng.integers(n_clusters)
            a = rng.integers(attrs_per_cluster)
            rel = RELATION_WORDS[r % len(RELATION_WORDS)]
            rows.append((f"title {k}", rel, f"{rel} {WORDS[c % len(WORDS)]} {a}"))
    kg = KnowledgeGraph.from_triples(build_triples(rows))
    links = {f"i{k:04d}": f"title {k}" for k in range(n_items)}
    log = link_items(log, links, kg)
    item_cluster = np.array([cluster[int(i[1:])] for i in log.item_ids])
    return log, kg, item_cluster
