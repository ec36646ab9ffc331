"""Small knowledge graphs with planted relational structure.

Entities sit in ``n_clusters`` equal-size clusters. Each relation accepts
heads from a few domain clusters and sends every domain cluster to one target
cluster; inside the target cluster tails follow a relation-specific Zipf
popularity order. A ``noise`` share of tails is uniform over all entities.
Relation frequencies are Zipf-distributed too, so part of the relations are
long-tail.

The signal is low-rank (cluster membership plus a popularity direction), so a
model of a few dozen dimensions is over-parameterized for it, which is the
regime where a heavily pruned student can keep up with its dense teacher.
"""
from __future__ import annotations

import numpy as np

from .graph import Dataset, Vocab


def make_synthetic_kg(n_entities: int = 150, n_relations: int = 40, n_train: int = 5000,
                      n_valid: int = 500, n_test: int = 500, n_clusters: int = 6,
                      domain_clusters: int = 3, popularity: float = 1.0, noise: float = 0.05,
                      zipf: float = 1.0, seed: int = 0) -> Dataset:
    """Draw train/valid/test splits of distinct triples; names are synthetic.

    A relation that cannot produce its quota of distinct triples keeps what it
    has, so tiny graphs may come out smaller than requested.
    """
    rng = np.random.default_rng(seed)
    size = n_entities // n_clusters
    if size < 2:
        raise ValueError("need at least two entities per cluster")
    n_entities = size * n_clusters
    members = np.arange(n_entities).reshape(n_clusters, size)
    pop = 1.0 / np.arange(1, size + 1) ** popularity
    pop /= pop.sum()

    total = n_train + n_valid + n_test
    weights = 1.0 / np.arange(1, n_relations + 1) ** zipf
    weights = weights[rng.permutation(n_relations)]
    quota = np.maximum(1, np.round(weights / weights.sum() * total)).astype(np.int64)

    seen = set()
    triples = []
    for r in range(n_relations):
        domain = rng.choice(n_clusters, size=min(domain_clusters, n_clusters), replace=False)
        target = rng.integers(0, n_clusters, size=n_clusters)
        order = [rng.permutation(size) for _ in range(n_clusters)]
        made = tries = 0
        while made < quota[r] and tries < 50 * quota[r]:
            tries += 1
            c = domain[rng.integers(len(domain))]
            h = int(members[c, rng.integers(size)])
            if rng.random() < noise:
                t = int(rng.integers(n_entities))
            else:
                tc = target[c]
                t = int(members[tc, order[tc][rng.choice(size, p=pop)]])
            if t == h or (h, r, t) in seen:
                continue
            seen.add((h, r, t))
            triples.append((h, r, t))
            made += 1

    triples = np.array(triples, dtype=np.int64).reshape(-1, 3)
    triples = triples[rng.permutation(len(triples))]
    vocab = Vocab(tuple(f"e{i:04d}" for i in range(n_entities)),
                  tuple(f"r{i:03d}" for i in range(n_relations)))
    n_valid = min(n_valid, len(triples) // 10)
    n_test = min(n_test, len(triples) // 10)
    valid = triples[:n_valid]
    test = triples[n_valid:n_valid + n_test]
    train = triples[n_valid + n_test:]
    return Dataset(vocab, train, valid, test, digest=f"synthetic-{seed}")
