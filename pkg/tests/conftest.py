from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from metapath.hetgraph import HetGraph, load_graph

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"
TOY = FIXTURES / "toy"


def load_toy():
    return load_graph(TOY / "nodes.tsv", TOY / "edges.tsv", TOY / "labels.tsv")


@pytest.fixture(scope="session")
def toy():
    return load_toy()


def node_id(g: HetGraph, name: str) -> int:
    return g.node_names.index(name)


def random_graph(rng, n=30, num_relations=3, num_types=2, num_edges=60, dim=2, self_loops=True):
    """Random typed multigraph; returns ``(g, triples)``."""
    node_type = rng.integers(0, num_types, size=n)
    node_type[:num_types] = np.arange(num_types)
    s = rng.integers(0, n, size=num_edges)
    d = rng.integers(0, n, size=num_edges)
    if not self_loops:
        d = np.where(d == s, (d + 1) % n, d)
    r = rng.integers(0, num_relations, size=num_edges)
    triples = [(int(a), int(b), int(c)) for a, b, c in zip(s, r, d)]
    feats = rng.normal(size=(n, dim)) if dim else None
    g = HetGraph.from_edges(node_type, triples, num_relations=num_relations, raw_features=feats)
    return g, triples


def replicate(g: HetGraph, copies: int) -> tuple[HetGraph, np.ndarray]:
    """Disjoint union of ``copies`` copies of ``g``; returns the graph and the node offsets."""
    n = g.num_nodes
    triples = []
    for c in range(copies):
        for r in range(g.num_relations):
            triples += [(int(s) + c * n, r, int(d) + c * n) for s, d in g.edges(r)]
    raw = np.tile(g.features[:, :g.raw_dim], (copies, 1))
    names = [f"{name}#{c}" for c in range(copies) for name in g.node_names]
    big = HetGraph.from_edges(np.tile(g.node_type, copies), triples, g.num_relations, raw,
                              g.relation_names, g.type_names, names)
    return big, np.arange(copies) * n


def two_cause_graph(seed=0, n_items=400, n_targets=200, degree=2.0):
    """Items are positive iff an r0 edge or an r1 edge reaches a marked target.

    r2 is a distractor with the same degree distribution. Marks are a raw
    feature on the targets, so each cause is captured by a length-1 path.
    """
    rng = np.random.default_rng(seed)
    n = n_items + n_targets
    node_type = np.r_[np.zeros(n_items, int), np.ones(n_targets, int)]
    marked = np.zeros(n)
    marked[n_items + rng.choice(n_targets, size=n_targets // 8, replace=False)] = 1.0
    triples = []
    for r in range(3):
        k = rng.poisson(degree, size=n_items)
        for i in range(n_items):
            for t in rng.integers(0, n_targets, size=k[i]):
                triples.append((i, r, n_items + int(t)))
    g = HetGraph.from_edges(node_type, triples, 3, marked.reshape(-1, 1))
    cause = np.zeros((2, n_items), bool)
    for s, r, d in triples:
        if r < 2 and marked[d]:
            cause[r, s] = True
    labels = (cause[0] | cause[1]).astype(int)
    return g, labels, cause
