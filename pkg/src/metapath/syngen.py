"""Synthetic A/B-typed benchmarks with a planted ground-truth meta-path.

A node is positive iff a typed instance of the ground-truth path starts at
it. Relations are either "pure" (valid for one source/destination type pair)
or "shared" (valid for two pairs, or all four in the fully shared setting).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hetgraph import HetGraph, LabeledSplit, MetaPath, split_labels, write_graph
from .scoring import NodeTargets

TYPE_NAMES = ("A", "B")
_PAIRS = ((0, 0), (0, 1), (1, 0), (1, 1))


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class SynSpec:
    nodes_per_type: int = 1000
    num_relations: int = 4
    num_shared: int = 0
    gt_length: int = 2
    gt_path: tuple[tuple[int, int], ...] | None = None   # ((relation, dest_type), ...)
    edge_density: float = 1.0
    min_positive: float = 0.15
    attribute: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_relations < 1 or not 0 <= self.num_shared <= self.num_relations:
            raise InfeasibleSpec(f"need 0 <= shared ({self.num_shared}) <= relations ({self.num_relations})")
        length = len(self.gt_path) if self.gt_path is not None else self.gt_length
        if not 1 <= length <= 6:
            raise InfeasibleSpec(f"ground-truth length must be in [1, 6], got {length}")
        if self.nodes_per_type < 1 or self.edge_density < 0 or not 0 <= self.min_positive < 1:
            raise InfeasibleSpec(f"invalid spec {self}")


@dataclass
class SynDataset:
    graph: HetGraph
    labels: NodeTargets
    gt_path: MetaPath
    gt_types: tuple[int, ...]
    spec: SynSpec
    validity: dict = field(default_factory=dict)
    attribute_hop: int | None = None

    def split(self, ratios=(0.8, 0.1, 0.1), seed: int | None = None) -> LabeledSplit:
        seed = self.spec.seed if seed is None else seed
        return split_labels(list(zip(self.labels.nodes.tolist(), self.labels.labels.tolist())), ratios, seed,
                            num_classes=2, class_names=("0", "1"))

    @property
    def positive_rate(self) -> float:
        return float(self.labels.labels.mean())


def validity_table(num_relations: int, num_shared: int) -> dict[int, frozenset]:
    """Relation -> set of valid ``(src_type, dst_type)`` pairs.

    Pure relation ``r`` connects ``_PAIRS[r % 4]``. Shared relations (even ids
    first, so that both source types get one) additionally connect their
    source type to the other destination type. When every relation is
    shared, every relation is valid between every type pair.
    """
    if num_shared == num_relations:
        return {r: frozenset(_PAIRS) for r in range(num_relations)}
    table = {r: {_PAIRS[r % 4]} for r in range(num_relations)}
    order = sorted(range(num_relations), key=lambda r: (r % 2, r))
    for r in order[:num_shared]:
        s, t = _PAIRS[r % 4]
        table[r].add((s, 1 - t))
    return {r: frozenset(v) for r, v in table.items()}


def _check_path(gt, table):
    for (r, t) in gt:
        if r not in table:
            raise InfeasibleSpec(f"ground-truth relation {r} does not exist")
        if not any(dst == t for _, dst in table[r]):
            raise InfeasibleSpec(f"relation {r} never ends in type {t}")
    for (r, t), (r2, _) in zip(gt, gt[1:]):
        if not any(src == t for src, _ in table[r2]):
            raise InfeasibleSpec(f"relation {r2} cannot start from type {t}")


def _random_path(rng, table, length):
    # prefer fresh relations; fall back to reuse when the table is too small
    for _ in range(200):
        r = int(rng.choice(sorted(table)))
        t = int(rng.choice(sorted({d for _, d in table[r]})))
        path, used = [(r, t)], {r}
        while len(path) < length:
            opts = [q for q in sorted(table) if any(s == t for s, _ in table[q])]
            fresh = [q for q in opts if q not in used] or opts
            if not fresh:
                break
            r = int(rng.choice(fresh))
            t = int(rng.choice(sorted({d for s, d in table[r] if s == path[-1][1]})))
            path.append((r, t))
            used.add(r)
        if len(path) == length:
            return tuple(path)
    raise InfeasibleSpec("could not draw a valid ground-truth path")


def _sample_edges(rng, spec, table, node_type, by_type):
    src_all, dst_all, rel_all = [], [], []
    n = len(node_type)
    for r in range(spec.num_relations):
        for s in (0, 1):
            dests = sorted({d for src, d in table[r] if src == s})
            if not dests:
                continue
            srcs = by_type[s]
            k = rng.poisson(spec.edge_density, size=len(srcs))
            src = np.repeat(srcs, k)
            dt = np.asarray(dests)[rng.integers(0, len(dests), size=len(src))]
            dst = np.empty(len(src), dtype=np.int64)
            for t in dests:
                sel = dt == t
                dst[sel] = rng.choice(by_type[t], size=int(sel.sum()))
            src_all.append(src)
            dst_all.append(dst)
            rel_all.append(np.full(len(src), r))
    if not src_all:
        return np.zeros((0, 3), dtype=np.int64)
    e = np.column_stack([np.concatenate(src_all), np.concatenate(rel_all), np.concatenate(dst_all)])
    key = (e[:, 0] * spec.num_relations + e[:, 1]) * n + e[:, 2]
    _, first = np.unique(key, return_index=True)
    return e[np.sort(first)]


def path_starts(edges: np.ndarray, n: int, node_type, gt, attr=None, attribute_hop=None) -> np.ndarray:
    """Boolean mask of nodes starting a typed instance of ``gt`` (backward DP)."""
    good = np.ones(n, dtype=bool)
    for depth in range(len(gt) - 1, -1, -1):
        r, t = gt[depth]
        ok_dst = good & (node_type == t)
        if attr is not None and attribute_hop == depth + 1:
            ok_dst &= attr > 0
        sel = edges[edges[:, 1] == r]
        hit = sel[ok_dst[sel[:, 2]]]
        good = np.zeros(n, dtype=bool)
        good[hit[:, 0]] = True
    return good


def generate(spec: SynSpec) -> SynDataset:
    rng = np.random.default_rng(spec.seed)
    table = validity_table(spec.num_relations, spec.num_shared)
    if spec.gt_path is not None:
        gt = tuple((int(r), int(t)) for r, t in spec.gt_path)
        _check_path(gt, table)
    else:
        gt = _random_path(rng, table, spec.gt_length)
    npt = spec.nodes_per_type
    node_type = np.repeat([0, 1], npt)
    n = len(node_type)
    by_type = [np.flatnonzero(node_type == t) for t in (0, 1)]
    attr = rng.integers(0, 2, size=n).astype(float) if spec.attribute else None
    hop = 1 if spec.attribute else None

    edges = _sample_edges(rng, spec, table, node_type, by_type)
    starts = sorted({s for s, d in table[gt[0][0]] if d == gt[0][1]})
    planted = []
    labels = path_starts(edges, n, node_type, gt, attr, hop)
    need = int(np.ceil(spec.min_positive * n))
    while labels.sum() < need:
        pool = np.flatnonzero(~labels & np.isin(node_type, starts))
        if len(pool) == 0:
            raise InfeasibleSpec("cannot reach the requested positive rate")
        batch = min(len(pool), max(1, (need - int(labels.sum())) // 2))
        new = []
        for x in rng.choice(pool, size=batch, replace=False):
            v = int(x)
            for depth, (r, t) in enumerate(gt):
                cands = by_type[t]
                if attr is not None and hop == depth + 1:
                    cands = cands[attr[cands] > 0]
                u = int(rng.choice(cands))
                new.append((v, r, u))
                v = u
            planted.append(int(x))
        edges = np.vstack([edges, np.array(new, dtype=np.int64)])
        labels = path_starts(edges, n, node_type, gt, attr, hop)

    raw = attr.reshape(-1, 1) if attr is not None else None
    g = HetGraph.from_edges(node_type, [tuple(e) for e in edges.tolist()], num_relations=spec.num_relations,
                            raw_features=raw, relation_names=[f"r{r}" for r in range(spec.num_relations)],
                            type_names=TYPE_NAMES)
    return SynDataset(graph=g, labels=NodeTargets(np.arange(n), labels.astype(np.int64)),
                      gt_path=MetaPath([r for r, _ in gt]), gt_types=tuple(t for _, t in gt),
                      spec=spec, validity=table, attribute_hop=hop)


def verify_labels(ds: SynDataset) -> bool:
    """Re-derive labels with a plain typed depth-first search."""
    g = ds.graph
    gt = list(zip(ds.gt_path.relations, ds.gt_types))
    attr = g.features[:, 0] if ds.attribute_hop is not None else None

    def walk(v, depth):
        if depth == len(gt):
            return True
        r, t = gt[depth]
        for u in g.neighbors(r, v):
            if g.node_type[u] != t:
                continue
            if attr is not None and depth + 1 == ds.attribute_hop and attr[u] <= 0:
                continue
            if walk(int(u), depth + 1):
                return True
        return False

    truth = ds.labels.as_dict()
    return all(int(walk(v, 0)) == truth.get(v, -1) for v in range(g.num_nodes))


def write_dataset(ds: SynDataset, out_dir, ratios=(0.8, 0.1, 0.1)) -> list[Path]:
    """TSV triplet (labels with split column) plus ``gt_path.json``."""
    out = Path(out_dir)
    split = ds.split(ratios)
    paths = write_graph(out, ds.graph, split)
    meta = {
        "relations": list(ds.gt_path.relations),
        "relation_names": ds.gt_path.names(ds.graph),
        "dest_types": [TYPE_NAMES[t] for t in ds.gt_types],
        "attribute_hop": ds.attribute_hop,
        "positive_rate": ds.positive_rate,
        "spec": {k: (list(map(list, v)) if k == "gt_path" and v is not None else v)
                 for k, v in asdict(ds.spec).items()},
    }
    gp = out / "gt_path.json"
    gp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths + [gp]
