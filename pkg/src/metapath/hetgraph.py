"""Heterogeneous graph data model, label splits and TSV ingestion."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PARTITIONS = ("train", "val", "test")


class GraphFormatError(ValueError):
    """Raised when an input file does not follow the TSV format."""

    def __init__(self, path, lineno: int | None, message: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = path
        self.lineno = lineno


def _csr(src: np.ndarray, dst: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # stable sort by (src, dst) keeps parallel edges and gives ascending neighbor lists
    order = np.lexsort((dst, src))
    indices = dst[order].astype(np.int64)
    counts = np.bincount(src, minlength=n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, indices


@dataclass(frozen=True, eq=False)
class HetGraph:
    """Immutable typed multigraph with dense node features.

    ``features`` already contains the one-hot node-type block appended after
    the ``raw_dim`` raw attribute columns.
    """

    node_type: np.ndarray
    features: np.ndarray
    indptr: tuple[np.ndarray, ...]
    indices: tuple[np.ndarray, ...]
    rindptr: tuple[np.ndarray, ...]
    rindices: tuple[np.ndarray, ...]
    relation_names: tuple[str, ...]
    type_names: tuple[str, ...]
    node_names: tuple[str, ...]
    raw_dim: int = 0
    _src_types: tuple[frozenset, ...] = field(default=(), repr=False)
    _dst_types: tuple[frozenset, ...] = field(default=(), repr=False)

    @classmethod
    def from_edges(
        cls,
        node_type: Sequence[int],
        edges: Iterable[tuple[int, int, int]],
        num_relations: int | None = None,
        raw_features: np.ndarray | None = None,
        relation_names: Sequence[str] | None = None,
        type_names: Sequence[str] | None = None,
        node_names: Sequence[str] | None = None,
    ) -> "HetGraph":
        """Build a graph from ``(src, rel, dst)`` triples."""
        node_type = np.asarray(node_type, dtype=np.int64)
        n = len(node_type)
        if n == 0:
            raise ValueError("graph needs at least one node")
        if node_type.min() < 0:
            raise ValueError("node types must be non-negative")
        n_types = int(node_type.max()) + 1
        if type_names is not None:
            n_types = max(n_types, len(type_names))
        triples = np.asarray(list(edges), dtype=np.int64).reshape(-1, 3)
        if num_relations is None:
            num_relations = len(relation_names) if relation_names is not None else (
                int(triples[:, 1].max()) + 1 if len(triples) else 0)
        if len(triples):
            if triples[:, [0, 2]].min() < 0 or triples[:, [0, 2]].max() >= n:
                bad = triples[(triples[:, [0, 2]] < 0).any(1) | (triples[:, [0, 2]] >= n).any(1)][0]
                raise ValueError(f"dangling node id in edge {tuple(int(x) for x in bad)} (graph has {n} nodes)")
            if triples[:, 1].min() < 0 or triples[:, 1].max() >= num_relations:
                raise ValueError("relation id out of range")
        if raw_features is None:
            raw_features = np.zeros((n, 0))
        raw_features = np.asarray(raw_features, dtype=np.float64).reshape(n, -1)
        if not np.all(np.isfinite(raw_features)):
            raise ValueError("node features must be finite")
        onehot = np.zeros((n, n_types))
        onehot[np.arange(n), node_type] = 1.0
        features = np.hstack([raw_features, onehot])

        fwd_ptr, fwd_idx, rev_ptr, rev_idx, srcT, dstT = [], [], [], [], [], []
        for r in range(num_relations):
            sel = triples[triples[:, 1] == r]
            s, d = sel[:, 0], sel[:, 2]
            p, i = _csr(s, d, n)
            fwd_ptr.append(p)
            fwd_idx.append(i)
            p, i = _csr(d, s, n)
            rev_ptr.append(p)
            rev_idx.append(i)
            srcT.append(frozenset(int(t) for t in np.unique(node_type[s])))
            dstT.append(frozenset(int(t) for t in np.unique(node_type[d])))
        for arr in (node_type, features, *fwd_ptr, *fwd_idx, *rev_ptr, *rev_idx):
            arr.setflags(write=False)
        return cls(
            node_type=node_type,
            features=features,
            indptr=tuple(fwd_ptr),
            indices=tuple(fwd_idx),
            rindptr=tuple(rev_ptr),
            rindices=tuple(rev_idx),
            relation_names=tuple(relation_names) if relation_names is not None
            else tuple(f"r{r}" for r in range(num_relations)),
            type_names=tuple(type_names) if type_names is not None
            else tuple(f"t{t}" for t in range(n_types)),
            node_names=tuple(node_names) if node_names is not None else tuple(str(i) for i in range(n)),
            raw_dim=raw_features.shape[1],
            _src_types=tuple(srcT),
            _dst_types=tuple(dstT),
        )

    @property
    def num_nodes(self) -> int:
        return len(self.node_type)

    @property
    def num_relations(self) -> int:
        return len(self.indptr)

    @property
    def num_types(self) -> int:
        return len(self.type_names)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def num_edges(self, r: int | None = None) -> int:
        if r is None:
            return sum(len(i) for i in self.indices)
        return len(self.indices[r])

    def neighbors(self, r: int, i: int) -> np.ndarray:
        """Out-neighbors of ``i`` under relation ``r``, ascending."""
        self._check_rel(r)
        p = self.indptr[r]
        return self.indices[r][p[i]:p[i + 1]]

    def reverse_neighbors(self, r: int, j: int) -> np.ndarray:
        """Nodes ``i`` with an edge ``(i, j)`` of relation ``r``, ascending."""
        self._check_rel(r)
        p = self.rindptr[r]
        return self.rindices[r][p[j]:p[j + 1]]

    def degree(self, r: int) -> np.ndarray:
        return np.diff(self.indptr[r])

    def edges(self, r: int) -> np.ndarray:
        """Edge list of relation ``r`` as an ``(E, 2)`` array sorted by source."""
        src = np.repeat(np.arange(self.num_nodes), self.degree(r))
        return np.column_stack([src, self.indices[r]])

    def source_types(self, r: int) -> frozenset:
        return self._src_types[r]

    def dest_types(self, r: int) -> frozenset:
        return self._dst_types[r]

    def relation_id(self, name: str) -> int:
        try:
            return self.relation_names.index(name)
        except ValueError:
            raise KeyError(f"unknown relation {name!r}") from None

    def _check_rel(self, r: int) -> None:
        if not 0 <= r < self.num_relations:
            raise IndexError(f"relation id {r} out of range [0, {self.num_relations})")

    def with_features(self, raw_features: np.ndarray | None, keep_types: bool = True) -> "HetGraph":
        """Copy of the graph with replaced node features.

        With ``keep_types=False`` the type block is dropped as well and every
        node gets the same constant feature, which removes all node-level
        information (feature ablation).
        """
        n = self.num_nodes
        if keep_types:
            raw = np.zeros((n, 0)) if raw_features is None else np.asarray(raw_features, float).reshape(n, -1)
            feats = np.hstack([raw, self.features[:, self.raw_dim:]])
            raw_dim = raw.shape[1]
        else:
            feats = np.ones((n, 1))
            raw_dim = 1
        feats.setflags(write=False)
        return HetGraph(self.node_type, feats, self.indptr, self.indices, self.rindptr, self.rindices,
                        self.relation_names, self.type_names, self.node_names, raw_dim,
                        self._src_types, self._dst_types)

    def check_invariants(self) -> None:
        """Full scan of adjacency/reverse-adjacency consistency."""
        for r in range(self.num_relations):
            fwd = self.edges(r)
            src = np.repeat(np.arange(self.num_nodes), np.diff(self.rindptr[r]))
            rev = np.column_stack([self.rindices[r], src])
            a = fwd[np.lexsort((fwd[:, 1], fwd[:, 0]))]
            b = rev[np.lexsort((rev[:, 1], rev[:, 0]))]
            if a.shape != b.shape or not np.array_equal(a, b):
                raise AssertionError(f"relation {r}: adjacency and reverse adjacency disagree")


@dataclass(frozen=True)
class MetaPath:
    """Ordered relation sequence ``r_1 ... r_L``."""

    relations: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "relations", tuple(int(r) for r in self.relations))
        if len(self.relations) < 1:
            raise ValueError("a meta-path needs at least one relation")

    def __len__(self) -> int:
        return len(self.relations)

    def __iter__(self):
        return iter(self.relations)

    def __getitem__(self, k):
        return self.relations[k]

    def extend(self, r: int) -> "MetaPath":
        return MetaPath(self.relations + (int(r),))

    def is_valid(self, g: HetGraph) -> bool:
        if any(not 0 <= r < g.num_relations for r in self.relations):
            return False
        return all(g.dest_types(a) & g.source_types(b)
                   for a, b in zip(self.relations, self.relations[1:]))

    def names(self, g: HetGraph) -> list[str]:
        return [g.relation_names[r] for r in self.relations]

    def __str__(self) -> str:
        return "->".join(str(r) for r in self.relations)


@dataclass(frozen=True)
class LabeledSplit:
    """Node labels with a train/val/test assignment."""

    nodes: np.ndarray
    classes: np.ndarray
    partition: np.ndarray  # 0 train, 1 val, 2 test
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64)
        classes = np.asarray(self.classes, dtype=np.int64)
        part = np.asarray(self.partition, dtype=np.int64)
        if not (len(nodes) == len(classes) == len(part)):
            raise ValueError("nodes, classes and partition must have equal length")
        if len(np.unique(nodes)) != len(nodes):
            raise ValueError("a labeled node appears more than once")
        if len(part) and (part.min() < 0 or part.max() > 2):
            raise ValueError("partition must be 0 (train), 1 (val) or 2 (test)")
        if len(classes):
            present = np.unique(classes)
            if present[0] != 0 or present[-1] != len(present) - 1:
                raise ValueError("class indices must be contiguous from 0")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "partition", part)
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(str(c) for c in range(self.num_classes)))

    @property
    def num_classes(self) -> int:
        return int(self.classes.max()) + 1 if len(self.classes) else 0

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(nodes, classes)`` of one partition."""
        mask = self.partition == PARTITIONS.index(name)
        return self.nodes[mask], self.classes[mask]

    @property
    def train(self):
        return self.part("train")

    @property
    def val(self):
        return self.part("val")

    @property
    def test(self):
        return self.part("test")


def _normalize_ratios(ratios: Sequence[float]) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    if not np.isclose(r.sum(), 1.0):
        log.warning("split ratios %s do not sum to 1; normalizing to %s", list(ratios),
                    [round(x, 4) for x in r / r.sum()])
    return r / r.sum()


def _allocate(n: int, ratios: np.ndarray) -> np.ndarray:
    # largest-remainder rounding, then make sure train gets one node if any exist
    raw = ratios * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    if n > 0 and counts[0] == 0 and ratios[0] > 0:
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[0] += 1
    return counts


def split_labels(labels, ratios=(0.8, 0.1, 0.1), seed: int = 0, num_classes: int | None = None,
                 class_names: Sequence[str] = ()) -> LabeledSplit:
    """Stratified, seeded train/val/test split.

    ``labels`` is a mapping or a sequence of ``(node, class)`` pairs.
    """
    pairs = sorted(labels.items() if hasattr(labels, "items") else labels)
    if not pairs:
        raise ValueError("no labeled nodes")
    nodes = np.array([p[0] for p in pairs], dtype=np.int64)
    classes = np.array([p[1] for p in pairs], dtype=np.int64)
    C = num_classes if num_classes is not None else int(classes.max()) + 1
    counts = np.bincount(classes, minlength=C)
    if np.any(counts == 0):
        raise ValueError(f"class(es) {np.flatnonzero(counts == 0).tolist()} have no labeled nodes")
    r = _normalize_ratios(ratios)
    rng = np.random.default_rng(seed)
    part = np.empty(len(nodes), dtype=np.int64)
    for c in range(C):
        idx = np.flatnonzero(classes == c)
        idx = idx[rng.permutation(len(idx))]
        k = _allocate(len(idx), r)
        part[idx[:k[0]]] = 0
        part[idx[k[0]:k[0] + k[1]]] = 1
        part[idx[k[0] + k[1]:]] = 2
    return LabeledSplit(nodes, classes, part, tuple(class_names))


# --------------------------------------------------------------------------
# TSV ingestion


def _read_rows(path: Path, header: Sequence[str], optional: int = 0):
    with open(path, encoding="utf-8", newline="\n") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].strip():
        raise GraphFormatError(path, 1, "missing header")
    head = lines[0].rstrip("\r").split("\t")
    need = len(header) - optional
    if head[:need] != list(header[:need]) or len(head) > len(header):
        raise GraphFormatError(path, 1, f"expected header {header!r}, got {head!r}")
    for k, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != len(head):
            raise GraphFormatError(path, k, f"expected {len(head)} columns, got {len(cols)}")
        yield k, cols


def _class_order(names: Iterable[str]) -> list[str]:
    names = set(names)
    try:
        return sorted(names, key=lambda s: (int(s), s))
    except ValueError:
        return sorted(names)


def load_graph(nodes_file, edges_file, labels_file=None, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Read the nodes/edges/labels TSV triplet.

    Returns ``(graph, split)``; ``split`` is None when no labels file is given.
    When the labels file has no split column the labels are split with
    :func:`split_labels`.
    """
    nodes_file, edges_file = Path(nodes_file), Path(edges_file)
    ids: dict[str, int] = {}
    type_ids: dict[str, int] = {}
    node_type, feats = [], []
    dim = None
    for k, (nid, tname, fstr) in _read_rows(nodes_file, ("id", "type", "features")):
        if nid in ids:
            raise GraphFormatError(nodes_file, k, f"duplicate node id {nid!r}")
        ids[nid] = len(ids)
        node_type.append(type_ids.setdefault(tname, len(type_ids)))
        try:
            vec = [float(x) for x in fstr.split(",")] if fstr.strip() else []
        except ValueError:
            raise GraphFormatError(nodes_file, k, f"bad feature value in {fstr!r}") from None
        if not all(np.isfinite(vec)):
            raise GraphFormatError(nodes_file, k, "non-finite feature value")
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise GraphFormatError(nodes_file, k, f"feature dimension {len(vec)} != {dim}")
        feats.append(vec)
    if not ids:
        raise GraphFormatError(nodes_file, None, "no nodes")

    rel_ids: dict[str, int] = {}
    triples = []
    for k, (s, rel, d) in _read_rows(edges_file, ("src", "rel", "dst")):
        for x in (s, d):
            if x not in ids:
                raise GraphFormatError(edges_file, k, f"dangling node id {x!r}")
        triples.append((ids[s], rel_ids.setdefault(rel, len(rel_ids)), ids[d]))

    g = HetGraph.from_edges(
        node_type, triples, num_relations=len(rel_ids),
        raw_features=np.array(feats, dtype=np.float64).reshape(len(ids), dim or 0),
        relation_names=list(rel_ids), type_names=list(type_ids), node_names=list(ids),
    )
    if labels_file is None:
        return g, None

    labels_file = Path(labels_file)
    rows = []
    for k, cols in _read_rows(labels_file, ("node", "class", "split"), optional=1):
        if cols[0] not in ids:
            raise GraphFormatError(labels_file, k, f"dangling node id {cols[0]!r}")
        split = cols[2] if len(cols) > 2 and cols[2] else None
        if split is not None and split not in PARTITIONS:
            raise GraphFormatError(labels_file, k, f"split must be one of {PARTITIONS}, got {split!r}")
        rows.append((ids[cols[0]], cols[1], split, k))
    if not rows:
        raise GraphFormatError(labels_file, None, "no labels")
    names = _class_order(r[1] for r in rows)
    cidx = {c: i for i, c in enumerate(names)}
    seen = set()
    for node, _, _, k in rows:
        if node in seen:
            raise GraphFormatError(labels_file, k, f"node {g.node_names[node]!r} labeled twice")
        seen.add(node)
    has_split = [r[2] is not None for r in rows]
    if all(has_split):
        split = LabeledSplit([r[0] for r in rows], [cidx[r[1]] for r in rows],
                             [PARTITIONS.index(r[2]) for r in rows], tuple(names))
    elif not any(has_split):
        split = split_labels([(r[0], cidx[r[1]]) for r in rows], ratios, seed, len(names), names)
    else:
        raise GraphFormatError(labels_file, None, "split column must be filled for all rows or none")
    return g, split


def write_graph(out_dir, g: HetGraph, split: LabeledSplit | None = None, with_split: bool = True) -> list[Path]:
    """Write ``g`` (and labels) as the TSV triplet; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "nodes.tsv", out / "edges.tsv"]
    with open(paths[0], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\ttype\tfeatures\n")
        raw = g.features[:, :g.raw_dim]
        for v in range(g.num_nodes):
            fstr = ",".join(repr(float(x)) for x in raw[v])
            fh.write(f"{g.node_names[v]}\t{g.type_names[g.node_type[v]]}\t{fstr}\n")
    with open(paths[1], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("src\trel\tdst\n")
        # relations in id order so first-appearance numbering is preserved on reload
        for r in range(g.num_relations):
            for s, d in g.edges(r):
                fh.write(f"{g.node_names[s]}\t{g.relation_names[r]}\t{g.node_names[d]}\n")
    if split is not None:
        paths.append(out / "labels.tsv")
        with open(paths[2], "w", encoding="utf-8", newline="\n") as fh:
            fh.write("node\tclass\tsplit\n" if with_split else "node\tclass\n")
            for v, c, p in zip(split.nodes, split.classes, split.partition):
                row = f"{g.node_names[v]}\t{split.class_names[c]}"
                fh.write(row + (f"\t{PARTITIONS[p]}\n" if with_split else "\n"))
    return paths
