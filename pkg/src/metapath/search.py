"""Greedy and beam meta-path search driven by the relation scorer.

Each search state keeps one target lineage per one-vs-rest class. A lineage
starts as node labels, turns into bags after the first chosen relation and
alternates between bags and node pseudo-labels afterwards.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .hetgraph import HetGraph, LabeledSplit, MetaPath
from .mpgnn import MPGNNModel, TrainConfig, f1_macro, train
from .scoring import (BagTargets, NodeTargets, ScorerConfig, Target, evolve_target, one_vs_rest,
                      score_relation, target_members)

log = logging.getLogger(__name__)


class SearchError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    l_max: int = 4
    beam: int = 3
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search_epochs: int = 150
    prune: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.l_max < 1:
            raise ValueError(f"l_max must be >= 1, got {self.l_max}")
        if self.beam < 1:
            raise ValueError(f"beam size must be >= 1, got {self.beam}")
        if self.search_epochs < 0:
            raise ValueError("search_epochs must be >= 0")

    def scorer_at(self, depth: int) -> ScorerConfig:
        return replace(self.scorer, seed=self.seed * 1_000_003 + self.scorer.seed * 101 + depth)

    def search_train(self) -> TrainConfig:
        return replace(self.train, epochs=self.search_epochs)


@dataclass
class SearchTrace:
    iterations: list[dict] = field(default_factory=list)
    best_path: list[int] = field(default_factory=list)
    best_f1: float = 0.0
    pruning: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _alive(lineages: Sequence[Target | None]) -> list[int]:
    return [c for c, t in enumerate(lineages) if t is not None and len(t) and t.labels.max() == 1]


def candidate_relations(g: HetGraph, relations: Sequence[int], lineages) -> list[int]:
    """Relations whose source types meet the node types of the current targets."""
    types = set()
    for c in _alive(lineages):
        members = target_members(lineages[c])
        types.update(int(t) for t in np.unique(g.node_type[members]))
    return [r for r in relations if g.source_types(r) & types]


def score_candidates(g: HetGraph, candidates: Sequence[int], lineages, scorer: ScorerConfig):
    """Mean one-vs-rest score per candidate relation plus the per-lineage results."""
    alive = _alive(lineages)
    table, results = {}, {}
    for r in candidates:
        res = {c: score_relation(g, r, lineages[c], scorer) for c in alive}
        table[r] = float(np.mean([x.score for x in res.values()]))
        results[r] = res
    return table, results


def _argmin(table: dict[int, float]) -> int:
    return min(table, key=lambda r: (table[r], r))


def _evolve(g, r, lineages, results, scorer):
    out = list(lineages)
    for c, res in results.items():
        nxt = evolve_target(g, r, lineages[c], res, scorer)
        out[c] = nxt if len(nxt) else None
    for c in range(len(out)):
        if c not in results:
            out[c] = None
    return out


def _initial_lineages(split: LabeledSplit):
    nodes, classes = split.train
    if len(np.unique(classes)) < 2:
        raise SearchError("labels are degenerate: need at least two classes among training nodes")
    return one_vs_rest(nodes, classes, split.num_classes)


def _val_f1(g, mps, split, cfg: TrainConfig) -> tuple[float, MPGNNModel]:
    model, hist = train(g, mps, split, cfg)
    nodes, y = split.val
    if len(nodes) == 0:
        nodes, y = split.train
    return f1_macro(model.predict(g, nodes), y, split.num_classes), model


def learn_single(g: HetGraph, relations: Sequence[int] | None, split: LabeledSplit,
                 config: SearchConfig = SearchConfig()):
    """Greedy meta-path growth; returns ``(best_path, final_model, trace)``."""
    relations = list(range(g.num_relations)) if relations is None else list(relations)
    if not relations:
        raise SearchError("empty relation set")
    lineages = _initial_lineages(split)
    trace = SearchTrace()
    mp: MetaPath | None = None
    best: MetaPath | None = None
    best_f1 = -1.0
    depth = 0
    while (0 if mp is None else len(mp)) < config.l_max:
        cands = candidate_relations(g, relations, lineages)
        if not cands:
            log.info("no compatible relation to extend %s; stopping", mp)
            break
        scorer = config.scorer_at(depth)
        try:
            table, results = score_candidates(g, cands, lineages, scorer)
        except Exception as exc:
            raise SearchError(f"scoring failed at iteration {depth + 1}: {exc}") from exc
        r_star = _argmin(table)
        mp = MetaPath([r_star]) if mp is None else mp.extend(r_star)
        try:
            f1, _ = _val_f1(g, [mp], split, config.search_train())
        except Exception as exc:
            raise SearchError(f"training MP-GNN({mp}) failed at iteration {depth + 1}: {exc}") from exc
        if f1 > best_f1:
            best, best_f1 = mp, f1
        trace.iterations.append({
            "depth": depth + 1,
            "scores": {str(r): s for r, s in table.items()},
            "chosen": r_star,
            "prefix": list(mp.relations),
            "val_f1": f1,
            "best_path": list(best.relations),
            "best_f1": best_f1,
        })
        log.info("depth %d: chose %s (score %.4f), val F1 %.4f", depth + 1, g.relation_names[r_star],
                 table[r_star], f1)
        lineages = _evolve(g, r_star, lineages, results[r_star], scorer)
        depth += 1
        if not _alive(lineages):
            break
    if best is None:
        raise SearchError("no relation could be scored")
    model, _ = train(g, [best], split, config.train)
    trace.best_path, trace.best_f1 = list(best.relations), best_f1
    return best, model, trace


@dataclass
class _BeamEntry:
    path: MetaPath
    lineages: list
    score: float
    f1: float
    best: MetaPath
    best_f1: float


def learn_beam(g: HetGraph, relations: Sequence[int] | None, split: LabeledSplit,
               config: SearchConfig = SearchConfig()):
    """Beam search keeping ``config.beam`` prefixes per depth.

    Expansions are ordered by their score rank among siblings, then by score,
    so every parent contributes its best child before any second choice.

    Returns ``(paths, final_model, trace)`` where ``paths`` are the best
    prefixes of the surviving beam entries after pruning.
    """
    relations = list(range(g.num_relations)) if relations is None else list(relations)
    if not relations:
        raise SearchError("empty relation set")
    root = _initial_lineages(split)
    trace = SearchTrace()
    beam: list[_BeamEntry] = []
    parents = [(None, root)]
    finished: list[_BeamEntry] = []
    for depth in range(config.l_max):
        scorer = config.scorer_at(depth)
        pool = []
        for parent, lineages in parents:
            cands = candidate_relations(g, relations, lineages)
            if not cands:
                if parent is not None:
                    finished.append(parent)
                continue
            try:
                table, results = score_candidates(g, cands, lineages, scorer)
            except Exception as exc:
                raise SearchError(f"scoring failed at depth {depth + 1}: {exc}") from exc
            # pseudo-label noise inflates scores unevenly across lineages, so
            # children compete first by rank among their siblings
            for rank, r in enumerate(sorted(table, key=lambda q: (table[q], q))):
                path = MetaPath([r]) if parent is None else parent.path.extend(r)
                pool.append((rank, table[r], path.relations, parent, lineages, results[r], r))
        if not pool:
            break
        pool.sort(key=lambda x: (x[0], x[1], x[2]))
        chosen = pool[:config.beam]
        beam = []
        record = {"depth": depth + 1, "candidates": [], "kept": []}
        for rank, s, rels, *_ in pool:
            record["candidates"].append({"path": list(rels), "score": s, "rank": rank})
        for _, s, rels, parent, lineages, res, r in chosen:
            path = MetaPath(rels)
            try:
                f1, _ = _val_f1(g, [path], split, config.search_train())
            except Exception as exc:
                raise SearchError(f"training MP-GNN({path}) failed at depth {depth + 1}: {exc}") from exc
            if parent is None or f1 > parent.best_f1:
                best, best_f1 = path, f1
            else:
                best, best_f1 = parent.best, parent.best_f1
            entry = _BeamEntry(path, _evolve(g, r, lineages, res, scorer), s, f1, best, best_f1)
            beam.append(entry)
            record["kept"].append({"path": list(rels), "score": s, "val_f1": f1,
                                   "best_path": list(best.relations), "best_f1": best_f1})
        trace.iterations.append(record)
        parents = []
        for e in beam:
            if _alive(e.lineages) and len(e.path) < config.l_max:
                parents.append((e, e.lineages))
            else:
                finished.append(e)
        if not parents:
            break
    survivors = finished + [p for p, _ in parents if p not in finished]
    if not survivors:
        raise SearchError("no relation could be scored")
    # the final beam is what survives; entries that stopped early stay in too.
    # Scores of different lineages are not comparable, so the best prefixes
    # compete on validation F1 as in the greedy learner.
    survivors = sorted({id(e): e for e in survivors}.values(),
                       key=lambda e: (-e.best_f1, len(e.best), e.best.relations))
    paths = []
    for e in survivors:
        if e.best not in paths:
            paths.append(e.best)
    paths = paths[:config.beam]
    if config.prune and len(paths) > 1:
        paths = prune(paths, g, split, config, trace)
    model, _ = train(g, paths, split, config.train)
    trace.best_path, trace.best_f1 = list(survivors[0].best.relations), survivors[0].best_f1
    return paths, model, trace


def prune(mps: Sequence[MetaPath], g: HetGraph, split: LabeledSplit, config: SearchConfig = SearchConfig(),
          trace: SearchTrace | None = None) -> list[MetaPath]:
    """Backward elimination of meta-paths that do not help validation F1.

    Exact duplicates are dropped first. Remaining paths are tried for removal
    in ascending order of their individual validation F1, longer paths first
    on ties, so a redundant elaboration goes before the simpler path it
    extends. A path is removed when the retrained reduced model scores at
    least as well.
    """
    unique: list[MetaPath] = []
    for mp in mps:
        mp = MetaPath(mp)
        if mp not in unique:
            unique.append(mp)
        elif trace is not None:
            trace.pruning.append({"path": list(mp.relations), "action": "duplicate"})
    if len(unique) <= 1:
        return unique
    cfg = config.search_train()
    solo = {mp: _val_f1(g, [mp], split, cfg)[0] for mp in unique}
    current = list(unique)
    current_f1 = _val_f1(g, current, split, cfg)[0]
    for mp in sorted(unique, key=lambda m: (solo[m], -len(m), m.relations)):
        if len(current) == 1:
            break
        reduced = [m for m in current if m != mp]
        f1 = _val_f1(g, reduced, split, cfg)[0]
        dropped = f1 >= current_f1
        if trace is not None:
            trace.pruning.append({"path": list(mp.relations), "solo_f1": solo[mp], "with": current_f1,
                                  "without": f1, "action": "removed" if dropped else "kept"})
        if dropped:
            current, current_f1 = reduced, f1
    return current
