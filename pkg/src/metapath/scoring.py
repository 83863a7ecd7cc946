"""Relation informativeness scoring with learnable node pseudo-labels.

A candidate relation ``r`` is scored by fitting node weights ``w`` (one per
node reachable through ``r`` from the targets) and a feature vector ``theta``
so that

    pred(target) = max_{j in target} (theta . [h_j; 1]) * max_{k in N_j^r} w_k

matches the binary target labels in mean squared error. Node-level targets
are singleton bags, for which the outer max is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .diffcore import adam_update, segment_max, sigmoid
from .hetgraph import HetGraph


@dataclass(frozen=True)
class Bag:
    members: tuple[int, ...]
    origin: int

    def __post_init__(self):
        members = tuple(sorted(set(int(m) for m in self.members)))
        if not members:
            raise ValueError("a bag must have at least one member")
        object.__setattr__(self, "members", members)


@dataclass(frozen=True)
class NodeTargets:
    nodes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(nodes) != len(labels):
            raise ValueError("nodes and labels differ in length")
        if len(np.unique(nodes)) != len(nodes):
            raise ValueError("a node appears twice in NodeTargets")
        if np.any((labels != 0) & (labels != 1)):
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.nodes)

    def as_dict(self) -> dict[int, int]:
        return {int(n): int(y) for n, y in zip(self.nodes, self.labels)}


@dataclass(frozen=True)
class BagTargets:
    bags: tuple[Bag, ...]
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(self.bags):
            raise ValueError("one label per bag required")
        if np.any((labels != 0) & (labels != 1)):
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.bags)


Target = Union[NodeTargets, BagTargets]


@dataclass(frozen=True)
class ScorerConfig:
    restarts: int = 10
    lr: float = 0.05
    max_steps: int = 300
    patience: int = 20
    tol: float = 1e-6
    threshold: float = 0.5
    noise: float = 0.3
    theta_init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1 or self.max_steps < 0 or self.patience < 1 or self.lr <= 0:
            raise ValueError(f"invalid scorer config {self}")


@dataclass(frozen=True)
class ScoreResult:
    relation: int
    score: float
    theta: np.ndarray
    candidates: np.ndarray          # node ids carrying a weight
    weights: np.ndarray             # max over restarts, aligned with candidates
    usage_marks: frozenset
    restart_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def weight_of(self) -> dict[int, float]:
        return {int(c): float(w) for c, w in zip(self.candidates, self.weights)}


def target_members(target: Target) -> np.ndarray:
    if isinstance(target, NodeTargets):
        return np.unique(target.nodes)
    return np.unique(np.concatenate([np.asarray(b.members) for b in target.bags])) \
        if len(target.bags) else np.zeros(0, dtype=np.int64)


def _bag_csr(target: Target):
    if isinstance(target, NodeTargets):
        n = len(target.nodes)
        return np.arange(n + 1), target.nodes.copy(), target.labels
    lengths = np.array([len(b.members) for b in target.bags], dtype=np.int64)
    ptr = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=ptr[1:])
    members = np.concatenate([np.asarray(b.members, dtype=np.int64) for b in target.bags])
    return ptr, members, target.labels


def _logit(p):
    return np.log(p) - np.log1p(-p)


class _Problem:
    """Index bookkeeping for one (relation, target) pair."""

    def __init__(self, g: HetGraph, r: int, target: Target):
        ptr, members, y = _bag_csr(target)
        self.bag_ptr = ptr
        self.y = y.astype(np.float64)
        self.nodes = np.unique(members)                        # bag members
        self.member_local = np.searchsorted(self.nodes, members)
        deg = g.degree(r)[self.nodes]
        self.sub_ptr = np.zeros(len(self.nodes) + 1, dtype=np.int64)
        np.cumsum(deg, out=self.sub_ptr[1:])
        ip, ix = g.indptr[r], g.indices[r]
        nbrs = np.concatenate([ix[ip[u]:ip[u + 1]] for u in self.nodes]) if len(self.nodes) else \
            np.zeros(0, dtype=np.int64)
        self.candidates = np.unique(nbrs)
        self.sub_local = np.searchsorted(self.candidates, nbrs)
        self.haug = np.hstack([g.features[self.nodes], np.ones((len(self.nodes), 1))])
        # label seen by each member: min over bags containing it
        member_label = np.full(len(self.nodes), np.inf)
        bag_of = np.repeat(np.arange(len(ptr) - 1), np.diff(ptr))
        np.minimum.at(member_label, self.member_local, self.y[bag_of])
        self.member_label = member_label

    def init_weights(self, noise: np.ndarray) -> np.ndarray:
        """Min label over labeled predecessors plus noise, per restart."""
        base = np.full(len(self.candidates), np.inf)
        pred_of_edge = np.repeat(np.arange(len(self.nodes)), np.diff(self.sub_ptr))
        np.minimum.at(base, self.sub_local, self.member_label[pred_of_edge])
        base[~np.isfinite(base)] = 0.5
        return np.clip(base[None, :] + noise, 0.01, 0.99)

    def forward(self, u: np.ndarray, theta: np.ndarray):
        w, _ = sigmoid(u)
        m, karg = segment_max(w, self.sub_ptr, self.sub_local)
        f = theta @ self.haug.T
        v = f * m
        pred, jarg = segment_max(v, self.bag_ptr, self.member_local)
        return w, m, karg, f, pred, jarg

    def loss_and_grads(self, u, theta):
        w, m, karg, f, pred, jarg = self.forward(u, theta)
        diff = pred - self.y[None, :]
        nb = diff.shape[1]
        loss = (diff * diff).mean(axis=1)
        dpred = 2.0 * diff / nb
        dv = _route(dpred, jarg, len(self.nodes))
        dtheta = (dv * m) @ self.haug
        dw = _route(dv * f, karg, len(self.candidates))
        du = dw * w * (1.0 - w)
        return loss, du, dtheta


def _route(grad: np.ndarray, arg: np.ndarray, n: int) -> np.ndarray:
    # bincount version of diffcore.scatter_to_argmax for the hot loop
    B = grad.shape[0]
    ok = arg >= 0
    flat = (np.arange(B)[:, None] * n + np.where(ok, arg, 0))[ok]
    return np.bincount(flat, weights=grad[ok], minlength=B * n).reshape(B, n)


def predictions(g: HetGraph, r: int, target: Target, weights: dict[int, float], theta) -> np.ndarray:
    """Target predictions for explicit weights (missing nodes weigh 0)."""
    p = _Problem(g, r, target)
    w = np.array([weights.get(int(c), 0.0) for c in p.candidates])
    m, _ = segment_max(w[None, :], p.sub_ptr, p.sub_local)
    v = (np.asarray(theta, float)[None, :] @ p.haug.T) * m
    pred, _ = segment_max(v, p.bag_ptr, p.member_local)
    return pred[0]


def score_relation(g: HetGraph, r: int, target: Target, config: ScorerConfig = ScorerConfig()) -> ScoreResult:
    """Minimum over restarts of the fitted mean squared error for relation ``r``."""
    if len(target) == 0:
        raise ValueError("cannot score a relation without targets")
    if isinstance(target, NodeTargets) and np.any((target.nodes < 0) | (target.nodes >= g.num_nodes)):
        raise ValueError("target node id out of range")
    g._check_rel(r)
    p = _Problem(g, r, target)
    M, d1 = config.restarts, p.haug.shape[1]
    if len(p.candidates) == 0:
        loss = float(np.mean(p.y ** 2))
        return ScoreResult(r, loss, np.zeros(d1), p.candidates, np.zeros(0), frozenset(),
                           np.full(M, loss))

    rng = np.random.default_rng([config.seed, r])
    noise = rng.uniform(-config.noise, config.noise, size=(M, len(p.candidates)))
    u = _logit(p.init_weights(noise))
    theta = np.zeros((M, d1))
    theta[:, -1] = 1.0
    theta[:, :-1] = rng.normal(0.0, config.theta_init_std, size=(M, d1 - 1))

    mu, vu = np.zeros_like(u), np.zeros_like(u)
    mt, vt = np.zeros_like(theta), np.zeros_like(theta)
    best = np.full(M, np.inf)
    last_gain = np.zeros(M, dtype=np.int64)
    active = np.ones(M, dtype=bool)
    t = 0
    for step in range(config.max_steps):
        loss, du, dth = p.loss_and_grads(u, theta)
        improved = loss < best - config.tol
        best = np.where(improved, loss, np.minimum(best, loss))
        last_gain[improved] = step
        active &= (step - last_gain) < config.patience
        if not active.any():
            break
        t += 1
        adam_update(u, du, mu, vu, t, config.lr, active=active)
        adam_update(theta, dth, mt, vt, t, config.lr, active=active)

    w, m, karg, f, pred, jarg = p.forward(u, theta)
    losses = ((pred - p.y[None, :]) ** 2).mean(axis=1)
    k = int(np.argmin(losses))

    marks = set()
    pos = (p.y[None, :] == 1) & (pred >= config.threshold)
    rows, bags = np.nonzero(pos)
    j = jarg[rows, bags]
    kk = karg[rows, j]
    marks.update(int(c) for c in p.candidates[kk[kk >= 0]])
    return ScoreResult(
        relation=r,
        score=float(losses[k]),
        theta=theta[k].copy(),
        candidates=p.candidates,
        weights=w.max(axis=0),
        usage_marks=frozenset(marks),
        restart_losses=losses,
    )


def score_relation_nodes(g: HetGraph, r: int, targets: NodeTargets,
                         config: ScorerConfig = ScorerConfig()) -> ScoreResult:
    if not isinstance(targets, NodeTargets):
        raise TypeError("expected NodeTargets")
    return score_relation(g, r, targets, config)


def score_relation_bags(g: HetGraph, s: int, targets: BagTargets,
                        config: ScorerConfig = ScorerConfig()) -> ScoreResult:
    if not isinstance(targets, BagTargets):
        raise TypeError("expected BagTargets")
    return score_relation(g, s, targets, config)


def init_weights(g: HetGraph, r: int, target: Target, seed: int = 0, noise: float = 0.3) -> dict[int, float]:
    """Initial pseudo-label of every node reachable through ``r`` from the targets.

    ``min`` over labeled ``r``-predecessors of their label, plus uniform noise
    in ``[-noise, noise]``, clamped to ``[0.01, 0.99]``.
    """
    p = _Problem(g, r, target)
    rng = np.random.default_rng([seed, r])
    eps = rng.uniform(-noise, noise, size=(1, len(p.candidates)))
    w = p.init_weights(eps)[0]
    return {int(c): float(x) for c, x in zip(p.candidates, w)}


def generate_bags(g: HetGraph, r: int, targets: NodeTargets) -> BagTargets:
    """Positive bags of unblocked ``r``-neighbors and negative singleton bags."""
    if not isinstance(targets, NodeTargets):
        raise TypeError("generate_bags expects node-level targets; relabel bag targets first")
    neg = targets.nodes[targets.labels == 0]
    blocked = set()
    for n in neg:
        blocked.update(int(k) for k in g.neighbors(r, int(n)))
    bags, labels = [], []
    for i in targets.nodes[targets.labels == 1]:
        members = {int(j) for j in g.neighbors(r, int(i))} - blocked
        if members:
            bags.append(Bag(tuple(members), int(i)))
            labels.append(1)
    seen = set()
    for n in sorted(int(x) for x in neg):
        for k in g.neighbors(r, n):
            k = int(k)
            if k not in seen:
                seen.add(k)
                bags.append(Bag((k,), n))
                labels.append(0)
    pos_members = set().union(*(b.members for b, y in zip(bags, labels) if y == 1)) if bags else set()
    assert not (pos_members & seen), "node in both a positive bag and a negative singleton"
    return BagTargets(tuple(bags), np.array(labels, dtype=np.int64))


def relabel(g: HetGraph, r_chosen: int, targets: Target, result: ScoreResult,
            config: ScorerConfig = ScorerConfig()) -> NodeTargets:
    """Hard pseudo-labels for the nodes weighted while scoring ``r_chosen``.

    A node is positive iff in at least one restart it realized the
    prediction (>= threshold) of a positive target.
    """
    if result.relation != r_chosen:
        raise ValueError(f"score result is for relation {result.relation}, not {r_chosen}")
    labels = np.array([1 if int(c) in result.usage_marks else 0 for c in result.candidates], dtype=np.int64)
    return NodeTargets(result.candidates.copy(), labels)


def evolve_target(g: HetGraph, r: int, target: Target, result: ScoreResult,
                  config: ScorerConfig = ScorerConfig()) -> Target:
    """Next-iteration target after choosing ``r``: bags from node targets,
    node pseudo-labels from bag targets."""
    if isinstance(target, NodeTargets):
        return generate_bags(g, r, target)
    return relabel(g, r, target, result, config)


def one_vs_rest(nodes: Sequence[int], classes: Sequence[int], num_classes: int) -> list[NodeTargets]:
    """Binary targets per class; a binary task yields only the positive class."""
    nodes = np.asarray(nodes)
    classes = np.asarray(classes)
    which = [1] if num_classes == 2 else range(num_classes)
    return [NodeTargets(nodes, (classes == c).astype(np.int64)) for c in which]
