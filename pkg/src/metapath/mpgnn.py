"""Meta-path GNN: one message-passing layer per relation of a learned meta-path.

Layer ``l`` of a path ``r_1 ... r_L`` aggregates over relation ``r_{L-l+1}``,
so the first layer applied consumes the last relation:

    h_i' = act(W0 h_i + mean_{j in N_i^r} W h_j)

Several meta-paths are combined by concatenating their final embeddings
before a linear classification head.
"""
from __future__ import annotations

import json
import logging
import weakref
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .diffcore import ACTIVATIONS, Adam, Param, linear, softmax_cross_entropy
from .hetgraph import HetGraph, LabeledSplit, MetaPath

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "metapath-mpgnn"
CHECKPOINT_VERSION = 1

_adj_cache: "weakref.WeakKeyDictionary[HetGraph, dict]" = weakref.WeakKeyDictionary()


class TrainingError(RuntimeError):
    pass


def mean_adjacency(g: HetGraph, r: int) -> sp.csr_matrix:
    """Row-normalised sparse adjacency of relation ``r`` (parallel edges count)."""
    g._check_rel(r)
    cache = _adj_cache.setdefault(g, {})
    if r not in cache:
        ptr, idx = g.indptr[r], g.indices[r]
        deg = np.diff(ptr)
        data = np.repeat(1.0 / np.maximum(deg, 1), deg)
        A = sp.csr_matrix((data, idx, ptr), shape=(g.num_nodes, g.num_nodes))
        cache[r] = (A, A.T.tocsr())
    return cache[r][0]


def _adj_t(g: HetGraph, r: int) -> sp.csr_matrix:
    mean_adjacency(g, r)
    return _adj_cache[g][r][1]


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 300
    hidden: int = 64
    patience: int = 50
    seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.hidden < 1 or self.patience < 1:
            raise ValueError(f"invalid train config {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class MPGNNModel:
    """Per-path layer stacks ``(W0, W)`` plus a linear head on the concatenation."""

    def __init__(self, paths: Sequence[MetaPath], in_dim: int, num_classes: int, hidden: int = 64,
                 activation: str = "relu", seed: int = 0):
        self.paths = [p if isinstance(p, MetaPath) else MetaPath(p) for p in paths]
        if not self.paths:
            raise ValueError("model needs at least one meta-path")
        self.in_dim, self.num_classes, self.hidden = in_dim, num_classes, hidden
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.layers: list[list[tuple[Param, Param]]] = []
        for k, mp in enumerate(self.paths):
            stack, d = [], in_dim
            for l in range(len(mp)):
                stack.append((Param(glorot(rng, hidden, d), name=f"p{k}.l{l}.W0"),
                              Param(glorot(rng, hidden, d), name=f"p{k}.l{l}.W")))
                d = hidden
            self.layers.append(stack)
        self.head = Param(glorot(rng, num_classes, hidden * len(self.paths)), name="head.W")
        self.head_bias = Param(np.zeros(num_classes), name="head.b")

    def parameters(self) -> list[Param]:
        out = [w for stack in self.layers for pair in stack for w in pair]
        return out + [self.head, self.head_bias]

    def layer_relation(self, k: int, l: int) -> int:
        """Relation used by layer ``l`` (0-based, first applied = 0) of path ``k``."""
        mp = self.paths[k]
        return mp[len(mp) - 1 - l]

    # -- forward/backward ---------------------------------------------------

    def path_forward(self, g: HetGraph, k: int, x: np.ndarray | None = None):
        """Embeddings of every node under path ``k`` and a backward closure."""
        H = g.features if x is None else x
        act = ACTIVATIONS[self.activation]
        backs = []
        for l, (W0, W) in enumerate(self.layers[k]):
            r = self.layer_relation(k, l)
            A = mean_adjacency(g, r)
            self_term, b_self = linear(W0, H)
            agg = A @ H
            nbr_term, b_nbr = linear(W, agg)
            H, b_act = act(self_term + nbr_term)
            backs.append((r, b_self, b_nbr, b_act))

        def backward(dH):
            for r, b_self, b_nbr, b_act in reversed(backs):
                dZ = b_act(dH)
                dH = b_self(dZ) + _adj_t(g, r) @ b_nbr(dZ)
            return dH

        return H, backward

    def embed(self, g: HetGraph):
        outs, backs = zip(*(self.path_forward(g, k) for k in range(len(self.paths))))
        Z = np.hstack(outs)
        h = self.hidden

        def backward(dZ):
            for k, b in enumerate(backs):
                b(dZ[:, k * h:(k + 1) * h])

        return Z, backward

    def logits(self, g: HetGraph, nodes=None):
        Z, b_embed = self.embed(g)
        sel = Z if nodes is None else Z[nodes]
        out, b_head = linear(self.head, sel)
        out = out + self.head_bias.value

        def backward(dout):
            self.head_bias.grad += dout.sum(axis=0)
            dsel = b_head(dout)
            if nodes is None:
                b_embed(dsel)
            else:
                dZ = np.zeros_like(Z)
                np.add.at(dZ, nodes, dsel)
                b_embed(dZ)

        return out, backward

    def loss(self, g: HetGraph, nodes, classes) -> float:
        """Cross-entropy on ``nodes``; accumulates parameter gradients."""
        out, back = self.logits(g, nodes)
        value, b_loss = softmax_cross_entropy(out, classes)
        back(b_loss(1.0))
        return value

    def predict(self, g: HetGraph, nodes=None) -> np.ndarray:
        out, _ = self.logits(g, nodes)
        return np.argmax(out, axis=1)

    # -- persistence --------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.value.shape}")
            p.value[...] = state[p.name]

    def to_dict(self, relation_names: Sequence[str] | None = None) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "paths": [list(p.relations) for p in self.paths],
            "relation_names": list(relation_names) if relation_names is not None else None,
            "in_dim": self.in_dim,
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "activation": self.activation,
            "params": {p.name: {"shape": list(p.value.shape), "values": p.value.reshape(-1).tolist()}
                       for p in self.parameters()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MPGNNModel":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not an MP-GNN checkpoint")
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')}")
        model = cls([MetaPath(p) for p in data["paths"]], data["in_dim"], data["num_classes"],
                     data["hidden"], data["activation"])
        model.load_state({name: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
                          for name, v in data["params"].items()})
        return model

    def save(self, path, relation_names=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(relation_names)), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MPGNNModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def check_compatible(self, g: HetGraph) -> None:
        if g.dim != self.in_dim:
            raise ValueError(f"checkpoint expects {self.in_dim}-dim node features, graph has {g.dim}")
        for p in self.paths:
            if max(p.relations) >= g.num_relations:
                raise ValueError(f"checkpoint path {p} uses a relation the graph does not have "
                                 f"({g.num_relations} relations)")


def mp_forward(model: MPGNNModel, g: HetGraph, mp: MetaPath | None = None, k: int = 0) -> np.ndarray:
    """Final embeddings of a single-path model (or path ``k`` of a multi-path one)."""
    if mp is not None:
        k = model.paths.index(MetaPath(mp))
    for r in model.paths[k]:
        g._check_rel(r)
    return model.path_forward(g, k)[0]


def multi_forward(model: MPGNNModel, g: HetGraph) -> np.ndarray:
    return model.embed(g)[0]


def rgcn_forward(params: Sequence[dict], g: HetGraph, activation: str = "relu",
                 x: np.ndarray | None = None) -> np.ndarray:
    """Relational GCN baseline; each layer dict holds ``W0`` and a ``Wr`` list.

    Normalisation is fixed to ``1/|N_i^r|``.
    """
    act = ACTIVATIONS[activation]
    H = g.features if x is None else x
    for layer in params:
        Wr = layer["Wr"]
        if len(Wr) != g.num_relations:
            raise ValueError(f"layer has {len(Wr)} relation matrices, graph has {g.num_relations} relations")
        Z = H @ np.asarray(layer["W0"]).T
        for r, W in enumerate(Wr):
            Z = Z + (mean_adjacency(g, r) @ H) @ np.asarray(W).T
        H, _ = act(Z)
    return H


def init_rgcn(g: HetGraph, num_layers: int, hidden: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    params, d = [], g.dim
    for _ in range(num_layers):
        params.append({"W0": glorot(rng, hidden, d),
                       "Wr": [glorot(rng, hidden, d) for _ in range(g.num_relations)]})
        d = hidden
    return params


def f1_macro(pred, truth, num_classes: int | None = None) -> float:
    """Unweighted mean per-class F1; classes absent from both inputs are skipped."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth differ in length")
    if len(pred) == 0:
        return 0.0
    C = num_classes if num_classes is not None else int(max(pred.max(), truth.max())) + 1
    return f1_from_confusion(confusion_matrix(pred, truth, C))


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts nodes of true class ``t`` predicted as ``p``."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def f1_from_confusion(cm) -> float:
    """Macro F1 from ``cm[t, p]``; per-class F1 is ``2 tp / (n_pred + n_true)``.

    Exact rational arithmetic, so the result is the correctly rounded value.
    """
    cm = np.asarray(cm)
    scores = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        n_pred, n_true = int(cm[:, c].sum()), int(cm[c, :].sum())
        if n_pred == 0 and n_true == 0:
            continue
        # equals 2PR/(P+R); a 0/0 precision or recall leaves tp = 0 and F1 = 0
        scores.append(Fraction(2 * tp, n_pred + n_true))
    return float(sum(scores, Fraction(0)) / len(scores)) if scores else 0.0


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def train(g: HetGraph, mps: Sequence[MetaPath], split: LabeledSplit, config: TrainConfig = TrainConfig(),
          num_classes: int | None = None) -> tuple[MPGNNModel, TrainHistory]:
    """Full-batch Adam training; returns the best-validation checkpoint."""
    train_nodes, train_y = split.train
    val_nodes, val_y = split.val
    C = num_classes if num_classes is not None else split.num_classes
    if len(train_nodes) == 0:
        raise ValueError("no training nodes")
    missing = set(range(C)) - set(np.unique(train_y).tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} have no training node")
    for mp in mps:
        if not MetaPath(mp).is_valid(g):
            log.warning("meta-path %s is not type-compatible on this graph", mp)
    model = MPGNNModel(mps, g.dim, C, config.hidden, config.activation, config.seed)
    history = TrainHistory()
    if config.epochs == 0:
        return model, history
    if len(val_nodes) == 0:
        val_nodes, val_y = train_nodes, train_y
    opt = Adam(model.parameters(), lr=config.lr)
    best_state = model.state()
    since_best = 0
    for epoch in range(config.epochs):
        opt.zero_grad()
        loss = model.loss(g, train_nodes, train_y)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at epoch {epoch} for paths "
                                f"{[str(p) for p in model.paths]} (lr={config.lr})")
        opt.step()
        f1 = f1_macro(model.predict(g, val_nodes), val_y, C)
        history.loss.append(loss)
        history.val_f1.append(f1)
        if f1 > history.best_val_f1 or history.best_epoch < 0:
            history.best_val_f1, history.best_epoch = f1, epoch
            best_state = model.state()
            since_best = 0
        else:
            if f1 == history.best_val_f1:
                # a tie keeps the longer-trained weights; patience still runs
                history.best_epoch = epoch
                best_state = model.state()
            since_best += 1
            if since_best >= config.patience:
                break
    model.load_state(best_state)
    return model, history


def evaluate(model: MPGNNModel, g: HetGraph, split: LabeledSplit) -> dict:
    """F1-macro and confusion matrix per partition."""
    model.check_compatible(g)
    C = model.num_classes
    pred_all = model.predict(g)
    out = {}
    for name in ("train", "val", "test"):
        nodes, y = split.part(name)
        cm = confusion_matrix(pred_all[nodes], y, C)
        out[name] = {"f1_macro": f1_from_confusion(cm) if len(nodes) else None,
                     "confusion": cm.tolist(), "n": int(len(nodes))}
    return out
