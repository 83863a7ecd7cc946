import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import metapath.mpgnn as mpgnn
from conftest import random_graph
from f1_cases import CASES
from metapath.diffcore import grad_check
from metapath.hetgraph import HetGraph, LabeledSplit, MetaPath, split_labels
from metapath.mpgnn import (MPGNNModel, TrainConfig, TrainingError, confusion_matrix, evaluate, f1_from_confusion,
                            f1_macro, init_rgcn, mp_forward, multi_forward, rgcn_forward, train)
from oracles import dense_mean_adjacency

seeds = st.integers(0, 2**32 - 1)
ACT = {"relu": lambda z: np.maximum(z, 0), "identity": lambda z: z, "sigmoid": lambda z: 1 / (1 + np.exp(-z))}


def dense_mp(g, relations, weights, activation):
    """Reference forward: apply the relations last to first with dense matrices."""
    H = g.features.copy()
    for r, (W0, W) in zip(reversed(relations), weights):
        A = dense_mean_adjacency(g, r)
        H = ACT[activation](H @ W0.T + A @ H @ W.T)
    return H


def _weights(model, k=0):
    return [(W0.value, W.value) for W0, W in model.layers[k]]


def test_identity_layer_returns_features():
    g, _ = random_graph(np.random.default_rng(0), n=8, num_relations=1, num_edges=10)
    m = MPGNNModel([[0]], g.dim, 2, hidden=g.dim, activation="identity")
    W0, W = m.layers[0][0]
    W0.value[...] = np.eye(g.dim)
    W.value[...] = 0.0
    assert np.array_equal(mp_forward(m, g), g.features)


def test_star_graph_mean():
    feats = np.array([[0.0, 0.0], [1.0, 3.0], [5.0, -1.0]])
    g = HetGraph.from_edges([0, 0, 0], [(0, 0, 1), (0, 0, 2)], 1, feats)
    m = MPGNNModel([[0]], g.dim, 2, hidden=g.dim, activation="identity")
    m.layers[0][0][0].value[...] = 0.0
    m.layers[0][0][1].value[...] = np.eye(g.dim)
    H = mp_forward(m, g)
    assert np.allclose(H[0], (g.features[1] + g.features[2]) / 2, rtol=0, atol=1e-15)
    assert np.all(H[1] == 0) and np.all(H[2] == 0)


@given(seeds, st.integers(5, 50), st.sampled_from(["relu", "identity", "sigmoid"]), st.integers(1, 3))
@settings(max_examples=30)
def test_mp_forward_matches_dense(seed, n, activation, L):
    rng = np.random.default_rng(seed)
    g, _ = random_graph(rng, n=n, num_relations=3, num_edges=3 * n)
    rels = rng.integers(0, 3, size=L).tolist()
    m = MPGNNModel([rels], g.dim, 3, hidden=4, activation=activation, seed=seed % 1000)
    ref = dense_mp(g, rels, _weights(m), activation)
    assert np.max(np.abs(mp_forward(m, g) - ref)) < 1e-9


def test_layer_relation_reversal(monkeypatch):
    # relation 0 lives on nodes {0,1,2}, relation 1 on {3,4,5}
    feats = np.arange(12, dtype=float).reshape(6, 2)
    g = HetGraph.from_edges([0] * 6, [(0, 0, 1), (1, 0, 2), (3, 1, 4), (4, 1, 5)], 2, feats)
    m = MPGNNModel([[0, 1]], g.dim, 2, hidden=3, activation="identity", seed=1)
    assert m.layer_relation(0, 0) == 1 and m.layer_relation(0, 1) == 0
    seen = []
    orig = mpgnn.mean_adjacency

    def spy(graph, r):
        seen.append(r)
        return orig(graph, r)

    monkeypatch.setattr(mpgnn, "mean_adjacency", spy)
    out = mp_forward(m, g)
    assert seen == [1, 0]
    ref = dense_mp(g, [0, 1], _weights(m), "identity")
    wrong = dense_mp(g, [1, 0], _weights(m), "identity")
    assert np.allclose(out, ref, atol=1e-12)
    assert not np.allclose(out, wrong)


def test_multi_forward_concatenates():
    rng = np.random.default_rng(3)
    g, _ = random_graph(rng, n=20, num_relations=3, num_edges=50)
    single = MPGNNModel([[0, 1]], g.dim, 2, hidden=5, seed=4)
    assert np.array_equal(multi_forward(single, g), mp_forward(single, g))

    twin = MPGNNModel([[0, 1], [0, 1]], g.dim, 2, hidden=5, seed=4)
    for (a0, a1), (b0, b1) in zip(twin.layers[1], single.layers[0]):
        a0.value[...] = b0.value
        a1.value[...] = b1.value
    for (a0, a1), (b0, b1) in zip(twin.layers[0], single.layers[0]):
        a0.value[...] = b0.value
        a1.value[...] = b1.value
    out = multi_forward(twin, g)
    assert np.array_equal(out, np.hstack([mp_forward(single, g)] * 2))

    two = MPGNNModel([[2], [0, 1, 2]], g.dim, 2, hidden=5, seed=9)
    out = multi_forward(two, g)
    assert out.shape == (20, 10)
    assert np.array_equal(out[:, :5], mp_forward(two, g, [2]))
    assert np.array_equal(out[:, 5:], mp_forward(two, g, [0, 1, 2]))


def test_rgcn_single_relation_reduces_to_mp():
    rng = np.random.default_rng(5)
    g, _ = random_graph(rng, n=15, num_relations=1, num_edges=30)
    m = MPGNNModel([[0, 0]], g.dim, 2, hidden=4, seed=2)
    params = [{"W0": W0.value, "Wr": [W.value]} for W0, W in m.layers[0]]
    assert np.allclose(rgcn_forward(params, g), mp_forward(m, g), rtol=0, atol=1e-12)


def test_rgcn_isolated_node():
    g = HetGraph.from_edges([0, 0, 0], [(1, 0, 2), (2, 1, 1)], 2, np.array([[1.0], [2.0], [-1.0]]))
    params = init_rgcn(g, 1, 3, seed=0)
    out = rgcn_forward(params, g)
    assert np.allclose(out[0], np.maximum(params[0]["W0"] @ g.features[0], 0))


@given(seeds, st.integers(5, 50), st.integers(1, 3))
@settings(max_examples=25)
def test_rgcn_matches_dense(seed, n, layers):
    rng = np.random.default_rng(seed)
    g, _ = random_graph(rng, n=n, num_relations=3, num_edges=3 * n)
    params = init_rgcn(g, layers, 4, seed=seed % 1000)
    H = g.features
    for layer in params:
        Z = H @ layer["W0"].T
        for r in range(3):
            Z = Z + dense_mean_adjacency(g, r) @ H @ layer["Wr"][r].T
        H = np.maximum(Z, 0)
    assert np.max(np.abs(rgcn_forward(params, g) - H)) < 1e-9


def test_relation_out_of_range():
    g = HetGraph.from_edges([0, 0], [(0, 0, 1)], 1)
    m = MPGNNModel([[3]], g.dim, 2, hidden=2)
    with pytest.raises(IndexError):
        mp_forward(m, g)


def test_full_model_gradient_check():
    rng = np.random.default_rng(11)
    g, _ = random_graph(rng, n=10, num_relations=2, num_edges=25)
    m = MPGNNModel([[0, 1], [1]], g.dim, 3, hidden=4, activation="relu", seed=5)
    nodes, y = np.arange(10), rng.integers(0, 3, size=10)

    def closure():
        for p in m.parameters():
            p.zero_grad()
        return m.loss(g, nodes, y)

    assert grad_check(closure, m.parameters(), epsilon=1e-5) < 1e-4


@given(seeds)
@settings(max_examples=15)
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    g, triples = random_graph(rng, n=12, num_relations=2, num_edges=30)
    perm = rng.permutation(12)            # new id of old node v is perm[v]
    inv = np.argsort(perm)
    gp = HetGraph.from_edges(g.node_type[inv], [(int(perm[s]), r, int(perm[d])) for s, r, d in triples], 2,
                             g.features[inv, :g.raw_dim])
    m = MPGNNModel([[0, 1]], g.dim, 2, hidden=3, seed=1)
    assert np.allclose(mp_forward(m, gp), mp_forward(m, g)[inv], atol=1e-12)


def _separable():
    rng = np.random.default_rng(0)
    n = 60
    y = np.arange(n) % 2
    feats = np.c_[y + rng.normal(0, 0.1, n), rng.normal(size=n)]
    edges = [(int(i), 0, int(rng.integers(n))) for i in range(n)]
    g = HetGraph.from_edges([0] * n, edges, 1, feats)
    return g, split_labels(list(enumerate(y)), seed=0)


def test_train_separable():
    g, split = _separable()
    model, hist = train(g, [MetaPath([0])], split, TrainConfig(epochs=200))
    nodes, y = split.train
    assert f1_macro(model.predict(g, nodes), y) == 1.0
    assert evaluate(model, g, split)["test"]["f1_macro"] == 1.0


def test_train_zero_epochs_and_determinism():
    g, split = _separable()
    model, hist = train(g, [[0]], split, TrainConfig(epochs=0, seed=3))
    fresh = MPGNNModel([[0]], g.dim, 2, seed=3)
    assert hist.loss == [] and all(np.array_equal(a, b) for a, b in zip(model.state().values(),
                                                                       fresh.state().values()))
    _, h1 = train(g, [[0]], split, TrainConfig(epochs=30, seed=7))
    _, h2 = train(g, [[0]], split, TrainConfig(epochs=30, seed=7))
    assert h1.loss == h2.loss and h1.val_f1 == h2.val_f1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_loss():
    g, split = _separable()
    with pytest.raises(TrainingError, match="non-finite"):
        train(g, [[0]], split, TrainConfig(epochs=20, lr=1e300))


def test_train_requires_every_class():
    g, _ = _separable()
    split = LabeledSplit([0, 1, 2], [0, 1, 1], [0, 1, 2])
    with pytest.raises(ValueError, match="no training node"):
        train(g, [[0]], split, TrainConfig(epochs=1))


@pytest.mark.parametrize("truth,pred,C,expected", CASES)
def test_f1_fixtures(truth, pred, C, expected):
    assert f1_macro(pred, truth, C) == float(expected)
    assert f1_from_confusion(confusion_matrix(pred, truth, C)) == float(expected)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_f1_properties(pairs):
    truth, pred = map(list, zip(*pairs))
    v = f1_macro(pred, truth, 4)
    assert 0.0 <= v <= 1.0
    assert f1_macro(truth, truth, 4) == 1.0
    cm = confusion_matrix(pred, truth, 4)
    assert cm.sum() == len(pairs) and np.trace(cm) == sum(a == b for a, b in pairs)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    g, _ = random_graph(rng, n=10, num_relations=2, num_edges=20)
    m = MPGNNModel([[0, 1], [1]], g.dim, 3, hidden=4, seed=8)
    for p in m.parameters():
        p.value[...] = rng.normal(size=p.value.shape) * np.exp(rng.normal(size=p.value.shape) * 10)
    m.save(tmp_path / "m.json", g.relation_names)
    m2 = MPGNNModel.load(tmp_path / "m.json")
    for a, b in zip(m.parameters(), m2.parameters()):
        assert a.name == b.name and np.array_equal(a.value, b.value)
    assert [p.relations for p in m2.paths] == [(0, 1), (1,)]
    assert np.array_equal(multi_forward(m, g), multi_forward(m2, g))


def test_checkpoint_errors(tmp_path):
    g = HetGraph.from_edges([0, 0], [(0, 0, 1)], 1)
    m = MPGNNModel([[0]], 5, 2, hidden=2)
    with pytest.raises(ValueError, match="5-dim"):
        m.check_compatible(g)
    data = m.to_dict()
    data["version"] = 99
    with pytest.raises(ValueError, match="version"):
        MPGNNModel.from_dict(data)
    with pytest.raises(ValueError):
        MPGNNModel.from_dict({"format": "other"})
    (tmp_path / "x.json").write_text(json.dumps(m.to_dict()))
    assert MPGNNModel.load(tmp_path / "x.json").in_dim == 5


def test_evaluate_consistency():
    g, split = _separable()
    model, _ = train(g, [[0]], split, TrainConfig(epochs=20))
    res = evaluate(model, g, split)
    for part in res.values():
        assert part["f1_macro"] == f1_from_confusion(np.array(part["confusion"]))
        assert sum(map(sum, part["confusion"])) == part["n"]
