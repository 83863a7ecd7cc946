import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metapath.hetgraph import load_graph
from metapath.syngen import (InfeasibleSpec, SynDataset, SynSpec, generate, validity_table, verify_labels,
                             write_dataset)
from oracles import edge_lists, typed_path_dfs


def _gt(ds):
    return list(zip(ds.gt_path.relations, ds.gt_types))


@given(st.integers(0, 10_000), st.integers(1, 4), st.sampled_from([(4, 0), (4, 2), (8, 0), (8, 2), (4, 4)]))
@settings(max_examples=15)
def test_labels_match_dfs(seed, length, rs):
    ds = generate(SynSpec(nodes_per_type=200, num_relations=rs[0], num_shared=rs[1], gt_length=length, seed=seed))
    g = ds.graph
    expected = typed_path_dfs(g.num_nodes, g.node_type, edge_lists(g), _gt(ds))
    assert ds.labels.labels.tolist() == expected
    assert ds.gt_path.is_valid(g)


def test_zero_density_positives_are_planted():
    ds = generate(SynSpec(nodes_per_type=200, edge_density=0.0, gt_length=3, seed=1))
    g = ds.graph
    # every edge belongs to a planted chain, so positives are exactly the chain heads
    assert len(set(ds.gt_path.relations)) == 3
    heads = np.unique(g.edges(ds.gt_path.relations[0])[:, 0])
    assert np.flatnonzero(ds.labels.labels).tolist() == heads.tolist()
    assert ds.labels.labels.sum() >= np.ceil(0.15 * g.num_nodes)
    assert verify_labels(ds)


def test_fully_shared_table_is_dense():
    table = validity_table(4, 4)
    assert all(len(v) == 4 for v in table.values())
    ds = generate(SynSpec(nodes_per_type=200, num_shared=4, seed=2))
    assert verify_labels(ds)


def test_validity_table_shapes():
    t = validity_table(8, 2)
    assert sum(len(v) == 2 for v in t.values()) == 2
    # shared relations cover both source types
    assert {next(iter(t[r]))[0] for r in t if len(t[r]) == 2} == {0, 1}
    assert all(len(v) == 1 for v in validity_table(4, 0).values())


def test_verify_labels_detects_flip():
    ds = generate(SynSpec(nodes_per_type=300, gt_length=3, seed=4))
    assert verify_labels(ds)
    lab = ds.labels.labels.copy()
    lab[17] = 1 - lab[17]
    bad = SynDataset(ds.graph, type(ds.labels)(ds.labels.nodes, lab), ds.gt_path, ds.gt_types, ds.spec)
    assert not verify_labels(bad)


def test_verify_labels_fast():
    ds = generate(SynSpec(nodes_per_type=1000, gt_length=4, seed=0))
    t0 = time.perf_counter()
    assert verify_labels(ds)
    assert time.perf_counter() - t0 < 10


@pytest.mark.parametrize("rel,shared,length", [(4, 0, 2), (4, 2, 3), (8, 0, 3), (8, 2, 2)])
def test_positive_rate_band(rel, shared, length):
    for seed in range(3):
        ds = generate(SynSpec(num_relations=rel, num_shared=shared, gt_length=length, seed=seed))
        assert 0.15 <= ds.positive_rate <= 0.6


def test_same_seed_identical():
    a, b = generate(SynSpec(seed=9)), generate(SynSpec(seed=9))
    assert a.gt_path == b.gt_path and np.array_equal(a.labels.labels, b.labels.labels)
    for r in range(4):
        assert np.array_equal(a.graph.edges(r), b.graph.edges(r))
    assert not np.array_equal(generate(SynSpec(seed=10)).labels.labels, a.labels.labels)


def _mi(x, y):
    joint = np.zeros((x.max() + 1, 2))
    np.add.at(joint, (x, y), 1)
    joint /= joint.sum()
    px, py = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (px @ py)[nz])).sum())


def test_distractors_carry_no_label_signal():
    ds = generate(SynSpec(num_relations=8, gt_length=2, seed=3))
    g, y = ds.graph, ds.labels.labels
    start = ds.gt_path.relations[0]
    src_type = next(iter(ds.validity[start]))[0]
    nodes = np.flatnonzero(g.node_type == src_type)
    rng = np.random.default_rng(0)
    for r in range(8):
        if r in ds.gt_path.relations:
            continue
        deg = np.minimum(np.bincount(g.edges(r)[:, 0], minlength=g.num_nodes)[nodes], 3)
        if deg.max() == 0:
            continue
        observed = _mi(deg, y[nodes])
        null = [_mi(deg, rng.permutation(y[nodes])) for _ in range(200)]
        assert observed <= np.quantile(null, 0.995), r


def test_attribute_variant():
    ds = generate(SynSpec(nodes_per_type=300, attribute=True, seed=5))
    assert ds.attribute_hop == 1 and ds.graph.raw_dim == 1
    assert verify_labels(ds)


def test_write_dataset_roundtrip(tmp_path):
    ds = generate(SynSpec(nodes_per_type=100, seed=6))
    files = write_dataset(ds, tmp_path)
    assert {f.name for f in files} == {"nodes.tsv", "edges.tsv", "labels.tsv", "gt_path.json"}
    meta = json.loads((tmp_path / "gt_path.json").read_text())
    assert meta["relation_names"] == ds.gt_path.names(ds.graph)
    g, split = load_graph(tmp_path / "nodes.tsv", tmp_path / "edges.tsv", tmp_path / "labels.tsv")
    assert g.num_nodes == ds.graph.num_nodes and len(split.nodes) == g.num_nodes
    assert sum(len(g.edges(r)) for r in range(g.num_relations)) == sum(
        len(ds.graph.edges(r)) for r in range(ds.graph.num_relations))


@pytest.mark.parametrize("kw", [dict(num_shared=5), dict(gt_length=0), dict(gt_length=7), dict(edge_density=-1),
                                dict(num_relations=0), dict(gt_path=((0, 1), (0, 1))),
                                dict(gt_path=((9, 0),))])
def test_infeasible(kw):
    with pytest.raises(InfeasibleSpec):
        generate(SynSpec(nodes_per_type=50, **kw))


def test_unreachable_positive_rate():
    with pytest.raises(InfeasibleSpec):
        generate(SynSpec(nodes_per_type=50, edge_density=0.0, min_positive=0.9))
