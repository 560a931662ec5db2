import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mega import autodiff as ad
from mega.graphdata import (
    DatasetError,
    GraphDataset,
    SbmConfig,
    canonical_edges,
    generate_sbm,
    load_dataset,
    normalize_adjacency,
    save_dataset,
)
from mega.losses import masked_cross_entropy
from mega.oracle import dense_normalized_adjacency


def test_single_isolated_node():
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((0, 2)), 1).toarray(), [[1.0]])


def test_two_node_edge():
    np.testing.assert_allclose(normalize_adjacency([(0, 1)], 2).toarray(), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_path_graph_matches_dense_formula():
    edges = [(0, 1), (1, 2)]
    np.testing.assert_allclose(normalize_adjacency(edges, 3).toarray(), dense_normalized_adjacency(edges, 3),
                               atol=1e-12, rtol=0)


def test_row_normalization_rows_sum_to_one():
    a = normalize_adjacency([(0, 1), (1, 2), (2, 3)], 5, kind="row").toarray()
    np.testing.assert_allclose(a.sum(axis=1), np.ones(5), atol=1e-12)
    with pytest.raises(ValueError):
        normalize_adjacency([], 2, kind="nope")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 50).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=120))))
def test_normalization_properties(case):
    n, edges = case
    a = normalize_adjacency(edges, n).toarray()
    np.testing.assert_allclose(a, a.T, atol=1e-14)
    np.testing.assert_allclose(a, dense_normalized_adjacency(edges, n), atol=1e-12, rtol=0)
    assert np.all(np.diag(a) > 0)
    assert np.max(np.abs(np.linalg.eigvalsh(a))) <= 1 + 1e-9


def test_canonical_edges_dedup_and_range():
    np.testing.assert_array_equal(canonical_edges([(1, 0), (0, 1), (2, 2)], 3), [[0, 1]])
    with pytest.raises(DatasetError, match="out of range"):
        canonical_edges([(0, 99)], 4)


def _fixture_dataset():
    feats = np.arange(8, dtype=float).reshape(4, 2) / 3.0
    return GraphDataset(feats, np.array([0, 1, 0, 1]), np.array([[0, 1], [1, 2], [2, 3]]), 2)


def test_load_save_round_trip(tmp_path):
    ds = _fixture_dataset()
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.num_nodes == 4
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.edges, ds.edges)


def test_load_rejects_out_of_range_edge(tmp_path):
    save_dataset(_fixture_dataset(), tmp_path / "d")
    (tmp_path / "d" / "edges.csv").write_text("0,1\n3,99\n")
    with pytest.raises(DatasetError, match="out of range"):
        load_dataset(tmp_path / "d")


def test_duplicate_edges_collapse(tmp_path):
    save_dataset(_fixture_dataset(), tmp_path / "d")
    (tmp_path / "d" / "edges.csv").write_text("0,1\n1,0\n0,1\n")
    assert load_dataset(tmp_path / "d").edges.tolist() == [[0, 1]]


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="dataset not found"):
        load_dataset(tmp_path / "absent")
    save_dataset(_fixture_dataset(), tmp_path / "d")
    (tmp_path / "d" / "labels.csv").write_text("0\n1\n0\n")
    with pytest.raises(DatasetError, match="row-count mismatch"):
        load_dataset(tmp_path / "d")
    (tmp_path / "d" / "labels.csv").write_text("0\n1\n0\n1\n")
    (tmp_path / "d" / "edges.csv").write_text("0;1\n")
    with pytest.raises(DatasetError, match="malformed"):
        load_dataset(tmp_path / "d")
    (tmp_path / "d" / "meta.json").unlink()
    with pytest.raises(FileNotFoundError, match="missing dataset file"):
        load_dataset(tmp_path / "d")


def test_dataset_validation():
    with pytest.raises(DatasetError, match="row-count"):
        GraphDataset(np.zeros((3, 2)), np.array([0, 1]), np.zeros((0, 2)), 2)
    with pytest.raises(DatasetError, match="label out of range"):
        GraphDataset(np.zeros((2, 2)), np.array([0, 2]), np.zeros((0, 2)), 2)
    ds = _fixture_dataset()
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


def test_sbm_degenerate_probabilities_give_cliques():
    ds = generate_sbm(SbmConfig(classes=2, nodes_per_class=3, intra_edge_prob=1.0, inter_edge_prob=0.0,
                                feature_dim=2))
    assert ds.edges.tolist() == [[0, 1], [0, 2], [1, 2], [3, 4], [3, 5], [4, 5]]


def test_sbm_is_deterministic():
    a, b = generate_sbm(SbmConfig(seed=5)), generate_sbm(SbmConfig(seed=5))
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.edges, generate_sbm(SbmConfig(seed=6)).edges)


def test_sbm_config_validation():
    for bad in (SbmConfig(intra_edge_prob=1.5), SbmConfig(intra_edge_prob=0.01, inter_edge_prob=0.1),
                SbmConfig(classes=20, feature_dim=5), SbmConfig(feature_noise=-1)):
        with pytest.raises(ValueError):
            bad.validate()


def test_sbm_benchmark_is_learnable():
    """A plain 2-layer GCN trained on 60% of the nodes exceeds 90% test accuracy."""
    ds = generate_sbm(SbmConfig(classes=6, nodes_per_class=80, intra_edge_prob=0.1, inter_edge_prob=0.005,
                                feature_noise=0.5, seed=0))
    rng = np.random.default_rng(0)
    perm = rng.permutation(ds.num_nodes)
    train, test = perm[: int(0.6 * ds.num_nodes)], perm[int(0.6 * ds.num_nodes):]
    adj = normalize_adjacency(ds.edges, ds.num_nodes)
    x = ad.constant(ds.features)
    w1 = ad.parameter(rng.normal(0, 0.3, size=(ds.num_features, 16)))
    w2 = ad.parameter(rng.normal(0, 0.3, size=(16, 6)))
    mask = np.ones(6, dtype=bool)

    def logits(a, b):
        return ad.spmm(adj, ad.matmul(ad.relu(ad.spmm(adj, ad.matmul(x, a))), b))

    ws = [w1, w2]
    m = [np.zeros(w.shape) for w in ws]
    v = [np.zeros(w.shape) for w in ws]
    for t in range(1, 101):
        loss = masked_cross_entropy(ad.row_select(logits(*ws), train), ds.labels[train], mask)
        grads = ad.gradient(loss, ws)
        for k, g in enumerate(grads):
            m[k] = 0.9 * m[k] + 0.1 * g.data
            v[k] = 0.999 * v[k] + 0.001 * g.data**2
            step = 0.01 * (m[k] / (1 - 0.9**t)) / (np.sqrt(v[k] / (1 - 0.999**t)) + 1e-8)
            ws[k] = ad.parameter(ws[k].data - step)
    pred = logits(*ws).data[test].argmax(axis=1)
    assert np.mean(pred == ds.labels[test]) > 0.9
