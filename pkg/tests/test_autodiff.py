import numpy as np
import pytest
import scipy.sparse as sp

from mega import autodiff as ad
from mega import gradcheck, oracle
from mega.model import GraphInputs, forward, init_params
from mega.losses import masked_cross_entropy, seen_mask


def test_sum_gradient_is_ones():
    theta = ad.parameter(np.array([0.3, -1.0, 2.0]))
    (g,) = ad.gradient(ad.sum_all(theta), [theta])
    np.testing.assert_array_equal(g.data, np.ones(3))


def test_half_square_gradient_and_hessian_row():
    theta = ad.parameter(np.array([2.0, -1.0]))
    obj = ad.scale(ad.sum_all(ad.square(theta)), 0.5)
    (g,) = ad.gradient(obj, [theta], higher_order=True)
    np.testing.assert_array_equal(g.data, [2.0, -1.0])
    (h,) = ad.gradient(ad.sum_all(ad.mul(g, ad.constant([1.0, 0.0]))), [theta])
    np.testing.assert_array_equal(h.data, [1.0, 0.0])


def test_quadratic_form_hessian_vector_product():
    rng = np.random.default_rng(3)
    M = rng.normal(size=(6, 6))
    A = M + M.T
    v = rng.normal(size=6)
    theta = ad.parameter(rng.normal(size=(6, 1)))
    quad = ad.scale(ad.sum_all(ad.mul(theta, ad.matmul(ad.constant(A), theta))), 0.5)
    (g,) = ad.gradient(quad, [theta], higher_order=True)
    (hv,) = ad.gradient(ad.sum_all(ad.mul(g, ad.constant(v[:, None]))), [theta])
    np.testing.assert_allclose(hv.data[:, 0], A @ v, atol=1e-10, rtol=0)


def test_gcn_cross_entropy_matches_finite_differences():
    ds = gradcheck.small_graph(num_nodes=6, num_features=3, num_classes=3, seed=4)
    graph = GraphInputs.from_dataset(ds)
    params = gradcheck._random_biases(init_params(3, 3, 0, hidden=(4, 3)), 1)
    mask = seen_mask(3, [0, 1, 2])
    nodes = np.arange(6)

    def loss_of(ps):
        return masked_cross_entropy(ad.row_select(forward(ps, graph), nodes), ds.labels, mask)

    mine = np.concatenate([g.data.ravel() for g in ad.gradient(loss_of(params), params.values())])
    like = params.arrays()

    def f(vec):
        from mega.model import ParamSet
        with ad.no_record():
            return loss_of(ParamSet.from_arrays(oracle.unflatten(vec, like))).item()

    fd = oracle.finite_diff_gradient(f, oracle.flatten(like))
    assert oracle.rel_error(mine, fd, gradcheck.FLOOR) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_primitive_first_order(seed):
    results = gradcheck.primitive_checks(seed)
    covered = {r.name.split("/")[1] for r in results}
    assert covered >= set(ad.CATALOG) - {"neg"}
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad


def test_unreferenced_target_gets_zero():
    a, b = ad.parameter(np.ones(2)), ad.parameter(np.ones((3, 2)))
    ga, gb = ad.gradient(ad.sum_all(ad.square(a)), [a, b])
    np.testing.assert_array_equal(gb.data, np.zeros((3, 2)))
    np.testing.assert_array_equal(ga.data, [2.0, 2.0])


def test_non_scalar_objective_rejected():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        ad.gradient(ad.square(x), [x])


def test_nan_in_backward_names_primitive(monkeypatch):
    def bad_rule(out, g):
        return (ad.constant(np.full(out.parents[0].shape, np.nan)),)

    monkeypatch.setitem(ad.VJP_RULES, "exp", bad_rule)
    x = ad.parameter(np.zeros(2))
    with pytest.raises(ad.NonFiniteError, match="exp"):
        ad.gradient(ad.sum_all(ad.exp(x)), [x])


def test_nan_in_forward_raises():
    x = ad.parameter(np.array([1000.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(x)


def test_missing_rule_reported(monkeypatch):
    monkeypatch.delitem(ad.VJP_RULES, "relu")
    x = ad.parameter(np.ones(2))
    with pytest.raises(ad.MissingDerivativeError, match="relu"):
        ad.gradient(ad.sum_all(ad.relu(x)), [x])


def test_closure_second_order_through_every_primitive():
    """Differentiating each primitive's recorded gradient never hits a missing rule."""
    rng = np.random.default_rng(0)
    adj = sp.csr_matrix(oracle.dense_normalized_adjacency([(0, 1), (1, 2)], 3))
    x0 = rng.normal(size=(3, 2))
    builders = {
        "add": lambda x: ad.add(x, ad.square(x)),
        "sub": lambda x: ad.sub(x, ad.square(x)),
        "mul": lambda x: ad.mul(x, x),
        "scale": lambda x: ad.scale(ad.square(x), 2.0),
        "neg": lambda x: ad.neg(ad.square(x)),
        "matmul": lambda x: ad.matmul(x, ad.transpose(x)),
        "transpose": lambda x: ad.square(ad.transpose(x)),
        "spmm": lambda x: ad.spmm(adj, ad.square(x)),
        "row_select": lambda x: ad.row_select(ad.square(x), [2, 0]),
        "row_scatter": lambda x: ad.row_scatter(ad.square(x), [0, 2, 4], 5),
        "col_select": lambda x: ad.col_select(ad.square(x), [1]),
        "col_scatter": lambda x: ad.col_scatter(ad.square(x), [0, 3], 4),
        "relu": lambda x: ad.mul(ad.relu(x), x),
        "exp": lambda x: ad.exp(x),
        "logsumexp_rows": lambda x: ad.logsumexp_rows(x),
        "square": lambda x: ad.square(x),
        "sum": lambda x: ad.square(ad.sum_all(x)),
        "mean": lambda x: ad.square(ad.mean(x)),
        "fill": lambda x: ad.fill(ad.square(ad.sum_all(x)), (2, 2)),
        "add_rowvec": lambda x: ad.add_rowvec(ad.square(x), ad.sum_rows(x)),
        "sum_rows": lambda x: ad.square(ad.sum_rows(x)),
        "expand_rows": lambda x: ad.expand_rows(ad.square(ad.sum_rows(x)), 4),
        "sum_cols": lambda x: ad.square(ad.sum_cols(x)),
        "expand_cols": lambda x: ad.expand_cols(ad.square(ad.sum_cols(x)), 3),
        "concat_rows": lambda x: ad.concat_rows([ad.square(x), x]),
        "dropout": lambda x: ad.dropout(ad.square(x), np.full(x.shape, 2.0)),
    }
    assert set(ad.CATALOG) <= set(builders)
    for name, build in builders.items():
        x = ad.parameter(x0)
        (g,) = ad.gradient(ad.sum_all(build(x)), [x], higher_order=True)
        v = ad.constant(rng.normal(size=x0.shape))
        (h,) = ad.gradient(ad.sum_all(ad.mul(g, v)), [x], higher_order=True)
        assert h.shape == x0.shape, name


def test_detach_semantics():
    x = ad.parameter(np.array([1.5, -2.0, 0.5]))
    d = ad.detach(x)
    np.testing.assert_array_equal(d.data, x.data)
    (g,) = ad.gradient(ad.sum_all(ad.mul(d, x)), [x])
    np.testing.assert_array_equal(g.data, x.data)
    (g,) = ad.gradient(ad.sum_all(d), [x])
    np.testing.assert_array_equal(g.data, np.zeros(3))


def test_dropout_mask_contract():
    np.testing.assert_array_equal(ad.dropout_mask((4, 3), 0.0, np.random.default_rng(0)), np.ones((4, 3)))
    m = ad.dropout_mask(10000, 0.5, np.random.default_rng(0))
    assert set(np.unique(m)) <= {0.0, 2.0}
    assert 0.97 <= m.mean() <= 1.03
    a = ad.dropout_mask((50,), 0.3, np.random.default_rng(9))
    b = ad.dropout_mask((50,), 0.3, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(ValueError):
            ad.dropout_mask(3, bad, np.random.default_rng(0))


def test_tape_growth_is_affine_in_inner_steps():
    graph = GraphInputs.from_dataset(gradcheck.small_graph())
    params = init_params(4, 4, 0, hidden=(5, 4))
    mask = seen_mask(4, range(4))
    nodes = np.arange(8)
    counts = []
    for k in range(1, 6):
        before = ad.stats["nodes"]
        cur = params
        for _ in range(k):
            loss = masked_cross_entropy(ad.row_select(forward(cur, graph), nodes), graph.labels[nodes], mask)
            grads = ad.gradient(loss, cur.values(), higher_order=True)
            from mega.model import ParamSet
            cur = ParamSet.from_values([ad.sub(p, ad.scale(g, 0.1)) for p, g in zip(cur.values(), grads)])
        counts.append(ad.stats["nodes"] - before)
    diffs = np.diff(counts)
    assert np.all(diffs == diffs[0]) and diffs[0] > 0


def test_float32_switch():
    ad.set_default_dtype(np.float32)
    x = ad.parameter(np.array([1.0, 2.0]))
    assert x.data.dtype == np.float32
    (g,) = ad.gradient(ad.sum_all(ad.square(x)), [x])
    np.testing.assert_allclose(g.data, [2.0, 4.0])
    with pytest.raises(ValueError):
        ad.set_default_dtype(np.int32)


def test_first_order_mode_records_nothing():
    x = ad.parameter(np.ones(3))
    loss = ad.sum_all(ad.square(x))
    (g,) = ad.gradient(loss, [x])
    assert not g.requires_grad
    assert ad.graph_size([g]) <= 1
