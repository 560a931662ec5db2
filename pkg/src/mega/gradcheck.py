"""Finite-difference checks of the autodiff, model, loss and meta-gradient paths.

Each check compares the main implementation with an oracle evaluator and
reports the largest coordinatewise relative error
``|a - b| / max(|a|, |b|, floor)``. The floor keeps coordinates whose true
derivative is ~0 from turning finite-difference round-off into a huge
ratio; it sits well above that round-off (~1e-10) and far below typical
gradient entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import oracle
from .episodes import SplitConfig, build_task_stream, sample_meta_episode
from .graphdata import SbmConfig, generate_sbm
from .losses import KDSIR, LossState, inner_loss, seen_mask
from .model import GraphInputs, ParamSet, forward, init_params
from .replay import INCREMENTAL, ReplayBuffer
from .trainer import TrainConfig, mctf_objective

FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28s} max_rel_err={self.max_error:.3e} tol={self.tolerance:.0e}"


def _fd_check(name: str, build: Callable[..., ad.DiffValue], arrays: list[np.ndarray], tol: float) -> CheckResult:
    params = [ad.parameter(a) for a in arrays]
    grads = ad.gradient(build(*params), params)
    mine = np.concatenate([g.data.ravel() for g in grads])
    shapes = [a.shape for a in arrays]

    def f(vec):
        parts, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            parts.append(ad.constant(vec[pos : pos + n].reshape(s)))
            pos += n
        with ad.no_record():
            return build(*parts).item()

    fd = oracle.finite_diff_gradient(f, np.concatenate([a.ravel() for a in arrays]))
    return CheckResult(name, oracle.rel_error(mine, fd, FLOOR), tol)


def primitive_checks(seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    """First-order check of every primitive inside a small scalar composition."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 3))
    adj = oracle.dense_normalized_adjacency([(0, 1), (1, 2), (3, 4)], 5)
    import scipy.sparse as sp

    adj = sp.csr_matrix(adj)
    w = rng.normal(size=(3, 4))
    v = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    s = rng.normal(size=())
    cases = {
        "add": (lambda a, c: ad.sum_all(ad.square(ad.add(a, c))), [v, rng.normal(size=v.shape)]),
        "sub": (lambda a, c: ad.sum_all(ad.square(ad.sub(a, c))), [v, rng.normal(size=v.shape)]),
        "mul": (lambda a, c: ad.sum_all(ad.mul(a, c)), [v, rng.normal(size=v.shape)]),
        "scale": (lambda a: ad.sum_all(ad.square(ad.scale(a, -1.7))), [v]),
        "matmul": (lambda a, c: ad.sum_all(ad.square(ad.matmul(a, c))), [X, w]),
        "transpose": (lambda a: ad.sum_all(ad.matmul(ad.transpose(a), ad.constant(v))), [v[:, :3].copy()]),
        "spmm": (lambda a: ad.sum_all(ad.square(ad.spmm(adj, a))), [v]),
        "row_select": (lambda a: ad.sum_all(ad.square(ad.row_select(a, [0, 3, 3]))), [v]),
        "row_scatter": (lambda a: ad.sum_all(ad.square(ad.add(ad.row_scatter(a, [1, 1, 4], 5), ad.constant(v)))),
                        [v[:3].copy()]),
        "col_select": (lambda a: ad.sum_all(ad.square(ad.col_select(a, [2, 0]))), [v]),
        "col_scatter": (lambda a: ad.sum_all(ad.square(ad.add(ad.col_scatter(a, [3, 0], 4), ad.constant(v)))),
                        [v[:, :2].copy()]),
        "relu": (lambda a: ad.sum_all(ad.square(ad.relu(a))), [v]),
        "exp": (lambda a: ad.sum_all(ad.exp(a)), [v]),
        "logsumexp_rows": (lambda a: ad.sum_all(ad.square(ad.logsumexp_rows(a))), [v]),
        "square": (lambda a: ad.sum_all(ad.square(a)), [v]),
        "sum": (lambda a: ad.square(ad.sum_all(a)), [v]),
        "mean": (lambda a: ad.square(ad.mean(a)), [v]),
        "fill": (lambda a: ad.sum_all(ad.mul(ad.fill(a, (5, 4)), ad.constant(v))), [s]),
        "add_rowvec": (lambda a, c: ad.sum_all(ad.square(ad.add_rowvec(a, c))), [v, b]),
        "sum_rows": (lambda a: ad.sum_all(ad.square(ad.sum_rows(a))), [v]),
        "expand_rows": (lambda a: ad.sum_all(ad.mul(ad.expand_rows(a, 5), ad.constant(v))), [b]),
        "sum_cols": (lambda a: ad.sum_all(ad.square(ad.sum_cols(a))), [v]),
        "expand_cols": (lambda a: ad.sum_all(ad.mul(ad.expand_cols(a, 4), ad.constant(v))), [v[:, 0].copy()]),
        "concat_rows": (lambda a, c: ad.sum_all(ad.square(ad.concat_rows([a, c, a]))), [v, X[:, :1].repeat(4, 1)]),
        "dropout": (lambda a: ad.sum_all(ad.square(ad.dropout(a, ad.dropout_mask(a.shape, 0.5,
                                                                                  np.random.default_rng(1))))), [v]),
    }
    return [_fd_check(f"autodiff/{name}", fn, arrs, tol) for name, (fn, arrs) in cases.items()]


def _random_biases(params: ParamSet, seed: int) -> ParamSet:
    # nonzero biases keep pre-activations off the ReLU kink at zero
    arrays = params.arrays()
    rng = np.random.default_rng(seed)
    for k in ("b1", "b2", "b3"):
        arrays[k] = rng.normal(0.0, 0.5, size=arrays[k].shape)
    return ParamSet.from_arrays(arrays)


def small_graph(num_nodes: int = 10, num_features: int = 4, num_classes: int = 4, seed: int = 0):
    from .graphdata import GraphDataset

    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes) % num_classes
    edges = [(u, v) for u in range(num_nodes) for v in range(u + 1, num_nodes) if rng.random() < 0.35]
    ds = GraphDataset(rng.normal(size=(num_nodes, num_features)), labels, np.array(edges).reshape(-1, 2), num_classes)
    return ds


def model_check(tol: float = 1e-6, seed: int = 0) -> CheckResult:
    ds = small_graph(seed=seed)
    graph = GraphInputs.from_dataset(ds)
    params = _random_biases(init_params(ds.num_features, ds.num_classes, seed, hidden=(5, 4)), seed + 1)
    A = oracle.dense_normalized_adjacency(ds.edges, ds.num_nodes)
    mine = np.concatenate([g.data.ravel() for g in ad.gradient(ad.sum_all(forward(params, graph)), params.values())])
    like = params.arrays()
    fd = oracle.finite_diff_gradient(lambda vec: float(oracle.gcn_logits(oracle.unflatten(vec, like), A, ds.features).sum()),
                                     oracle.flatten(like))
    return CheckResult("model/gcn_logits", oracle.rel_error(mine, fd, FLOOR), tol)


def loss_check(tol: float = 1e-5, seed: int = 0) -> CheckResult:
    """Inner loss with CE, KD and SIR all active on a 10-node graph."""
    ds = small_graph(seed=seed)
    graph = GraphInputs.from_dataset(ds)
    params = _random_biases(init_params(ds.num_features, ds.num_classes, seed, hidden=(5, 4)), seed + 1)
    teacher = _random_biases(init_params(ds.num_features, ds.num_classes, seed + 7, hidden=(5, 4)), seed + 8)
    mask = seen_mask(ds.num_classes, [0, 1, 2])
    support = np.flatnonzero(np.isin(ds.labels, [2]))
    buffer = ReplayBuffer(INCREMENTAL, {0: (0, 0), 1: (1, 1)})
    state = LossState(graph, params, mask, support, teacher=teacher, buffer=buffer)
    loss = inner_loss(state, KDSIR())
    mine = np.concatenate([g.data.ravel() for g in ad.gradient(loss, params.values())])

    A = oracle.dense_normalized_adjacency(ds.edges, ds.num_nodes)
    t_logits = oracle.gcn_logits(teacher.arrays(), A, ds.features)
    spec = oracle.PhaseLoss(support, mask, kd_rows=buffer.nodes(), teacher=t_logits, sir_rows=buffer.nodes())
    like = params.arrays()
    fd = oracle.finite_diff_gradient(lambda vec: oracle.phase_value(oracle.unflatten(vec, like), A, ds.features,
                                                                    ds.labels, spec), oracle.flatten(like))
    return CheckResult("losses/inner_kd_sir", oracle.rel_error(mine, fd, FLOOR), tol)


def meta_fixture(seed: int = 0):
    """12-node SBM, 4 base classes, 2-way pseudo-tasks (p=2), widths (4, 3, 2)."""
    ds = generate_sbm(SbmConfig(classes=4, nodes_per_class=3, intra_edge_prob=0.8, inter_edge_prob=0.1,
                                feature_dim=4, feature_noise=0.5, seed=seed + 1))
    split = SplitConfig(N=2, K=1, R=1, base_class_count=4, seed=seed, meta_query_cap=1, num_novel_tasks=0)
    stream = build_task_stream(ds, split)
    params = _random_biases(init_params(4, 4, seed + 3, hidden=(3, 2)), seed + 5)
    return ds, split, stream, params


def meta_gradient_check(inner_steps: int = 1, tol: float = 1e-4, seed: int = 0, inner_lr: float = 0.5,
                        use_kd: bool = True, use_sir: bool = True, ce_on_union: bool = False) -> CheckResult:
    """Outer gradient through the chained inner loop vs finite differences of
    the hand-unrolled objective (teacher outputs frozen, as in training)."""
    ds, split, stream, params = meta_fixture(seed)
    graph = GraphInputs.from_dataset(ds)
    cfg = TrainConfig(dropout=0.0, inner_steps=inner_steps, inner_lr=inner_lr, hidden=(3, 2),
                      use_kd=use_kd, use_sir=use_sir, outer_ce_on_union=ce_on_union)
    rng = np.random.default_rng(seed)
    episode = sample_meta_episode(stream.base, split, rng)
    total, trace = mctf_objective(params, episode, graph, cfg, rng)
    mine = np.concatenate([g.data.ravel() for g in ad.gradient(total, params.values())])

    A = oracle.dense_normalized_adjacency(ds.edges, ds.num_nodes)
    tasks = [oracle.RefTask(t.classes, t.support_nodes(), t.query_nodes()) for t in episode.sequence]
    buffers = [np.array([n for n, _ in b.values()], dtype=np.int64) for b in trace.buffers]
    like = params.arrays()
    teachers: list = []
    args = (tasks, buffers, A, ds.features, ds.labels, ds.num_classes, inner_lr, inner_steps, use_kd, use_sir,
            ce_on_union)
    oracle.mctf_reference_objective(like, *args, record_teachers=teachers)
    fd = oracle.finite_diff_gradient(
        lambda vec: oracle.mctf_reference_objective(oracle.unflatten(vec, like), *args, teachers=teachers),
        oracle.flatten(like))
    return CheckResult(f"meta_gradient/m={inner_steps}", oracle.rel_error(mine, fd, FLOOR), tol)


def run_all(seed: int = 0) -> list[CheckResult]:
    results = primitive_checks(seed)
    results.append(model_check(seed=seed))
    results.append(loss_check(seed=seed))
    for m in (1, 2):
        results.append(meta_gradient_check(inner_steps=m, seed=seed))
    return results
