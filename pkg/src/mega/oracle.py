"""Brute-force reference computations for testing the main code path.

Nothing here touches the autodiff engine or the trainer. The GCN, its loss
gradients and the unrolled meta-objective are re-derived with dense numpy
and hand-written backpropagation, and gradients of the meta-objective are
taken by central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class FdSpec:
    eps: float = 1e-5
    scheme: str = "central"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("finite-difference step must be positive")
        if self.scheme != "central":
            raise ValueError("only central differences are supported")


class NonDeterministicObjective(RuntimeError):
    pass


def finite_diff_gradient(objective: Callable[[np.ndarray], float], theta, spec: FdSpec | None = None) -> np.ndarray:
    """(f(theta + eps e_k) - f(theta - eps e_k)) / (2 eps) for every coordinate k."""
    spec = spec or FdSpec()
    theta = np.array(theta, dtype=np.float64)
    f0, f1 = objective(theta.copy()), objective(theta.copy())
    if f0 != f1:
        raise NonDeterministicObjective(f"objective returned {f0!r} then {f1!r} at the same point")
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + spec.eps
        fp = objective(theta.copy())
        flat[k] = orig - spec.eps
        fm = objective(theta.copy())
        flat[k] = orig
        grad[k] = (fp - fm) / (2 * spec.eps)
    return grad.reshape(theta.shape)


def rel_error(a, b, floor: float = 0.0) -> float:
    """max_k |a_k - b_k| / max(|a_k|, |b_k|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    diff = np.abs(a - b)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(diff == 0, 0.0, diff / denom)
    return float(r.max()) if r.size else 0.0


# --- dense graph algebra --------------------------------------------------

def dense_normalized_adjacency(edges, num_nodes: int) -> np.ndarray:
    a = np.zeros((num_nodes, num_nodes))
    for u, v in edges:
        if u != v:
            a[u, v] = a[v, u] = 1.0
    a += np.eye(num_nodes)
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def flatten(arrays: dict) -> np.ndarray:
    return np.concatenate([np.asarray(arrays[k], dtype=np.float64).ravel() for k in NAMES])


def unflatten(vec: np.ndarray, like: dict) -> dict:
    out, pos = {}, 0
    for k in NAMES:
        size = np.asarray(like[k]).size
        out[k] = vec[pos : pos + size].reshape(np.asarray(like[k]).shape).copy()
        pos += size
    return out


def gcn_logits(p: dict, A: np.ndarray, X: np.ndarray) -> np.ndarray:
    h1 = np.maximum(A @ X @ p["W1"] + p["b1"], 0.0)
    h2 = np.maximum(A @ h1 @ p["W2"] + p["b2"], 0.0)
    return A @ h2 @ p["W3"] + p["b3"]


def _gcn_forward_cache(p, A, X):
    ax = A @ X
    z1 = ax @ p["W1"] + p["b1"]
    h1 = np.maximum(z1, 0.0)
    ah1 = A @ h1
    z2 = ah1 @ p["W2"] + p["b2"]
    h2 = np.maximum(z2, 0.0)
    ah2 = A @ h2
    out = ah2 @ p["W3"] + p["b3"]
    return out, (ax, z1, ah1, z2, ah2)


def _gcn_backward(p, A, cache, d_out) -> dict:
    ax, z1, ah1, z2, ah2 = cache
    g = {"W3": ah2.T @ d_out, "b3": d_out.sum(axis=0)}
    d_z2 = (A.T @ d_out @ p["W3"].T) * (z2 > 0)
    g["W2"], g["b2"] = ah1.T @ d_z2, d_z2.sum(axis=0)
    d_z1 = (A.T @ d_z2 @ p["W2"].T) * (z1 > 0)
    g["W1"], g["b1"] = ax.T @ d_z1, d_z1.sum(axis=0)
    return g


def _ce_value_grad(logits, rows, labels, mask):
    rows = np.asarray(rows, dtype=np.int64)
    vis = np.flatnonzero(mask)
    z = logits[np.ix_(rows, vis)]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    pos = np.array([np.flatnonzero(vis == y)[0] for y in labels])
    value = float(np.mean(lse - z[np.arange(rows.size), pos]))
    soft = np.exp(z - lse[:, None])
    soft[np.arange(rows.size), pos] -= 1.0
    d = np.zeros_like(logits)
    np.add.at(d, (rows[:, None], vis[None, :]), soft / rows.size)
    return value, d


def _kd_value_grad(student, teacher, rows, mask):
    rows = np.asarray(rows, dtype=np.int64)
    vis = np.flatnonzero(mask)
    diff = student[np.ix_(rows, vis)] - teacher[np.ix_(rows, vis)]
    bc = rows.size * vis.size
    d = np.zeros_like(student)
    np.add.at(d, (rows[:, None], vis[None, :]), 2.0 * diff / bc)
    return float((diff**2).sum() / bc), d


@dataclass
class PhaseLoss:
    """CE on ``ce_rows`` + KD against ``teacher`` on ``kd_rows`` + CE on ``sir_rows``."""

    ce_rows: np.ndarray
    mask: np.ndarray
    kd_rows: np.ndarray | None = None
    teacher: np.ndarray | None = None
    sir_rows: np.ndarray | None = None


def phase_value_grad(p: dict, A, X, labels, spec: PhaseLoss) -> tuple[float, dict]:
    logits, cache = _gcn_forward_cache(p, A, X)
    value, d = _ce_value_grad(logits, spec.ce_rows, labels[spec.ce_rows], spec.mask)
    if spec.kd_rows is not None and len(spec.kd_rows):
        v, dk = _kd_value_grad(logits, spec.teacher, spec.kd_rows, spec.mask)
        value += v
        d += dk
    if spec.sir_rows is not None and len(spec.sir_rows):
        v, ds = _ce_value_grad(logits, spec.sir_rows, labels[spec.sir_rows], spec.mask)
        value += v
        d += ds
    return value, _gcn_backward(p, A, cache, d)


def phase_value(p: dict, A, X, labels, spec: PhaseLoss) -> float:
    return phase_value_grad(p, A, X, labels, spec)[0]


# --- reference meta-objectives -------------------------------------------

@dataclass
class RefTask:
    classes: list
    support: np.ndarray
    query: np.ndarray


def mctf_reference_objective(theta: dict, tasks: list[RefTask], buffers: list[np.ndarray], A, X, labels,
                             num_classes: int, alpha: float, m: int, use_kd: bool, use_sir: bool,
                             ce_on_union: bool = False, teachers: list[np.ndarray] | None = None,
                             record_teachers: list | None = None) -> float:
    """Sum of outer losses along the chained sequence, hand-unrolled.

    ``buffers[i]`` lists the replay nodes present during pseudo-task i.
    Teacher outputs are constants to the trainer, so a finite-difference
    check must pass ``teachers`` frozen at the unperturbed point (collect
    them with ``record_teachers``).
    """
    cur = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    seen, past, total = [], np.zeros(0, dtype=np.int64), 0.0
    for i, (task, buf) in enumerate(zip(tasks, buffers)):
        seen += list(task.classes)
        mask = np.zeros(num_classes, dtype=bool)
        mask[seen] = True
        teacher = gcn_logits(cur, A, X) if teachers is None else teachers[i]
        if record_teachers is not None:
            record_teachers.append(teacher)
        buf = np.asarray(buf, dtype=np.int64)
        inner = PhaseLoss(np.asarray(task.support), mask,
                          kd_rows=buf if use_kd else None, teacher=teacher,
                          sir_rows=buf if use_sir else None)
        for _ in range(m):
            _, g = phase_value_grad(cur, A, X, labels, inner)
            cur = {k: cur[k] - alpha * g[k] for k in NAMES}
        query = np.asarray(task.query, dtype=np.int64)
        ce_rows = np.concatenate([past, query]) if ce_on_union else query
        outer = PhaseLoss(ce_rows, mask, kd_rows=past if use_kd else None, teacher=teacher)
        total += phase_value(cur, A, X, labels, outer)
        past = np.concatenate([past, query])
    return total


def _hvp(p: dict, A, X, labels, spec: PhaseLoss, v: dict, h: float = 1e-6) -> dict:
    """Hessian-vector product of a phase loss by central differences of its gradient."""
    norm = np.sqrt(sum(float((v[k] ** 2).sum()) for k in NAMES))
    if norm == 0:
        return {k: np.zeros_like(v[k]) for k in NAMES}
    step = {k: v[k] / norm * h for k in NAMES}
    _, gp = phase_value_grad({k: p[k] + step[k] for k in NAMES}, A, X, labels, spec)
    _, gm = phase_value_grad({k: p[k] - step[k] for k in NAMES}, A, X, labels, spec)
    return {k: (gp[k] - gm[k]) / (2 * h) * norm for k in NAMES}


def maml_gradient_flat(theta: np.ndarray, grad_s: Callable, grad_q: Callable, alpha: float, m: int,
                       h: float = 1e-6) -> np.ndarray:
    """Second-order MAML gradient for generic flat-vector losses.

    ``grad_s``/``grad_q`` return the support/query loss gradients; Hessian
    products come from central differences of ``grad_s``.
    """
    path = [np.asarray(theta, dtype=np.float64)]
    for _ in range(m):
        path.append(path[-1] - alpha * grad_s(path[-1]))
    v = grad_q(path[-1])
    for j in range(m - 1, -1, -1):
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        u = v / norm * h
        hv = (grad_s(path[j] + u) - grad_s(path[j] - u)) / (2 * h) * norm
        v = v - alpha * hv
    return v


def maml_meta_gradient(theta: dict, task: RefTask, A, X, labels, num_classes: int, alpha: float, m: int) -> dict:
    """Second-order MAML gradient of the query loss after m inner SGD steps.

    Backward recursion v <- (I - alpha H_s(theta_j)) v, with H_s v from
    differences of the analytic support-loss gradient.
    """
    mask = np.zeros(num_classes, dtype=bool)
    mask[list(task.classes)] = True
    s_spec = PhaseLoss(np.asarray(task.support), mask)
    q_spec = PhaseLoss(np.asarray(task.query), mask)
    path = [{k: np.array(theta[k], dtype=np.float64) for k in NAMES}]
    for _ in range(m):
        _, g = phase_value_grad(path[-1], A, X, labels, s_spec)
        path.append({k: path[-1][k] - alpha * g[k] for k in NAMES})
    _, v = phase_value_grad(path[-1], A, X, labels, q_spec)
    for j in range(m - 1, -1, -1):
        hv = _hvp(path[j], A, X, labels, s_spec, v)
        v = {k: v[k] - alpha * hv[k] for k in NAMES}
    return v


def reference_adam_update(theta: dict, grad: dict, lr: float, weight_decay: float,
                          beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """First Adam step from zero moments."""
    out = {}
    for k in NAMES:
        g = grad[k] + weight_decay * theta[k]
        m_hat = (1 - beta1) * g / (1 - beta1)
        v_hat = (1 - beta2) * g * g / (1 - beta2)
        out[k] = theta[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def reference_maml_step(theta: dict, task: RefTask, A, X, labels, num_classes: int, alpha: float, beta: float,
                        m: int = 1, weight_decay: float = 0.0) -> dict:
    """One second-order MAML meta-step on a single task, with a fresh Adam outer optimizer."""
    g = maml_meta_gradient(theta, task, A, X, labels, num_classes, alpha, m)
    return reference_adam_update(theta, g, beta, weight_decay)
