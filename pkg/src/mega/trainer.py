"""Optimizers, the differentiable inner loop, MCTF meta-training, and the
few-shot incremental stage."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .episodes import MetaEpisode, SplitConfig, TaskSpec, TaskStream, sample_meta_episode
from .eval_report import AccuracyMatrix, StageRow, evaluate_accuracy
from .losses import KDSIR, LossState, incremental_loss, inner_loss, masked_cross_entropy, outer_loss, seen_mask, teacher_logits
from .model import GraphInputs, ParamSet, Train, forward, init_params
from .replay import INCREMENTAL, META_EPOCH, ReplayBuffer, update_buffer

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "AdamState",
    "adam_step",
    "sgd_step_differentiable",
    "inner_loop_adapt",
    "mctf_objective",
    "maml_objective",
    "mctf_epoch",
    "meta_train",
    "incremental_stage",
    "run_experiment",
    "StageReport",
    "update_buffer",
    "ReplayBuffer",
]

META_METHODS = ("mctf", "maml", "none")
VISIBILITY = ("transductive", "induced")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    inner_lr: float = 0.005
    outer_lr: float = 0.005
    weight_decay: float = 5e-4
    inner_steps: int = 1
    meta_epochs: int = 300
    inc_finetune_steps: int = 5
    inc_lr: float = 0.005
    dropout: float = 0.5
    use_mctf: bool = True
    use_kd: bool = True
    use_sir: bool = True
    # "maml" swaps the chained sequence for independent per-task adaptation
    meta_method: str = "mctf"
    # whether KD/SIR are also applied inside meta-training
    meta_gcl: bool = True
    outer_ce_on_union: bool = False
    seed_base_buffer: bool = True
    visibility: str = "transductive"
    hidden: tuple[int, int] = (32, 16)
    normalization: str = "sym"
    divergence_limit: float = 1e6
    seed: int = 0

    def validate(self) -> None:
        if self.inner_lr <= 0 or self.outer_lr <= 0 or self.inc_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.meta_epochs < 0 or self.inc_finetune_steps < 0:
            raise ValueError("epoch and step counts must be non-negative")
        if self.meta_method not in META_METHODS:
            raise ValueError(f"meta_method must be one of {META_METHODS}")
        if self.visibility not in VISIBILITY:
            raise ValueError(f"visibility must be one of {VISIBILITY}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def effective_meta_method(self) -> str:
        return self.meta_method if self.use_mctf else "none"

    def meta_plugin(self) -> KDSIR:
        on = self.meta_gcl
        return KDSIR(use_kd=self.use_kd and on, use_sir=self.use_sir and on)

    def inc_plugin(self) -> KDSIR:
        return KDSIR(use_kd=self.use_kd, use_sir=self.use_sir)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# --- optimizers -----------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params.values()], [np.zeros(p.shape) for p in params.values()])


def adam_step(state: AdamState, params: ParamSet, grads, lr: float, weight_decay: float = 0.0) -> ParamSet:
    """One bias-corrected Adam step with L2 decay folded into the gradient.

    Moments in ``state`` are updated in place; fresh parameter leaves are
    returned.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    new = []
    for k, (p, g) in enumerate(zip(params.values(), grads)):
        g = np.asarray(g.data if isinstance(g, DiffValue) else g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g = g + weight_decay * p.data
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = state.m[k] / (1 - b1**state.t)
        v_hat = state.v[k] / (1 - b2**state.t)
        new.append(p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return ParamSet.from_arrays(dict(zip(params, new)))


def sgd_step_differentiable(params: ParamSet, loss: DiffValue, lr: float) -> ParamSet:
    """theta - lr * grad, keeping the gradient's own graph for later differentiation."""
    grads = ad.gradient(loss, params.values(), higher_order=True)
    return ParamSet.from_values([ad.sub(p, ad.scale(g, lr)) for p, g in zip(params.values(), grads)])


def _check_loss(loss: DiffValue, cfg: TrainConfig, where: str) -> None:
    val = loss.item()
    if not np.isfinite(val) or abs(val) > cfg.divergence_limit:
        raise TrainingDiverged(f"{where}: loss {val!r} exceeds divergence limit {cfg.divergence_limit}")


# --- meta-training --------------------------------------------------------

def _mode(cfg: TrainConfig, rng: np.random.Generator) -> Train | None:
    return Train(rng, cfg.dropout) if cfg.dropout > 0 else None


def _view(graph: GraphInputs, cfg: TrainConfig, classes) -> GraphInputs:
    if cfg.visibility == "transductive":
        return graph
    nodes = np.flatnonzero(np.isin(graph.labels, np.asarray(list(classes))))
    return graph.restricted(nodes)


def inner_loop_adapt(start: ParamSet, support_nodes, buffer: ReplayBuffer, graph: GraphInputs,
                     mask: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
                     plugin: KDSIR | None = None, t_logits: DiffValue | None = None) -> ParamSet:
    """Apply ``cfg.inner_steps`` differentiable SGD steps on the inner loss.

    The teacher for distillation is ``start`` (detached).
    """
    plugin = plugin if plugin is not None else cfg.meta_plugin()
    if t_logits is None and plugin.use_kd and len(buffer):
        t_logits = teacher_logits(start, graph)
    cur = start
    for _ in range(cfg.inner_steps):
        state = LossState(graph, cur, mask, np.asarray(support_nodes), teacher=start, buffer=buffer,
                          mode=_mode(cfg, rng)).with_teacher_logits(t_logits)
        loss = inner_loss(state, plugin)
        _check_loss(loss, cfg, "inner loop")
        cur = sgd_step_differentiable(cur, loss, cfg.inner_lr)
    return cur


@dataclass
class EpisodeTrace:
    """Per-pseudo-task record of what the objective saw (for oracles and tests)."""

    buffers: list[dict[int, tuple[int, int]]] = field(default_factory=list)
    outer_losses: list[float] = field(default_factory=list)
    graph_nodes: int = 0


def mctf_objective(params: ParamSet, episode: MetaEpisode, graph: GraphInputs, cfg: TrainConfig,
                   rng: np.random.Generator, buffer: ReplayBuffer | None = None) -> tuple[DiffValue, EpisodeTrace]:
    """Summed outer losses along a chained pseudo-task sequence.

    theta_i^(0) is the adapted parameter set of the previous pseudo-task, so
    the returned scalar depends on ``params`` through every inner step.
    ``trace.buffers[i]`` is the replay buffer used during pseudo-task i.
    """
    plugin = cfg.meta_plugin()
    buffer = buffer if buffer is not None else ReplayBuffer(META_EPOCH)
    trace = EpisodeTrace()
    nodes_before = ad.stats["nodes"]
    C = graph.num_classes
    seen: list[int] = []
    past = np.zeros(0, dtype=np.int64)
    total = None
    cur = params
    for task in episode.sequence:
        seen.extend(task.classes)
        mask = seen_mask(C, seen)
        view = _view(graph, cfg, seen)
        start = cur
        need_teacher = plugin.use_kd and (len(buffer) or past.size)
        t_logits = teacher_logits(start, view) if need_teacher else None
        trace.buffers.append(dict(buffer.entries))

        cur = inner_loop_adapt(start, task.support_nodes(), buffer, view, mask, cfg, rng, plugin, t_logits)

        qstate = LossState(view, cur, mask, task.query_nodes(), teacher=start, past_nodes=past,
                           mode=_mode(cfg, rng)).with_teacher_logits(t_logits)
        loss = outer_loss(qstate, plugin, ce_on_union=cfg.outer_ce_on_union)
        _check_loss(loss, cfg, "outer loss")
        trace.outer_losses.append(loss.item())
        total = loss if total is None else ad.add(total, loss)

        update_buffer(buffer, task.classes, task.support, rng)
        past = np.concatenate([past, task.query_nodes()])
    trace.graph_nodes = ad.stats["nodes"] - nodes_before
    return total, trace


def maml_objective(params: ParamSet, episode: MetaEpisode, graph: GraphInputs, cfg: TrainConfig,
                   rng: np.random.Generator) -> tuple[DiffValue, EpisodeTrace]:
    """Classic MAML: every pseudo-task adapts from ``params`` independently."""
    plugin = KDSIR(use_kd=False, use_sir=False)
    trace = EpisodeTrace()
    nodes_before = ad.stats["nodes"]
    total = None
    for task in episode.sequence:
        mask = seen_mask(graph.num_classes, task.classes)
        view = _view(graph, cfg, task.classes)
        adapted = inner_loop_adapt(params, task.support_nodes(), ReplayBuffer(META_EPOCH), view, mask,
                                   cfg, rng, plugin)
        qstate = LossState(view, adapted, mask, task.query_nodes(), mode=_mode(cfg, rng))
        loss = outer_loss(qstate, plugin)
        _check_loss(loss, cfg, "outer loss")
        trace.outer_losses.append(loss.item())
        total = loss if total is None else ad.add(total, loss)
    trace.graph_nodes = ad.stats["nodes"] - nodes_before
    return total, trace


def mctf_epoch(params: ParamSet, base: TaskSpec, graph: GraphInputs, split: SplitConfig, cfg: TrainConfig,
               rng: np.random.Generator, adam: AdamState, episode: MetaEpisode | None = None,
               method: str = "mctf") -> tuple[ParamSet, dict]:
    """One meta-epoch: sample a pseudo-task sequence, one Adam step on the meta-gradient."""
    if episode is None:
        episode = sample_meta_episode(base, split, rng)
    buffer = ReplayBuffer(META_EPOCH)
    if method == "mctf":
        total, trace = mctf_objective(params, episode, graph, cfg, rng, buffer)
    elif method == "maml":
        total, trace = maml_objective(params, episode, graph, cfg, rng)
    else:
        raise ValueError(f"unknown meta method {method!r}")
    grads = ad.gradient(total, params.values())
    for g in grads:
        if not np.all(np.isfinite(g.data)):
            raise ad.NonFiniteError("non-finite meta-gradient; epoch aborted")
    new = adam_step(adam, params, grads, cfg.outer_lr, cfg.weight_decay)
    buffer.clear()
    info = {
        "loss": total.item(),
        "p": episode.p,
        "graph_nodes": trace.graph_nodes,
        "buffer_after": len(buffer),
        "meta_grad": grads,
    }
    return new, info


def _base_finetune_step(params, base, graph, cfg, rng, adam):
    mask = seen_mask(graph.num_classes, base.classes)
    view = _view(graph, cfg, base.classes)
    nodes = base.support_nodes()
    logits = forward(params, view, _mode(cfg, rng))
    loss = masked_cross_entropy(ad.row_select(logits, nodes), graph.labels[nodes], mask)
    _check_loss(loss, cfg, "base training")
    grads = ad.gradient(loss, params.values())
    return adam_step(adam, params, grads, cfg.outer_lr, cfg.weight_decay), loss.item()


def meta_train(graph: GraphInputs, stream: TaskStream, split: SplitConfig, cfg: TrainConfig,
               rng: np.random.Generator | None = None, params: ParamSet | None = None) -> tuple[ParamSet, list[float]]:
    """Train base parameters; returns (theta*, per-epoch loss curve).

    With ``use_mctf`` off this is plain Adam on the base support set.
    """
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(graph.features.shape[1], graph.num_classes, cfg.seed, tuple(cfg.hidden))
    adam = AdamState.for_params(params)
    method = cfg.effective_meta_method
    curve = []
    for epoch in range(cfg.meta_epochs):
        if method == "none":
            params, loss = _base_finetune_step(params, stream.base, graph, cfg, rng, adam)
        else:
            params, info = mctf_epoch(params, stream.base, graph, split, cfg, rng, adam, method=method)
            loss = info["loss"]
        curve.append(loss)
        if epoch % 50 == 0:
            log.debug("meta epoch %d (%s): loss %.5f", epoch, method, loss)
    return params, curve


# --- incremental stage ----------------------------------------------------

@dataclass
class StageReport:
    accuracy: AccuracyMatrix
    seen_class_counts: list[int]
    meta_curve: list[float]
    inc_curves: list[list[float]]
    config: dict
    seed: int

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy.to_json(),
            "seen_class_counts": self.seen_class_counts,
            "meta_curve": self.meta_curve,
            "inc_curves": self.inc_curves,
            "config": self.config,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StageReport":
        return cls(AccuracyMatrix.from_json(doc["accuracy"]), doc["seen_class_counts"], doc["meta_curve"],
                   doc["inc_curves"], doc["config"], doc["seed"])


def _evaluate_row(params: ParamSet, graph: GraphInputs, tasks: list[TaskSpec], seen: list[int],
                  cfg: TrainConfig) -> StageRow:
    mask = seen_mask(graph.num_classes, seen)
    view = _view(graph, cfg, seen)
    all_q = np.concatenate([t.query_nodes() for t in tasks])
    overall = evaluate_accuracy(params, view.adj, view.features, all_q, graph.labels, mask)
    per_task = [evaluate_accuracy(params, view.adj, view.features, t.query_nodes(), graph.labels, mask)
                for t in tasks]
    return StageRow(overall, per_task, int(all_q.size))


def incremental_stage(params: ParamSet, graph: GraphInputs, stream: TaskStream, cfg: TrainConfig,
                      rng: np.random.Generator | None = None,
                      trace: dict | None = None) -> tuple[AccuracyMatrix, list[int], list[list[float]]]:
    """Fine-tune on each novel support set in order, evaluating on all queries so far.

    If ``trace`` is given it receives the replay-buffer size after each
    task ("buffer_sizes") and the final parameters ("params").
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    plugin = cfg.inc_plugin()
    params = params.copy()
    seen = list(stream.base.classes)
    buffer = ReplayBuffer(INCREMENTAL)
    if cfg.seed_base_buffer:
        update_buffer(buffer, stream.base.classes, stream.base.support, rng)

    rows = [_evaluate_row(params, graph, [stream.base], seen, cfg)]
    seen_counts = [len(seen)]
    curves = []
    for i, task in enumerate(stream.novel, 1):
        seen.extend(task.classes)
        mask = seen_mask(graph.num_classes, seen)
        view = _view(graph, cfg, seen)
        teacher = params.copy()
        t_logits = teacher_logits(teacher, view) if plugin.use_kd and len(buffer) else None
        adam = AdamState.for_params(params)
        curve = []
        for _ in range(cfg.inc_finetune_steps):
            state = LossState(view, params, mask, task.support_nodes(), teacher=teacher, buffer=buffer,
                              mode=_mode(cfg, rng), stage=i).with_teacher_logits(t_logits)
            loss = incremental_loss(state, plugin)
            _check_loss(loss, cfg, f"incremental task {i}")
            grads = ad.gradient(loss, params.values())
            params = adam_step(adam, params, grads, cfg.inc_lr, cfg.weight_decay)
            curve.append(loss.item())
        curves.append(curve)
        update_buffer(buffer, task.classes, task.support, rng)
        if trace is not None:
            trace.setdefault("buffer_sizes", []).append(len(buffer))
        rows.append(_evaluate_row(params, graph, stream.tasks[: i + 1], seen, cfg))
        seen_counts.append(len(seen))
    if trace is not None:
        trace["params"] = params
    return AccuracyMatrix(rows), seen_counts, curves


def run_experiment(graph: GraphInputs, stream: TaskStream, split: SplitConfig, cfg: TrainConfig) -> StageReport:
    """Meta-train then run the incremental stage, all from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    theta, meta_curve = meta_train(graph, stream, split, cfg, rng)
    acc, seen_counts, inc_curves = incremental_stage(theta, graph, stream, cfg, rng)
    log.info("seed %d finished in %.1fs, final accuracy %.4f", cfg.seed, time.perf_counter() - t0,
             acc.rows[-1].overall)
    return StageReport(acc, seen_counts, meta_curve, inc_curves, cfg.to_json(), cfg.seed)
