"""Loss terms: masked cross-entropy, distillation (KD), single-instance
replay (SIR), and the three phase losses built from them.

The continual-learning part of each phase loss comes from a plugin with
three hooks (inner, outer, incremental); ``KDSIR`` is the default. Empty
buffers and empty query unions contribute an exact zero.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .model import GraphInputs, ParamSet, Train, forward
from .replay import ReplayBuffer

__all__ = [
    "counters",
    "seen_mask",
    "masked_cross_entropy",
    "kd_from_logits",
    "kd_loss",
    "sir_loss",
    "LossState",
    "LossPlugin",
    "KDSIR",
    "inner_loss",
    "outer_loss",
    "incremental_loss",
]

# how many KD / SIR terms were actually evaluated (non-empty)
counters: Counter = Counter()


def seen_mask(num_classes: int, classes) -> np.ndarray:
    mask = np.zeros(num_classes, dtype=bool)
    mask[np.asarray(list(classes), dtype=np.int64)] = True
    return mask


def _zero() -> DiffValue:
    return ad.constant(0.0)


def masked_cross_entropy(logits: DiffValue, labels, mask: np.ndarray) -> DiffValue:
    """Mean negative log-softmax over the visible classes only."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cross-entropy over an empty batch")
    if logits.shape[0] != labels.size:
        raise ValueError(f"{logits.shape[0]} logit rows vs {labels.size} labels")
    mask = np.asarray(mask, dtype=bool)
    if not mask[labels].all():
        hidden = sorted(set(labels[~mask[labels]].tolist()))
        raise ValueError(f"labels of masked-out classes: {hidden}")
    visible = np.flatnonzero(mask)
    pos = np.searchsorted(visible, labels)
    onehot = np.zeros((labels.size, visible.size))
    onehot[np.arange(labels.size), pos] = 1.0

    z = ad.col_select(logits, visible)
    lse = ad.sum_all(ad.logsumexp_rows(z))
    picked = ad.sum_all(ad.mul(z, ad.constant(onehot)))
    return ad.scale(ad.sub(lse, picked), 1.0 / labels.size)


def kd_from_logits(teacher_logits: DiffValue, student_logits: DiffValue, nodes, mask: np.ndarray) -> DiffValue:
    """Squared error between teacher and student rows, averaged over b*c."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        return _zero()
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"teacher {teacher_logits.shape} vs student {student_logits.shape}")
    counters["kd"] += 1
    visible = np.flatnonzero(mask)
    t = ad.col_select(ad.row_select(ad.detach(teacher_logits), nodes), visible)
    s = ad.col_select(ad.row_select(student_logits, nodes), visible)
    sq = ad.sum_all(ad.square(ad.sub(s, t)))
    return ad.scale(sq, 1.0 / (nodes.size * visible.size))


def teacher_logits(teacher: ParamSet, graph: GraphInputs) -> DiffValue:
    """Dropout-free, detached teacher outputs."""
    with ad.no_record():
        return ad.detach(forward(teacher.detached(), graph))


def kd_loss(teacher: ParamSet, student: ParamSet, nodes, graph: GraphInputs, mask: np.ndarray,
            mode: Train | None = None) -> DiffValue:
    if np.asarray(nodes).size == 0:
        return _zero()
    return kd_from_logits(teacher_logits(teacher, graph), forward(student, graph, mode), nodes, mask)


def sir_from_logits(logits: DiffValue, buffer: ReplayBuffer, mask: np.ndarray) -> DiffValue:
    if len(buffer) == 0:
        return _zero()
    labels = buffer.labels()
    if not np.asarray(mask, dtype=bool)[labels].all():
        raise ValueError("replay buffer holds a class that is not visible yet")
    counters["sir"] += 1
    return masked_cross_entropy(ad.row_select(logits, buffer.nodes()), labels, mask)


def sir_loss(params: ParamSet, buffer: ReplayBuffer, graph: GraphInputs, mask: np.ndarray,
             mode: Train | None = None) -> DiffValue:
    if len(buffer) == 0:
        return _zero()
    return sir_from_logits(forward(params, graph, mode), buffer, mask)


@dataclass(eq=False)
class LossState:
    """Everything a phase loss needs at one point of training.

    ``nodes`` is the support set (inner/incremental) or the current query
    set (outer). ``past_nodes`` is the union of earlier pseudo-task queries
    used for outer-loop distillation. Student and teacher logits are
    computed once and cached.
    """

    graph: GraphInputs
    student: ParamSet
    mask: np.ndarray
    nodes: np.ndarray
    teacher: ParamSet | None = None
    buffer: ReplayBuffer = field(default_factory=ReplayBuffer)
    past_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mode: Train | None = None
    stage: int = 0
    _student_logits: DiffValue | None = field(default=None, repr=False)
    _teacher_logits: DiffValue | None = field(default=None, repr=False)

    @property
    def labels(self) -> np.ndarray:
        return self.graph.labels[self.nodes]

    def student_logits(self) -> DiffValue:
        if self._student_logits is None:
            self._student_logits = forward(self.student, self.graph, self.mode)
        return self._student_logits

    def teacher_logits(self) -> DiffValue:
        if self._teacher_logits is None:
            if self.teacher is None:
                raise ValueError("no teacher parameters in loss state")
            self._teacher_logits = teacher_logits(self.teacher, self.graph)
        return self._teacher_logits

    def with_teacher_logits(self, logits: DiffValue | None) -> "LossState":
        self._teacher_logits = logits
        return self


class LossPlugin(Protocol):
    def inner_term(self, state: LossState) -> DiffValue: ...

    def outer_term(self, state: LossState) -> DiffValue: ...

    def incremental_term(self, state: LossState) -> DiffValue: ...


@dataclass
class KDSIR:
    """Distillation plus single-instance replay in all three phases."""

    use_kd: bool = True
    use_sir: bool = True

    def _kd(self, state: LossState, nodes) -> DiffValue:
        if not self.use_kd or len(nodes) == 0:
            return _zero()
        return kd_from_logits(state.teacher_logits(), state.student_logits(), nodes, state.mask)

    def _sir(self, state: LossState) -> DiffValue:
        if not self.use_sir or len(state.buffer) == 0:
            return _zero()
        return sir_from_logits(state.student_logits(), state.buffer, state.mask)

    def inner_term(self, state: LossState) -> DiffValue:
        return ad.add(self._kd(state, state.buffer.nodes()), self._sir(state))

    def outer_term(self, state: LossState) -> DiffValue:
        # no replay here: the outer phase never sees support nodes
        return self._kd(state, state.past_nodes)

    def incremental_term(self, state: LossState) -> DiffValue:
        return ad.add(self._kd(state, state.buffer.nodes()), self._sir(state))


def _ce(state: LossState, nodes) -> DiffValue:
    nodes = np.asarray(nodes, dtype=np.int64)
    return masked_cross_entropy(ad.row_select(state.student_logits(), nodes), state.graph.labels[nodes], state.mask)


def inner_loss(state: LossState, plugin: LossPlugin | None = None) -> DiffValue:
    if len(state.nodes) == 0:
        raise ValueError("inner loss needs a non-empty support set")
    plugin = plugin or KDSIR()
    return ad.add(_ce(state, state.nodes), plugin.inner_term(state))


def outer_loss(state: LossState, plugin: LossPlugin | None = None, ce_on_union: bool = False) -> DiffValue:
    """Query cross-entropy plus distillation on earlier queries.

    ``ce_on_union`` switches the CE term to all queries seen so far.
    """
    if len(state.nodes) == 0:
        raise ValueError("outer loss needs a non-empty query set")
    plugin = plugin or KDSIR()
    ce_nodes = np.concatenate([state.past_nodes, state.nodes]) if ce_on_union else state.nodes
    return ad.add(_ce(state, ce_nodes), plugin.outer_term(state))


def incremental_loss(state: LossState, plugin: LossPlugin | None = None) -> DiffValue:
    if len(state.nodes) == 0:
        raise ValueError("incremental loss needs a non-empty support set")
    plugin = plugin or KDSIR()
    return ad.add(_ce(state, state.nodes), plugin.incremental_term(state))
