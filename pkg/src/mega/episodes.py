"""Task streams for N-way K-shot R-query class-incremental evaluation, and
meta-training episodes that partition the base classes into ordered
pseudo-tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graphdata import GraphDataset

__all__ = [
    "SplitConfig",
    "TaskSpec",
    "TaskStream",
    "PseudoTask",
    "MetaEpisode",
    "build_task_stream",
    "sample_meta_episode",
]


@dataclass
class SplitConfig:
    N: int = 3
    K: int = 3
    R: int = 100
    base_class_count: int = 50
    seed: int = 0
    meta_query_cap: int = 25
    num_novel_tasks: int | None = None  # None: as many full tasks as fit

    def validate(self) -> None:
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if self.K < 1 or self.R < 1:
            raise ValueError("K and R must be at least 1")
        if self.base_class_count < 1:
            raise ValueError("base_class_count must be positive")
        if self.meta_query_cap < 1:
            raise ValueError("meta_query_cap must be positive")


@dataclass
class TaskSpec:
    classes: list[int]
    support: dict[int, list[int]]
    query: dict[int, list[int]]

    def support_nodes(self) -> np.ndarray:
        return np.array([n for c in self.classes for n in self.support[c]], dtype=np.int64)

    def query_nodes(self) -> np.ndarray:
        return np.array([n for c in self.classes for n in self.query[c]], dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "support": {str(c): list(self.support[c]) for c in self.classes},
            "query": {str(c): list(self.query[c]) for c in self.classes},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TaskSpec":
        classes = [int(c) for c in doc["classes"]]
        return cls(
            classes,
            {c: [int(n) for n in doc["support"][str(c)]] for c in classes},
            {c: [int(n) for n in doc["query"][str(c)]] for c in classes},
        )


@dataclass
class TaskStream:
    base: TaskSpec
    novel: list[TaskSpec]
    N: int
    K: int
    R: int

    @property
    def tasks(self) -> list[TaskSpec]:
        return [self.base, *self.novel]

    def to_json(self) -> dict:
        return {
            "N": self.N,
            "K": self.K,
            "R": self.R,
            "base": self.base.to_json(),
            "novel": [t.to_json() for t in self.novel],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TaskStream":
        return cls(
            TaskSpec.from_json(doc["base"]),
            [TaskSpec.from_json(t) for t in doc["novel"]],
            int(doc["N"]),
            int(doc["K"]),
            int(doc["R"]),
        )


@dataclass
class PseudoTask:
    classes: list[int]
    support: dict[int, list[int]]
    query: dict[int, list[int]]

    def support_nodes(self) -> np.ndarray:
        return np.array([n for c in self.classes for n in self.support[c]], dtype=np.int64)

    def query_nodes(self) -> np.ndarray:
        return np.array([n for c in self.classes for n in self.query[c]], dtype=np.int64)


@dataclass
class MetaEpisode:
    sequence: list[PseudoTask] = field(default_factory=list)

    @property
    def p(self) -> int:
        return len(self.sequence)


def build_task_stream(dataset: GraphDataset, cfg: SplitConfig) -> TaskStream:
    """Split classes into a base task and consecutive N-class novel tasks.

    Novel classes get K support and R query nodes; base classes keep R query
    nodes and put every other node in the support set.
    """
    cfg.validate()
    C = dataset.num_classes
    available = (C - cfg.base_class_count) // cfg.N
    n_novel = available if cfg.num_novel_tasks is None else cfg.num_novel_tasks
    if cfg.base_class_count + n_novel * cfg.N > C or n_novel < 0:
        raise ValueError(
            f"not enough classes: base {cfg.base_class_count} + {n_novel} x {cfg.N} novel > {C}"
        )
    rng = np.random.default_rng(cfg.seed)
    order = [int(c) for c in rng.permutation(C)]

    def split(c: int, n_support: int | None) -> tuple[list[int], list[int]]:
        nodes = dataset.nodes_of_class(c)
        if nodes.size < cfg.K + cfg.R:
            raise ValueError(f"class {c} has {nodes.size} nodes, needs at least K+R={cfg.K + cfg.R}")
        nodes = [int(n) for n in rng.permutation(nodes)]
        query = nodes[: cfg.R]
        rest = nodes[cfg.R :]
        return (rest if n_support is None else rest[:n_support]), query

    def make(classes: list[int], n_support: int | None) -> TaskSpec:
        support, query = {}, {}
        for c in classes:
            support[c], query[c] = split(c, n_support)
        return TaskSpec(classes, support, query)

    base = make(order[: cfg.base_class_count], None)
    novel = []
    for t in range(n_novel):
        lo = cfg.base_class_count + t * cfg.N
        novel.append(make(order[lo : lo + cfg.N], cfg.K))
    return TaskStream(base, novel, cfg.N, cfg.K, cfg.R)


def sample_meta_episode(base: TaskSpec, cfg: SplitConfig, rng: np.random.Generator) -> MetaEpisode:
    """Shuffle the base classes into ceil(|Y0|/N) ordered pseudo-tasks.

    Only base *support* nodes are used; the base query set is reserved for
    evaluation. A short final chunk keeps the partition exact.
    """
    classes = list(base.classes)
    if cfg.N > len(classes):
        raise ValueError(f"N={cfg.N} is larger than the {len(classes)} base classes")
    order = [classes[i] for i in rng.permutation(len(classes))]
    p = math.ceil(len(order) / cfg.N)
    seq = []
    for i in range(p):
        chunk = order[i * cfg.N : (i + 1) * cfg.N]
        support, query = {}, {}
        for c in chunk:
            pool = base.support[c]
            if len(pool) < cfg.K + 1:
                raise ValueError(f"base class {c} has too few support nodes for a meta episode")
            perm = [pool[j] for j in rng.permutation(len(pool))]
            n_query = min(cfg.R, cfg.meta_query_cap, len(pool) - cfg.K)
            support[c] = perm[: cfg.K]
            query[c] = perm[cfg.K : cfg.K + n_query]
        seq.append(PseudoTask(chunk, support, query))
    return MetaEpisode(seq)
