"""Graph datasets: validation, on-disk format, adjacency normalization, SBM generator."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .io_utils import atomic_dir

__all__ = [
    "DatasetError",
    "GraphDataset",
    "SbmConfig",
    "canonical_edges",
    "normalize_adjacency",
    "load_dataset",
    "save_dataset",
    "generate_sbm",
]


class DatasetError(ValueError):
    pass


def canonical_edges(edges, num_nodes: int) -> np.ndarray:
    """Undirected edge list as unique (min, max) rows, self-loops dropped."""
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        bad = arr[(arr < 0).any(axis=1) | (arr >= num_nodes).any(axis=1)][0]
        raise DatasetError(f"edge endpoint out of range: ({bad[0]}, {bad[1]}) with {num_nodes} nodes")
    arr = np.sort(arr, axis=1)
    arr = arr[arr[:, 0] != arr[:, 1]]
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(arr, axis=0)


@dataclass(frozen=True, eq=False)
class GraphDataset:
    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DatasetError("features must be a 2-D array")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (feats.shape[0],):
            raise DatasetError(
                f"row-count mismatch: {feats.shape[0]} feature rows vs {labels.shape[0]} labels"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"label out of range [0, {self.num_classes})")
        missing = np.setdiff1d(np.arange(self.num_classes), labels)
        if missing.size:
            raise DatasetError(f"classes with no nodes: {missing.tolist()}")
        if not np.all(np.isfinite(feats)):
            raise DatasetError("non-finite feature values")
        edges = canonical_edges(self.edges, feats.shape[0])
        for name, val in (("features", feats), ("labels", labels), ("edges", edges)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def nodes_of_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def normalize_adjacency(edges, num_nodes: int, kind: str = "sym") -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 as CSR (``kind="row"`` gives D^-1 (A + I))."""
    e = canonical_edges(edges, num_nodes)
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(num_nodes)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(num_nodes)])
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(num_nodes, num_nodes))
    deg = np.asarray(a.sum(axis=1)).ravel()
    if kind == "sym":
        d = sp.diags(1.0 / np.sqrt(deg))
        out = d @ a @ d
    elif kind == "row":
        out = sp.diags(1.0 / deg) @ a
    else:
        raise ValueError(f"unknown normalization '{kind}'")
    out = out.tocsr()
    out.sort_indices()
    return out


def load_dataset(path) -> GraphDataset:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset not found: {root}")
    files = {name: root / name for name in ("meta.json", "features.csv", "labels.csv", "edges.csv")}
    for name, f in files.items():
        if not f.is_file():
            raise FileNotFoundError(f"missing dataset file: {f}")
    meta = json.loads(files["meta.json"].read_text(encoding="utf-8"))
    n, nf, nc = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])

    feats = np.loadtxt(files["features.csv"], delimiter=",", dtype=np.float64, ndmin=2, encoding="utf-8")
    if feats.size == 0:
        feats = feats.reshape(0, nf)
    if feats.shape != (n, nf):
        raise DatasetError(f"features.csv has shape {feats.shape}, meta says ({n}, {nf})")

    labels = []
    for lineno, line in enumerate(files["labels.csv"].read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                labels.append(int(line))
            except ValueError:
                raise DatasetError(f"labels.csv:{lineno}: not an integer: {line!r}") from None
    if len(labels) != n:
        raise DatasetError(f"row-count mismatch: {n} nodes vs {len(labels)} labels")

    edges = []
    for lineno, line in enumerate(files["edges.csv"].read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            u, v = (int(p) for p in parts)
        except ValueError:
            raise DatasetError(f"edges.csv:{lineno}: malformed edge line {line!r}") from None
        edges.append((u, v))
    return GraphDataset(feats, np.array(labels, dtype=np.int64), np.array(edges, dtype=np.int64).reshape(-1, 2), nc)


def save_dataset(ds: GraphDataset, path) -> Path:
    """Write the four-file directory format (atomically)."""
    root = Path(path)
    with atomic_dir(root) as tmp:
        meta = {"num_nodes": ds.num_nodes, "num_features": ds.num_features, "num_classes": ds.num_classes}
        (tmp / "meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
        with open(tmp / "features.csv", "w", encoding="utf-8") as fh:
            for row in ds.features:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
        (tmp / "labels.csv").write_text("".join(f"{int(y)}\n" for y in ds.labels), encoding="utf-8")
        (tmp / "edges.csv").write_text("".join(f"{u},{v}\n" for u, v in ds.edges), encoding="utf-8")
    return root


@dataclass
class SbmConfig:
    classes: int = 12
    nodes_per_class: int = 80
    intra_edge_prob: float = 0.1
    inter_edge_prob: float = 0.005
    feature_dim: int = 16
    feature_noise: float = 0.5
    feature_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 1 or self.nodes_per_class < 1:
            raise ValueError("SBM needs at least one class and one node per class")
        for name in ("intra_edge_prob", "inter_edge_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.classes > 1 and not self.intra_edge_prob > self.inter_edge_prob:
            raise ValueError("intra_edge_prob must exceed inter_edge_prob")
        if self.feature_dim < self.classes:
            raise ValueError("feature_dim must be at least the number of classes")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be non-negative")


def generate_sbm(cfg: SbmConfig) -> GraphDataset:
    """Planted-partition graph with noisy one-hot class-mean features."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.classes * cfg.nodes_per_class
    labels = np.repeat(np.arange(cfg.classes), cfg.nodes_per_class)

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, cfg.intra_edge_prob, cfg.inter_edge_prob)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    feats = np.zeros((n, cfg.feature_dim))
    feats[np.arange(n), labels] = cfg.feature_scale
    feats += rng.normal(0.0, cfg.feature_noise, size=feats.shape)
    return GraphDataset(feats, labels, edges, cfg.classes)
