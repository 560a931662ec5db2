"""Three-layer GCN (nfeat -> 32 -> 16 -> nclass) as a function of a ParamSet."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import DiffValue
from .graphdata import GraphDataset, normalize_adjacency
from .io_utils import write_text_atomic

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
DEFAULT_HIDDEN = (32, 16)
CHECKPOINT_FORMAT = "mega-params/1"


class ParamSet:
    """Ordered, named model parameters (W1, b1, W2, b2, W3, b3)."""

    def __init__(self, tensors: dict[str, DiffValue]):
        if tuple(tensors) != PARAM_NAMES:
            raise ValueError(f"expected parameters {PARAM_NAMES}, got {tuple(tensors)}")
        self._t = dict(tensors)

    def __getitem__(self, name: str) -> DiffValue:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def values(self) -> list[DiffValue]:
        return list(self._t.values())

    def items(self):
        return self._t.items()

    @property
    def widths(self) -> tuple[int, int, int, int]:
        w1, w2, w3 = self["W1"].shape, self["W2"].shape, self["W3"].shape
        return (w1[0], w1[1], w2[1], w3[1])

    @property
    def num_classes(self) -> int:
        return self["W3"].shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._t.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamSet":
        return cls({k: ad.parameter(arrays[k], name=k) for k in PARAM_NAMES})

    @classmethod
    def from_values(cls, values) -> "ParamSet":
        return cls(dict(zip(PARAM_NAMES, values)))

    def copy(self) -> "ParamSet":
        """Independent parameter leaves with equal payloads."""
        return ParamSet.from_arrays(self.arrays())

    def detached(self) -> "ParamSet":
        return ParamSet({k: ad.detach(v) for k, v in self._t.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.data.ravel() for v in self._t.values()])

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for k, v in self._t.items():
            out[k] = np.asarray(vec[pos : pos + v.data.size]).reshape(v.shape).copy()
            pos += v.data.size
        return out

    @property
    def size(self) -> int:
        return sum(v.data.size for v in self._t.values())

    def equal(self, other: "ParamSet") -> bool:
        return all(np.array_equal(self[k].data, other[k].data) for k in PARAM_NAMES)


@dataclass(eq=False)
class GraphInputs:
    """What a forward pass sees: normalized adjacency, features, labels."""

    adj: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    normalization: str = "sym"
    x: DiffValue = field(init=False, repr=False)

    def __post_init__(self):
        self.x = ad.constant(self.features)

    @classmethod
    def from_dataset(cls, ds: GraphDataset, normalization: str = "sym") -> "GraphInputs":
        adj = normalize_adjacency(ds.edges, ds.num_nodes, normalization)
        return cls(adj, ds.features, ds.labels, ds.num_classes, normalization)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    def restricted(self, nodes) -> "GraphInputs":
        """Induced subgraph on ``nodes``; edges leaving the set are dropped.

        Node indices are kept (rows outside the set are isolated), so index
        lists stay valid under this view.
        """
        keep = np.zeros(self.num_nodes, dtype=bool)
        keep[np.asarray(nodes, dtype=np.int64)] = True
        coo = self.adj.tocoo()
        # recover the binary adjacency from the off-diagonal pattern
        off = (coo.row != coo.col) & keep[coo.row] & keep[coo.col]
        edges = np.stack([coo.row[off], coo.col[off]], axis=1)
        adj = normalize_adjacency(edges, self.num_nodes, self.normalization)
        return GraphInputs(adj, self.features, self.labels, self.num_classes, self.normalization)


@dataclass
class Train:
    """Training-mode forward: dropout masks drawn from ``rng``."""

    rng: np.random.Generator
    rate: float = 0.5


def init_params(nfeat: int, nclass: int, seed: int, hidden: tuple[int, int] = DEFAULT_HIDDEN) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    if nfeat < 1 or nclass < 1:
        raise ValueError("nfeat and nclass must be positive")
    rng = np.random.default_rng(seed)
    dims = (nfeat, *hidden, nclass)
    arrays = {}
    for layer in range(3):
        fan_in, fan_out = dims[layer], dims[layer + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"W{layer + 1}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"b{layer + 1}"] = np.zeros(fan_out)
    return ParamSet.from_arrays(arrays)


def gcn_forward(params: ParamSet, adj: sp.csr_matrix, features, mode: Train | None = None) -> DiffValue:
    """Per-node logits; ``mode=None`` is evaluation (no dropout)."""
    x = features if isinstance(features, DiffValue) else ad.constant(features)
    if x.shape[1] != params["W1"].shape[0]:
        raise ValueError(f"feature width {x.shape[1]} does not match W1 {params['W1'].shape}")
    if adj.shape[0] != x.shape[0]:
        raise ValueError(f"adjacency {adj.shape} does not match {x.shape[0]} nodes")

    h = ad.relu(ad.add_rowvec(ad.spmm(adj, ad.matmul(x, params["W1"])), params["b1"]))
    if mode is not None and mode.rate > 0:
        h = ad.dropout(h, ad.dropout_mask(h.shape, mode.rate, mode.rng))
    h = ad.relu(ad.add_rowvec(ad.spmm(adj, ad.matmul(h, params["W2"])), params["b2"]))
    if mode is not None and mode.rate > 0:
        h = ad.dropout(h, ad.dropout_mask(h.shape, mode.rate, mode.rng))
    return ad.add_rowvec(ad.spmm(adj, ad.matmul(h, params["W3"])), params["b3"])


def forward(params: ParamSet, graph: GraphInputs, mode: Train | None = None) -> DiffValue:
    return gcn_forward(params, graph.adj, graph.x, mode)


def save_params(params: ParamSet, path) -> Path:
    """JSON checkpoint; Python float repr round-trips float64 exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "tensors": [
            {"name": k, "shape": list(v.shape), "data": [float(x) for x in v.data.ravel()]}
            for k, v in params.items()
        ],
    }
    return write_text_atomic(path, json.dumps(doc) + "\n")


def load_params(path) -> ParamSet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {doc.get('format')!r}")
    arrays = {t["name"]: np.array(t["data"], dtype=np.float64).reshape(t["shape"]) for t in doc["tensors"]}
    return ParamSet.from_arrays(arrays)
