"""Single-instance replay store: at most one node per class."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

META_EPOCH = "meta_epoch"
INCREMENTAL = "incremental"


@dataclass
class ReplayBuffer:
    scope: str = INCREMENTAL
    entries: dict[int, tuple[int, int]] = field(default_factory=dict)  # class -> (node, label)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, cls: int) -> bool:
        return cls in self.entries

    @property
    def classes(self) -> list[int]:
        return list(self.entries)

    def nodes(self) -> np.ndarray:
        return np.array([n for n, _ in self.entries.values()], dtype=np.int64)

    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.entries.values()], dtype=np.int64)

    def clear(self) -> None:
        self.entries.clear()

    def copy(self) -> "ReplayBuffer":
        return ReplayBuffer(self.scope, dict(self.entries))

    def to_json(self) -> dict:
        return {"scope": self.scope, "entries": {str(c): list(v) for c, v in self.entries.items()}}


def update_buffer(buffer: ReplayBuffer, classes, support: dict[int, list[int]], rng: np.random.Generator) -> ReplayBuffer:
    """Store one uniformly chosen support node for every class in ``classes``.

    Incremental-scope buffers refuse to overwrite a class they already hold;
    meta-epoch buffers re-sample.
    """
    for c in classes:
        pool = support[c]
        if len(pool) == 0:
            raise ValueError(f"class {c} has an empty support set")
        if c in buffer.entries and buffer.scope == INCREMENTAL:
            raise ValueError(f"class {c} is already buffered")
        node = pool[int(rng.integers(len(pool)))] if len(pool) > 1 else pool[0]
        buffer.entries[int(c)] = (int(node), int(c))
    return buffer
