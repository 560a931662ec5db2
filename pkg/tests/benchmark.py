"""Synthetic forgetting benchmark shared by the acceptance criteria.

12 classes x 80 nodes, 6 base classes, 2-way 3-shot 20-query novel tasks.
Dataset knobs were fixed once after a calibration run and then frozen.
"""

import time
from functools import lru_cache

import numpy as np

from mega import autodiff as ad
from mega import losses
from mega.episodes import SplitConfig, build_task_stream
from mega.graphdata import SbmConfig, generate_sbm
from mega.model import GraphInputs
from mega.trainer import TrainConfig, run_experiment

SEEDS = (0, 1, 2, 3, 4)
SBM = dict(classes=12, nodes_per_class=80, feature_dim=500, feature_noise=1.0)
SPLIT = dict(N=2, K=3, R=20, base_class_count=6)
TRAIN = dict(meta_epochs=60, inc_finetune_steps=30)

# comparison of meta-learning techniques, all with KD+SIR in the incremental stage
META_VARIANTS = {
    "FineTune": dict(use_mctf=False, use_kd=False, use_sir=False),
    "MAML": dict(meta_method="maml"),
    "MAML+CL": dict(meta_gcl=False),
    "MEGA": dict(),
}

# (MCTF, SIR, KD) ablation grid
ABLATION = {
    "Baseline": (False, False, False),
    "a": (True, False, False),
    "b": (False, True, False),
    "c": (False, False, True),
    "d": (True, True, False),
    "e": (True, False, True),
    "f": (False, True, True),
    "g": (True, True, True),
}


def ablation_overrides(name):
    mctf, sir, kd = ABLATION[name]
    return dict(use_mctf=mctf, use_sir=sir, use_kd=kd)


@lru_cache(maxsize=None)
def _problem(seed):
    ds = generate_sbm(SbmConfig(**SBM, seed=seed))
    split = SplitConfig(**SPLIT, seed=seed)
    return GraphInputs.from_dataset(ds), build_task_stream(ds, split), split


@lru_cache(maxsize=None)
def run_variant(overrides: tuple) -> dict:
    """Run one variant on every seed; cached on the sorted override items."""
    ad.reset_stats()
    losses.counters.clear()
    start = time.perf_counter()
    reports = []
    for seed in SEEDS:
        graph, stream, split = _problem(seed)
        cfg = TrainConfig(seed=seed, **{**TRAIN, **dict(overrides)})
        reports.append(run_experiment(graph, stream, split, cfg))
    overall = np.array([r.accuracy.overall for r in reports])
    return {
        "overall": overall.mean(axis=0),
        "final": float(overall[:, -1].mean()),
        "final_sd": float(overall[:, -1].std()),
        "base_first": float(np.mean([r.accuracy.rows[0].per_task[0] for r in reports])),
        "base_last": float(np.mean([r.accuracy.rows[-1].per_task[0] for r in reports])),
        "kd_calls": losses.counters["kd"],
        "sir_calls": losses.counters["sir"],
        "higher_order_calls": ad.stats["higher_order_calls"],
        "seconds": time.perf_counter() - start,
    }


def key(overrides: dict) -> tuple:
    # canonical form so equal configurations share one cached run
    full = {"use_mctf": True, "use_kd": True, "use_sir": True, "meta_method": "mctf", "meta_gcl": True,
            **overrides}
    return tuple(sorted(full.items()))
