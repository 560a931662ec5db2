"""Meta-trained graph few-shot class-incremental node classification.

Core pieces: a small second-order-capable autodiff engine, a three-layer
GCN, the chained meta-training loop with distillation and single-instance
replay, and the support-only incremental evaluation protocol.
"""

from .autodiff import DiffValue, detach, gradient
from .episodes import SplitConfig, TaskStream, build_task_stream, sample_meta_episode
from .graphdata import GraphDataset, SbmConfig, generate_sbm, load_dataset, normalize_adjacency, save_dataset
from .model import GraphInputs, ParamSet, gcn_forward, init_params
from .trainer import TrainConfig, incremental_stage, meta_train, run_experiment

__version__ = "0.1.0"
