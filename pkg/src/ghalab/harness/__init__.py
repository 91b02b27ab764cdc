"""Run configuration, tasks, training, sweeps and the command line."""

from .config import RunConfig, build_config, dump_config, load_config
from .tasks import TaskData, build_task
from .train import NonFiniteLoss, RunState, StageError, Trainer, evaluate, finetune, probe_compactness, train

__all__ = [
    "RunConfig", "build_config", "dump_config", "load_config", "TaskData", "build_task",
    "NonFiniteLoss", "RunState", "StageError", "Trainer", "evaluate", "finetune",
    "probe_compactness", "train",
]
