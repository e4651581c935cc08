"""Continual semantic segmentation toolkit."""

from .config import RunConfig, make_config
from .metrics import RunReport, StepMetrics
from .protocol import (
    BACKGROUND_ID,
    IGNORE_ID,
    SegSample,
    StepView,
    TaskSequence,
    build_task_sequence,
    generate_synthetic_dataset,
    load_dataset,
    make_eval_view,
    make_step_view,
)
from .trainer import run_continual

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND_ID",
    "IGNORE_ID",
    "RunConfig",
    "RunReport",
    "SegSample",
    "StepMetrics",
    "StepView",
    "TaskSequence",
    "build_task_sequence",
    "generate_synthetic_dataset",
    "load_dataset",
    "make_config",
    "make_eval_view",
    "make_step_view",
    "run_continual",
    "__version__",
]
