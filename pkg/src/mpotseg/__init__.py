"""Multi-prompt optimal-transport segmentation on a synthetic vision-language world.

Modules
    ot          entropic (Sinkhorn) and exact transport solvers, assignment baseline
    alignment   score matrices, transport refinement, layer fusion, prediction
    synthetic   deterministic toy world with frozen encoders
    training    losses, AdamW and the two-phase transductive loop
    metrics     mIoU / hIoU / pAcc and prompt diagnostics
    config, io  experiment configuration and on-disk formats
    cli         ``python -m mpotseg`` experiment runner
"""

from .alignment import Model, PipelineConfig, forward
from .config import ExperimentConfig, load_config, parse_config
from .ot import SinkhornConfig, exact_ot_oracle, hungarian_assignment, sinkhorn_plan
from .synthetic import World, WorldConfig
from .training import LossWeights, Schedule, fit

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "LossWeights",
    "Model",
    "PipelineConfig",
    "Schedule",
    "SinkhornConfig",
    "World",
    "WorldConfig",
    "exact_ot_oracle",
    "fit",
    "forward",
    "hungarian_assignment",
    "load_config",
    "parse_config",
    "sinkhorn_plan",
]
