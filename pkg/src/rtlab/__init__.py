"""Desk-scale laboratory for teacher-student learning dynamics.

Modules:
    tensor      reverse-mode autodiff on dense f64 arrays
    params      flat parameter vectors with named segments
    models      encoder + L2-bottleneck projector family
    data        synthetic datasets, binary ingestion, augmentation
    distill     random-teacher distillation training loop
    probing     linear/KNN probes on frozen features
    landscape   loss-surface planes, grids, path barriers
    supervised  SGD classification, iterative magnitude pruning, LMC
    checkpoint  binary checkpoint files
    config      flat key=value experiment configs
    cli         experiment subcommands
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    checkpoint,
    config,
    data,
    distill,
    landscape,
    models,
    params,
    probing,
    supervised,
    tensor,
)
from .errors import RtlabError  # noqa: F401
