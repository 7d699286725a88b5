"""Data-free continual merging of fine-tuned checkpoints.

The main entry points are :func:`mergeforge.nuwa.merge_sequence` for the
null-space + low-rank method, :func:`mergeforge.methods.merge` for every rule
behind one interface, and the ``mergeforge`` command line tool.
"""
__version__ = "0.1.0"

from .checkpoint import Checkpoint, LayerSelector, TaskVector, compute_task_vector, load_checkpoint, save_checkpoint
from .errors import (CorruptFile, DivergenceError, FormatError, IncompatibleCheckpoints, InvalidConfig,
                     InvalidInput, MergeForgeError, NumericalError, UndefinedMetric)
from .methods import METHODS, BaselineParams, MethodParams, merge
from .nuwa import NuwaConfig, merge_sequence

__all__ = [
    "Checkpoint", "LayerSelector", "TaskVector", "compute_task_vector", "load_checkpoint", "save_checkpoint",
    "CorruptFile", "DivergenceError", "FormatError", "IncompatibleCheckpoints", "InvalidConfig", "InvalidInput",
    "MergeForgeError", "NumericalError", "UndefinedMetric",
    "METHODS", "BaselineParams", "MethodParams", "merge", "NuwaConfig", "merge_sequence",
]
