"""Instruction-aware dual-stream visual token compression."""

from dualcomp.fusion import CompressedSequence, FusedToken
from dualcomp.grid import FeatureGrid, InvalidInputError
from dualcomp.pipeline import VARIANTS, PipelineResult, RunConfig, compress
from dualcomp.router import RouterModel, TaskPolicy, TokenBudget, allocate_budget

__all__ = [
    "VARIANTS",
    "CompressedSequence",
    "FeatureGrid",
    "FusedToken",
    "InvalidInputError",
    "PipelineResult",
    "RouterModel",
    "RunConfig",
    "TaskPolicy",
    "TokenBudget",
    "allocate_budget",
    "compress",
]
