"""Pipeline-parallel schedule synthesis: topology, schedule space, list scheduler, lowering, simulation, tuning."""

from .cssr import (
    ALLGATHER, BWD, FWD, GATHER, IGRAD, WGRAD, CSSR, CSSRError, DependencyCycleError, InstructionRegistry, Item,
    SchedAttr, build_cssr,
)
from .grid import ScheduleGrid
from .lowering import ActorProgram, Instruction, gradient_separation, insert_comm
from .scheduler import (
    CompTypePriority, DeadlockError, Scheduler, StagePriorities, StageTraversalPriority, run_schedule,
)
from .simulator import CostModel, Metrics, Timeline, ValidationReport, load_profile, simulate, simulate_grid, validate
from .topology import (
    ActorMesh, ModalityConfig, ModelConfig, Placement, Stage, StageGraph, TopologyError, mark_shared_stage,
    partition, place,
)
from .tuner import TunerConfig, TuneResult, enumerate_space, tune

__version__ = "0.1.0"

__all__ = [
    "ALLGATHER", "BWD", "FWD", "GATHER", "IGRAD", "WGRAD", "CSSR", "CSSRError", "DependencyCycleError",
    "InstructionRegistry", "Item", "SchedAttr", "build_cssr", "ScheduleGrid", "ActorProgram", "Instruction",
    "gradient_separation", "insert_comm", "CompTypePriority", "DeadlockError", "Scheduler", "StagePriorities",
    "StageTraversalPriority", "run_schedule", "CostModel", "Metrics", "Timeline", "ValidationReport",
    "load_profile", "simulate", "simulate_grid", "validate", "ActorMesh", "ModalityConfig", "ModelConfig",
    "Placement", "Stage", "StageGraph", "TopologyError", "mark_shared_stage", "partition", "place",
    "TunerConfig", "TuneResult", "enumerate_space", "tune",
]
