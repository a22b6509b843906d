"""Edge/cloud DAG scheduling simulator with a distributed actor-learner RL
scheduler."""

from .costmodel import (
    Assignment,
    CostBounds,
    CostBreakdown,
    CostWeights,
    EnvironmentSpec,
    LinkMatrix,
    ServerSpec,
    Tier,
    app_costs,
    check_constraints,
    critical_path,
    load_environment,
    save_environment,
    task_costs,
)
from .errors import DagschedError
from .mdp import SchedulingEnv, Trajectory, Transition, encode_state, feasible_mask, reward
from .network import NetworkConfig, ParameterSet, init_params, load_checkpoint, save_checkpoint
from .replay import PERConfig, PrioritizedBuffer
from .runtime import TrainingConfig, run_training
from .vtrace import VTraceConfig, vtrace
from .workload import (
    AppDag,
    GeneratorParams,
    TaskSpec,
    WorkloadTrace,
    generate_dag,
    load_workload,
    preset_workload,
    save_workload,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
