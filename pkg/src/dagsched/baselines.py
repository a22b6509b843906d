"""Reference schedulers: random, per-task greedy, and the exhaustive oracle.

The oracle enumerates every feasible placement and therefore refuses
instances beyond 6 tasks or 5 servers.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from .costmodel import Assignment, CostBreakdown, EnvironmentSpec, app_costs
from .errors import SizeLimitError, ValidationError
from .mdp import feasible_mask, receiver_step_cost, step_bounds
from .workload import AppDag, validate_and_order

ORACLE_MAX_TASKS = 6
ORACLE_MAX_SERVERS = 5

BASELINE_KINDS = ("random", "greedy", "oracle")


def baseline_schedule(kind: str, dag: AppDag, env: EnvironmentSpec,
                      seed: int = 0) -> tuple[Assignment, CostBreakdown]:
    """Schedule one application with the named baseline and price the result."""
    if kind == "random":
        assignment = random_assignment(dag, env, seed)
    elif kind == "greedy":
        assignment = greedy_assignment(dag, env)
    elif kind == "oracle":
        assignment, _ = oracle_assignment(dag, env)
    else:
        raise ValidationError(f"unknown baseline {kind!r}; choose from {BASELINE_KINDS}")
    return assignment, app_costs(dag, assignment, env)


def random_assignment(dag: AppDag, env: EnvironmentSpec, seed: int) -> Assignment:
    """Uniform choice among RAM-feasible servers, task by task."""
    rng = np.random.default_rng(seed)
    headroom = np.array([s.ram_gb for s in env.servers])
    mapping: dict[int, int] = {}
    for tid in validate_and_order(dag):
        task = dag.task(tid)
        options = np.flatnonzero(feasible_mask(task, env, headroom))
        if options.size == 0:
            raise ValidationError(f"no feasible server for task {tid}")
        sid = int(rng.choice(options))
        mapping[tid] = sid
        headroom[sid] -= task.ram_demand
    return Assignment(mapping)


def greedy_assignment(dag: AppDag, env: EnvironmentSpec) -> Assignment:
    """Tasks in topological order, each on the feasible server with the
    lowest immediate weighted step cost. Ties go to the lower server id."""
    headroom = np.array([s.ram_gb for s in env.servers])
    mapping: dict[int, int] = {}
    cum_time: dict[int, float] = {}
    for tid in validate_and_order(dag):
        task = dag.task(tid)
        bounds = step_bounds(task, dag, env)
        best_sid, best_cost, best_cum = None, None, None
        for sid in range(env.size):
            if headroom[sid] < task.ram_demand:
                continue
            cost, cum, _ = receiver_step_cost(env, dag, task, sid, mapping,
                                              cum_time, bounds)
            if best_cost is None or cost < best_cost:
                best_sid, best_cost, best_cum = sid, cost, cum
        if best_sid is None:
            raise ValidationError(f"no feasible server for task {tid}")
        mapping[tid] = best_sid
        cum_time[tid] = best_cum
        headroom[best_sid] -= task.ram_demand
    return Assignment(mapping)


def oracle_assignment(dag: AppDag, env: EnvironmentSpec) -> tuple[Assignment, float]:
    """Global minimum application-level weighted cost over all feasible
    placements, found by exhaustive enumeration in lexicographic order (so
    ties resolve deterministically to the first minimum)."""
    n_tasks, n_servers = len(dag.tasks), env.size
    if n_tasks > ORACLE_MAX_TASKS or n_servers > ORACLE_MAX_SERVERS:
        raise SizeLimitError(
            f"oracle enumeration is limited to {ORACLE_MAX_TASKS} tasks and "
            f"{ORACLE_MAX_SERVERS} servers; got {n_tasks} tasks, {n_servers} servers"
        )
    task_ids = [t.id for t in dag.tasks]
    ram = {t.id: t.ram_demand for t in dag.tasks}
    caps = [s.ram_gb for s in env.servers]

    best_mapping, best_cost = None, None
    for combo in product(range(n_servers), repeat=n_tasks):
        load = [0.0] * n_servers
        ok = True
        for tid, sid in zip(task_ids, combo):
            load[sid] += ram[tid]
            if load[sid] > caps[sid]:
                ok = False
                break
        if not ok:
            continue
        mapping = dict(zip(task_ids, combo))
        cost = app_costs(dag, Assignment(mapping), env).weighted
        if best_cost is None or cost < best_cost:
            best_mapping, best_cost = mapping, cost
    if best_mapping is None:
        raise ValidationError("no feasible assignment exists for this instance")
    return Assignment(best_mapping), best_cost
