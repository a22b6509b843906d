"""The scheduling problem as an MDP.

States concatenate normalized task features with normalized server-set
features; actions pick a server for the current task; rewards are the
negated per-task weighted cost, or a fixed penalty when the chosen server
cannot host the task.

The per-step cost charges each edge's transmission energy when the receiving
task is placed (at which point both endpoints are known); application-level
accounting in :mod:`dagsched.costmodel` charges it to the sender. Both views
sum to the same total energy over a completed application.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import costmodel
from .costmodel import Assignment, CostBounds, EnvironmentSpec, Tier
from .errors import ValidationError
from .workload import AppDag, TaskSpec, WorkloadTrace, validate_and_order

#: Reward for a task that cannot run on the chosen server. Strictly below the
#: [-1, 0] range of successful steps.
FAILURE_PENALTY = -2.0

TASK_FEATURE_COUNT = 8
SERVER_FEATURE_COUNT = 10


def state_dim(env: EnvironmentSpec) -> int:
    return TASK_FEATURE_COUNT + 1 + SERVER_FEATURE_COUNT * env.size


@dataclass(frozen=True)
class DagFeatures:
    """Per-application feature context reused across encode calls."""

    order: tuple[int, ...]
    cycles_lo: float
    cycles_hi: float
    in_data: dict[int, float]
    in_data_hi: float
    static_cp: frozenset[int]

    @classmethod
    def build(cls, dag: AppDag) -> "DagFeatures":
        order = validate_and_order(dag)
        cycles = [t.cycles for t in dag.tasks]
        in_data = {
            t.id: sum(size for _, size in dag.in_edges(t.id)) for t in dag.tasks
        }
        # Cycle-weighted longest path through the bare graph; a static
        # structural hint, independent of any placement.
        suffix: dict[int, float] = {}
        for tid in reversed(order):
            succs = dag.successors(tid)
            suffix[tid] = dag.task(tid).cycles + max((suffix[s] for s in succs), default=0.0)
        start = min(dag.sources(), key=lambda t: (-suffix[t], t))
        path = [start]
        while dag.successors(path[-1]):
            path.append(min(dag.successors(path[-1]), key=lambda s: (-suffix[s], s)))
        return cls(
            order=tuple(order),
            cycles_lo=min(cycles),
            cycles_hi=max(cycles),
            in_data=in_data,
            in_data_hi=max(in_data.values()) if in_data else 0.0,
            static_cp=frozenset(path),
        )


def _ratio(value: float, hi: float) -> float:
    return 0.0 if hi <= 0 else min(1.0, max(0.0, value / hi))


def _minmax(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    return min(1.0, max(0.0, (value - lo) / (hi - lo)))


def encode_state(task: TaskSpec, dag: AppDag, env: EnvironmentSpec,
                 headroom: np.ndarray,
                 features: DagFeatures | None = None) -> np.ndarray:
    """Fixed-width normalized state vector for (task, environment, headroom).

    Every entry lies in [0, 1]. Width is constant for a given environment.
    """
    f = features if features is not None else DagFeatures.build(dag)
    n_tasks = len(dag.tasks)
    denom = max(1, n_tasks - 1)
    preds = dag.predecessors(task.id)
    pred_on_cp = (
        sum(1 for p in preds if p in f.static_cp) / len(preds) if preds else 0.0
    )

    task_part = np.array([
        task.id / denom,
        task.app_id / (task.app_id + 1.0),
        len(preds) / denom,
        len(dag.successors(task.id)) / denom,
        _minmax(task.cycles, f.cycles_lo, f.cycles_hi),
        _ratio(task.ram_demand, max(s.ram_gb for s in env.servers)),
        _minmax(f.in_data.get(task.id, 0.0), 0.0, f.in_data_hi),
        pred_on_cp,
    ])

    servers = env.servers
    max_freq = max(s.freq_mhz for s in servers)
    max_ram = max(s.ram_gb for s in servers)
    max_wex = max(s.exec_power_w for s in servers)
    max_wtr = max(s.tx_power_w for s in servers)
    clp = [s.cloud_price_per_hour or 0.0 for s in servers]
    ep = [s.electricity_price_per_kwh or 0.0 for s in servers]
    max_clp, max_ep = max(clp), max(ep)

    n = env.size
    prop = env.links.propagation_ms
    bw = env.links.bandwidth_bytes_per_s
    if n > 1:
        off = ~np.eye(n, dtype=bool)
        max_prop = float(prop[off].max())
        max_bw = float(bw[off].max())
        # Outgoing means, diagonal excluded (intra-server links are unused).
        mean_prop = (prop.sum(axis=1) - np.diag(prop)) / (n - 1)
        mean_bw = (bw.sum(axis=1) - np.diag(bw)) / (n - 1)
    else:
        max_prop = max_bw = 0.0
        mean_prop = np.zeros(1)
        mean_bw = np.zeros(1)

    server_part = [1.0 / n]
    for s in servers:
        server_part.extend([
            s.freq_mhz / max_freq,
            s.ram_gb / max_ram,
            1.0 if s.tier == Tier.CLOUD else 0.0,
            _ratio(clp[s.id], max_clp),
            _ratio(ep[s.id], max_ep),
            s.exec_power_w / max_wex,
            s.tx_power_w / max_wtr,
            _ratio(float(mean_prop[s.id]), max_prop),
            _ratio(float(mean_bw[s.id]), max_bw),
            _ratio(float(headroom[s.id]), s.ram_gb),
        ])
    return np.concatenate([task_part, np.asarray(server_part)])


def feasible_mask(task: TaskSpec, env: EnvironmentSpec,
                  headroom: np.ndarray) -> np.ndarray:
    """Boolean vector: server k can host the task iff its remaining RAM
    covers the demand."""
    return np.asarray(headroom, float) >= task.ram_demand


def reward(step_cost: float | None) -> float:
    """Negative weighted step cost on success, the fixed penalty on failure
    (``step_cost is None``)."""
    if step_cost is None:
        return FAILURE_PENALTY
    return -step_cost


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    behavior_prob: float
    next_state: np.ndarray
    priority: float
    mask: np.ndarray
    app_boundary: bool = False

    def __post_init__(self):
        if not (0.0 < self.behavior_prob <= 1.0):
            raise ValidationError(f"behavior_prob must be in (0, 1], got {self.behavior_prob}")
        if self.priority <= 0:
            raise ValidationError("transition priority must be positive")


@dataclass
class Trajectory:
    transitions: list[Transition]
    behavior_version: int

    def __post_init__(self):
        for a, b in zip(self.transitions, self.transitions[1:]):
            if not np.array_equal(a.next_state, b.state):
                raise ValidationError("adjacent transitions disagree on the shared state")

    def __len__(self):
        return len(self.transitions)

    def states(self) -> np.ndarray:
        """(n+1, D): every transition state plus the final next_state."""
        rows = [t.state for t in self.transitions]
        rows.append(self.transitions[-1].next_state)
        return np.stack(rows)

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.transitions], dtype=np.int64)

    def behavior_probs(self) -> np.ndarray:
        return np.array([t.behavior_prob for t in self.transitions])

    def priorities(self) -> np.ndarray:
        return np.array([t.priority for t in self.transitions])

    def masks(self) -> np.ndarray:
        return np.stack([t.mask for t in self.transitions])


@dataclass
class CompletedApp:
    """A fully stepped-through application and what happened to it."""

    dag: AppDag
    assignment: Assignment
    failed_tasks: list[int]

    @property
    def fully_assigned(self) -> bool:
        return not self.failed_tasks


class SchedulingEnv:
    """Steps through a workload one task at a time, in topological order.

    RAM headroom is tracked per application and released when the
    application finishes. When the workload is exhausted it wraps around,
    so the environment produces an endless task stream; the transition that
    crosses into a new application carries ``app_boundary=True``.
    """

    def __init__(self, env: EnvironmentSpec, workload: WorkloadTrace,
                 cp_gated_reward: bool = False):
        self.env = env
        self.workload = workload
        self.cp_gated_reward = cp_gated_reward
        self._features = [DagFeatures.build(dag) for dag in workload.apps]
        self._step_bounds: list[dict[int, CostBounds]] = [
            {t.id: step_bounds(t, dag, env) for t in dag.tasks}
            for dag in workload.apps
        ]
        self._completed: list[CompletedApp] = []
        self._app_idx = 0
        self.reset()

    # -- lifecycle ---------------------------------------------------------

    def reset(self, app_idx: int = 0) -> np.ndarray:
        self._app_idx = app_idx % len(self.workload.apps)
        self._begin_app()
        return self.current_state()

    def _begin_app(self):
        self.dag = self.workload.apps[self._app_idx]
        self.features = self._features[self._app_idx]
        self.order = list(self.features.order)
        self.pos = 0
        self.headroom = np.array([s.ram_gb for s in self.env.servers])
        self.assignment: dict[int, int] = {}
        self.failed: list[int] = []
        self.cum_time: dict[int, float] = {}

    # -- views -------------------------------------------------------------

    def current_task(self) -> TaskSpec:
        return self.dag.task(self.order[self.pos])

    def current_state(self) -> np.ndarray:
        return encode_state(self.current_task(), self.dag, self.env,
                            self.headroom, self.features)

    def current_mask(self) -> np.ndarray:
        return feasible_mask(self.current_task(), self.env, self.headroom)

    def pop_completed(self) -> list[CompletedApp]:
        done, self._completed = self._completed, []
        return done

    # -- stepping ----------------------------------------------------------

    def step(self, action: int) -> tuple[float, np.ndarray, dict]:
        """Apply ``action`` to the current task; returns (reward, next_state,
        info). The env never raises on infeasible actions: the task is marked
        failed, the penalty reward is emitted, and the stream continues."""
        task = self.current_task()
        info: dict = {"task_id": task.id, "app_id": self.dag.app_id, "failed": False}

        if not self.current_mask()[action]:
            self.failed.append(task.id)
            r = reward(None)
            info["failed"] = True
        else:
            self.assignment[task.id] = int(action)
            self.headroom[action] -= task.ram_demand
            cost, cum = self._step_cost(task, int(action))
            self.cum_time[task.id] = cum
            r = reward(cost)
            info["step_cost"] = cost

        boundary = self._advance()
        info["app_boundary"] = boundary
        return r, self.current_state(), info

    def _advance(self) -> bool:
        self.pos += 1
        if self.pos < len(self.order):
            return False
        self._completed.append(
            CompletedApp(
                dag=self.dag,
                assignment=Assignment(dict(self.assignment)),
                failed_tasks=list(self.failed),
            )
        )
        self._app_idx = (self._app_idx + 1) % len(self.workload.apps)
        self._begin_app()
        return True

    # -- step cost ---------------------------------------------------------

    def _step_cost(self, task: TaskSpec, sid: int) -> tuple[float, float]:
        bounds = self._step_bounds[self._app_idx][task.id]
        cost, cum, t_term = receiver_step_cost(
            self.env, self.dag, task, sid, self.assignment, self.cum_time, bounds)
        if self.cp_gated_reward:
            # Count response time only while the task extends the longest
            # realized path of the partially placed application.
            on_cp = cum >= max(self.cum_time.values(), default=0.0)
            if not on_cp:
                w1, _, _ = self.env.weights.normalized()
                cost -= w1 * t_term
        return cost, cum


def receiver_step_cost(env: EnvironmentSpec, dag: AppDag, task: TaskSpec,
                       sid: int, assignment: dict[int, int],
                       cum_time: dict[int, float],
                       bounds: CostBounds) -> tuple[float, float, float]:
    """Per-task weighted cost with receiver-side energy attribution.

    Returns (weighted cost in [0, 1], cumulative response time, normalized
    response-time term). Predecessors missing from ``assignment`` (failed
    tasks) contribute nothing: their data never arrives, so neither a
    transfer delay nor a transfer energy is known.
    """
    server = env.server(sid)

    t_dat = 0.0
    e_in = 0.0
    cum_base = 0.0
    for pred, size in dag.in_edges(task.id):
        psid = assignment.get(pred)
        if psid is None:
            continue
        t_dat = max(t_dat, costmodel.transfer_seconds(env, psid, sid, size))
        cum_base = max(cum_base, cum_time.get(pred, 0.0))
        if psid != sid:
            bw = float(env.links.bandwidth_bytes_per_s[psid, sid])
            e_in += (size / bw) * env.server(psid).tx_power_w
    t_ex = costmodel.execution_seconds(task, server)
    t = t_dat + t_ex
    cum = cum_base + t

    e = t_ex * server.exec_power_w + e_in
    f = costmodel.monetary_cost(server, t, e)

    w1, w2, w3 = env.weights.normalized()
    t_term = costmodel.normalize(t, bounds.t_min, bounds.t_max)
    cost = (w1 * t_term
            + w2 * costmodel.normalize(e, bounds.e_min, bounds.e_max)
            + w3 * costmodel.normalize(f, bounds.f_min, bounds.f_max))
    return cost, cum, t_term


def step_bounds(task: TaskSpec, dag: AppDag, env: EnvironmentSpec) -> CostBounds:
    """Extremal bounds for the receiver-attributed step cost.

    Mirrors :func:`costmodel.task_bounds` but orients the energy transfer
    term around inbound edges, matching how the step cost charges them.
    """
    if env.weights.bounds_override is not None:
        return env.weights.bounds_override

    min_bw, max_prop = costmodel._link_extremes(env)
    in_edges = dag.in_edges(task.id)
    in_total = sum(size for _, size in in_edges)
    max_in = max((size for _, size in in_edges), default=0.0)
    has_links = bool(in_edges) and math.isfinite(min_bw)

    worst_dat = (max_in / min_bw + max_prop) if has_links else 0.0
    t_ex = [costmodel.execution_seconds(task, s) for s in env.servers]
    t_lo, t_hi = min(t_ex), max(t_ex) + worst_dat

    e_ex = [costmodel.execution_seconds(task, s) * s.exec_power_w for s in env.servers]
    max_wtr = max(s.tx_power_w for s in env.servers)
    worst_ein = (in_total / min_bw) * max_wtr if has_links else 0.0
    e_lo, e_hi = min(e_ex), max(e_ex) + worst_ein

    f_lo, f_hi = math.inf, 0.0
    for s in env.servers:
        ex = costmodel.execution_seconds(task, s)
        if s.tier == Tier.CLOUD:
            f_lo = min(f_lo, costmodel.monetary_cost(s, ex, 0.0))
            f_hi = max(f_hi, costmodel.monetary_cost(s, ex + worst_dat, 0.0))
        else:
            lo_e = ex * s.exec_power_w
            f_lo = min(f_lo, costmodel.monetary_cost(s, 0.0, lo_e))
            f_hi = max(f_hi, costmodel.monetary_cost(s, 0.0, lo_e + worst_ein))
    return CostBounds(t_lo, t_hi, e_lo, e_hi, f_lo, f_hi)
