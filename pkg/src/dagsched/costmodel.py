"""Deterministic edge/cloud cost models for DAG applications.

Response time of a task splits into a data-arrival part (the slowest inbound
transfer from any predecessor, zero when co-located) and an execution part
(cycles over CPU frequency). Energy splits into execution energy and the
energy spent transmitting outputs to successors placed on other servers.
Monetary cost is hourly-priced response time on cloud servers and metered
electricity on edge servers. The three raw costs are min-max normalized
against analytic per-task bounds and combined into one weighted cost.

All times are seconds, energies joules, prices currency units. Frequencies
are average per-core MHz against cycle demands in Mcycles, so the 1e6 factor
cancels. Link propagation is milliseconds in configs, bandwidth bytes/second.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    ConstraintViolationError,
    PreconditionError,
    ValidationError,
)
from .workload import AppDag, TaskSpec, validate_and_order

JOULES_PER_KWH = 3.6e6
SECONDS_PER_HOUR = 3600.0


class Tier(str, Enum):
    EDGE = "edge"
    CLOUD = "cloud"


@dataclass(frozen=True)
class ServerSpec:
    """One server. Prices: cloud servers bill per hour of occupied response
    time, edge servers bill the electricity their energy draw costs."""

    id: int
    tier: Tier
    freq_mhz: float            # average per-core frequency
    ram_gb: float
    exec_power_w: float
    tx_power_w: float
    cloud_price_per_hour: float | None = None
    electricity_price_per_kwh: float | None = None

    def __post_init__(self):
        if self.freq_mhz <= 0 or self.ram_gb <= 0:
            raise ValidationError(f"server {self.id}: freq and ram must be > 0")
        if self.exec_power_w <= 0 or self.tx_power_w <= 0:
            raise ValidationError(f"server {self.id}: power draws must be > 0")
        if self.tier == Tier.CLOUD:
            if self.cloud_price_per_hour is None or self.cloud_price_per_hour <= 0:
                raise ValidationError(f"server {self.id}: cloud tier needs cloud_price_per_hour > 0")
            if self.electricity_price_per_kwh is not None:
                raise ValidationError(f"server {self.id}: cloud tier must not set electricity price")
        else:
            if self.electricity_price_per_kwh is None or self.electricity_price_per_kwh <= 0:
                raise ValidationError(f"server {self.id}: edge tier needs electricity_price_per_kwh > 0")
            if self.cloud_price_per_hour is not None:
                raise ValidationError(f"server {self.id}: edge tier must not set cloud price")


@dataclass(frozen=True)
class LinkMatrix:
    """Dense pairwise link parameters; diagonal entries are never used
    (intra-server transfers cost nothing)."""

    propagation_ms: np.ndarray
    bandwidth_bytes_per_s: np.ndarray

    def __post_init__(self):
        p, b = np.asarray(self.propagation_ms, float), np.asarray(self.bandwidth_bytes_per_s, float)
        if p.ndim != 2 or p.shape != b.shape or p.shape[0] != p.shape[1]:
            raise ValidationError("link matrices must be square and same-shaped")
        if (p < 0).any():
            raise ValidationError("propagation times must be >= 0")
        object.__setattr__(self, "propagation_ms", p)
        object.__setattr__(self, "bandwidth_bytes_per_s", b)

    @property
    def size(self) -> int:
        return self.propagation_ms.shape[0]


@dataclass(frozen=True)
class CostBounds:
    """Min/max normalization bounds for response time, energy, monetary cost."""

    t_min: float
    t_max: float
    e_min: float
    e_max: float
    f_min: float
    f_max: float

    def validate_strict(self):
        for lo, hi, name in ((self.t_min, self.t_max, "T"),
                             (self.e_min, self.e_max, "E"),
                             (self.f_min, self.f_max, "F")):
            if not (hi > lo):
                raise ValidationError(f"{name} bounds must satisfy min < max, got [{lo}, {hi}]")
            if lo < 0:
                raise ValidationError(f"{name} bounds must be non-negative")


@dataclass(frozen=True)
class CostWeights:
    """Weights for the weighted cost. Raw weights are renormalized to sum to
    exactly 1, so configs quoting 0.33/0.33/0.33 still satisfy the simplex
    constraint. ``bounds_override``, when given, replaces the analytic
    per-task bounds with fixed values (applied uniformly to every task)."""

    w1: float = 1.0 / 3.0
    w2: float = 1.0 / 3.0
    w3: float = 1.0 / 3.0
    bounds_override: CostBounds | None = None

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValidationError("cost weights must be non-negative")
        if self.w1 + self.w2 + self.w3 <= 0:
            raise ValidationError("at least one cost weight must be positive")
        if self.bounds_override is not None:
            self.bounds_override.validate_strict()

    def normalized(self) -> tuple[float, float, float]:
        s = self.w1 + self.w2 + self.w3
        return (self.w1 / s, self.w2 / s, self.w3 / s)


@dataclass(frozen=True)
class EnvironmentSpec:
    servers: tuple[ServerSpec, ...]
    links: LinkMatrix
    weights: CostWeights = field(default_factory=CostWeights)

    def __post_init__(self):
        if not self.servers:
            raise ValidationError("environment needs at least one server")
        ids = sorted(s.id for s in self.servers)
        if ids != list(range(len(self.servers))):
            raise ValidationError(f"server ids must be contiguous from 0, got {ids}")
        if self.links.size != len(self.servers):
            raise ValidationError("link matrix size must match server count")
        object.__setattr__(self, "servers", tuple(sorted(self.servers, key=lambda s: s.id)))

    @property
    def size(self) -> int:
        return len(self.servers)

    def server(self, sid: int) -> ServerSpec:
        return self.servers[sid]


@dataclass(frozen=True)
class Assignment:
    """Total mapping task id -> server id for one application."""

    mapping: dict[int, int]

    def __getitem__(self, task_id: int) -> int:
        return self.mapping[task_id]

    def get(self, task_id: int):
        return self.mapping.get(task_id)

    def items(self):
        return self.mapping.items()

    def __len__(self):
        return len(self.mapping)


@dataclass
class TaskCosts:
    task_id: int
    server_id: int
    data_arrival_time: float
    execution_time: float
    transmission_time: float     # inbound transfer share of the arrival time
    response_time: float
    execution_energy: float
    transmission_energy: float
    energy: float
    monetary: float
    weighted: float
    on_critical_path: bool = False


@dataclass
class CostBreakdown:
    response_time: float
    energy: float
    monetary: float
    weighted: float
    per_task: list[TaskCosts]
    critical_path: list[int]


# ---------------------------------------------------------------------------
# Elementary pieces
# ---------------------------------------------------------------------------

def transfer_seconds(env: EnvironmentSpec, src: int, dst: int, data_bytes: float) -> float:
    """Inbound data delay from server ``src`` to ``dst``: transmission plus
    propagation, zero when co-located."""
    if src == dst:
        return 0.0
    if data_bytes <= 0:
        raise ConstraintViolationError(
            f"C2: data size on link {src}->{dst} must be positive, got {data_bytes}"
        )
    bw = float(env.links.bandwidth_bytes_per_s[src, dst])
    if bw <= 0:
        raise ConstraintViolationError(f"C2: zero bandwidth on used link {src}->{dst}")
    return data_bytes / bw + float(env.links.propagation_ms[src, dst]) / 1000.0


def execution_seconds(task: TaskSpec, server: ServerSpec) -> float:
    return task.cycles / server.freq_mhz


def monetary_cost(server: ServerSpec, response_time: float, energy: float) -> float:
    if server.tier == Tier.CLOUD:
        return (response_time / SECONDS_PER_HOUR) * server.cloud_price_per_hour
    return (energy / JOULES_PER_KWH) * server.electricity_price_per_kwh


def normalize(value: float, lo: float, hi: float) -> float:
    """Min-max normalize with clamping to [0, 1].

    Degenerate bounds (hi <= lo) map everything to 0; configs are expected to
    keep bounds strict, this is a guard for pathological instances.
    """
    if hi <= lo:
        return 0.0
    return min(1.0, max(0.0, (value - lo) / (hi - lo)))


# ---------------------------------------------------------------------------
# Analytic normalization bounds
# ---------------------------------------------------------------------------

def _link_extremes(env: EnvironmentSpec) -> tuple[float, float]:
    """(min off-diagonal bandwidth, max off-diagonal propagation seconds)."""
    n = env.size
    if n < 2:
        return (math.inf, 0.0)
    mask = ~np.eye(n, dtype=bool)
    min_bw = float(env.links.bandwidth_bytes_per_s[mask].min())
    max_prop = float(env.links.propagation_ms[mask].max()) / 1000.0
    return (min_bw, max_prop)


def task_bounds(task: TaskSpec, dag: AppDag, env: EnvironmentSpec) -> CostBounds:
    """Extremal per-task cost bounds over all placements.

    Best case: the placement-minimal execution term with all neighbors
    co-located (no transfers). Worst case: the placement-maximal execution
    term plus transfers of the heaviest inbound edge and all outbound edges
    over the slowest link with maximal propagation.
    """
    if env.weights.bounds_override is not None:
        return env.weights.bounds_override

    min_bw, max_prop = _link_extremes(env)
    in_edges = dag.in_edges(task.id)
    has_succ = bool(task.out_edges)

    max_in_ds = max((size for _, size in in_edges), default=0.0)
    out_ds_sum = sum(size for _, size in task.out_edges)
    worst_dat = (max_in_ds / min_bw + max_prop) if in_edges and math.isfinite(min_bw) else 0.0

    t_ex = [execution_seconds(task, s) for s in env.servers]
    t_min = min(t_ex)
    t_max = max(t_ex) + worst_dat

    e_ex = [execution_seconds(task, s) * s.exec_power_w for s in env.servers]
    max_tx_power = max(s.tx_power_w for s in env.servers)
    worst_etr = (out_ds_sum / min_bw) * max_tx_power if has_succ and math.isfinite(min_bw) else 0.0
    e_min = min(e_ex)
    e_max = max(e_ex) + worst_etr

    f_min = math.inf
    f_max = 0.0
    for s in env.servers:
        ex = execution_seconds(task, s)
        if s.tier == Tier.CLOUD:
            f_min = min(f_min, monetary_cost(s, ex, 0.0))
            f_max = max(f_max, monetary_cost(s, ex + worst_dat, 0.0))
        else:
            e_lo = ex * s.exec_power_w
            e_hi = e_lo + ((out_ds_sum / min_bw) * s.tx_power_w
                           if has_succ and math.isfinite(min_bw) else 0.0)
            f_min = min(f_min, monetary_cost(s, 0.0, e_lo))
            f_max = max(f_max, monetary_cost(s, 0.0, e_hi))

    return CostBounds(t_min, t_max, e_min, e_max, f_min, f_max)


def app_bounds(dag: AppDag, env: EnvironmentSpec) -> CostBounds:
    """Application-level bounds.

    Energy and money sum over all tasks, so their bounds are plain sums of
    the per-task bounds. Response time only counts the critical path, so its
    bounds follow the heaviest root-to-sink path under per-task best/worst
    times (longest-path DP over the DAG).
    """
    per = {t.id: task_bounds(t, dag, env) for t in dag.tasks}
    if env.weights.bounds_override is not None:
        b = env.weights.bounds_override
        n = len(dag.tasks)
        return CostBounds(b.t_min * n, b.t_max * n, b.e_min * n, b.e_max * n,
                          b.f_min * n, b.f_max * n)

    order = validate_and_order(dag)

    def longest_path(weight: dict[int, float]) -> float:
        best: dict[int, float] = {}
        for tid in order:
            preds = dag.predecessors(tid)
            base = max((best[p] for p in preds), default=0.0)
            best[tid] = base + weight[tid]
        return max(best.values())

    t_lo = longest_path({tid: b.t_min for tid, b in per.items()})
    t_hi = longest_path({tid: b.t_max for tid, b in per.items()})
    return CostBounds(
        t_min=t_lo,
        t_max=t_hi,
        e_min=sum(b.e_min for b in per.values()),
        e_max=sum(b.e_max for b in per.values()),
        f_min=sum(b.f_min for b in per.values()),
        f_max=sum(b.f_max for b in per.values()),
    )


def weighted_cost(env: EnvironmentSpec, response_time: float, energy: float,
                  monetary: float, bounds: CostBounds) -> float:
    w1, w2, w3 = env.weights.normalized()
    return (w1 * normalize(response_time, bounds.t_min, bounds.t_max)
            + w2 * normalize(energy, bounds.e_min, bounds.e_max)
            + w3 * normalize(monetary, bounds.f_min, bounds.f_max))


# ---------------------------------------------------------------------------
# Task- and application-level costs
# ---------------------------------------------------------------------------

def task_costs(task: TaskSpec, dag: AppDag, assignment: Assignment,
               env: EnvironmentSpec, bounds: CostBounds | None = None) -> TaskCosts:
    """All cost components of one task under a (locally complete) assignment.

    Requires the task itself, all predecessors, and all successors to be
    assigned: inbound edges set the data-arrival time, outbound edges set the
    transmission energy.
    """
    sid = assignment.get(task.id)
    if sid is None:
        raise PreconditionError(f"task {task.id} has no assignment")
    server = env.server(sid)

    t_dat = 0.0
    t_tr = 0.0
    for pred, size in dag.in_edges(task.id):
        psid = assignment.get(pred)
        if psid is None:
            raise PreconditionError(
                f"predecessor {pred} of task {task.id} has no assignment"
            )
        arrival = transfer_seconds(env, psid, sid, size)
        if arrival > t_dat:
            t_dat = arrival
            t_tr = 0.0 if psid == sid else size / float(env.links.bandwidth_bytes_per_s[psid, sid])
    t_ex = execution_seconds(task, server)
    t = t_dat + t_ex

    e_ex = t_ex * server.exec_power_w
    e_tr = 0.0
    for succ, size in task.out_edges:
        ssid = assignment.get(succ)
        if ssid is None:
            raise PreconditionError(
                f"successor {succ} of task {task.id} has no assignment"
            )
        if ssid == sid:
            continue  # co-located edge transmits nothing
        bw = float(env.links.bandwidth_bytes_per_s[sid, ssid])
        if bw <= 0:
            raise ConstraintViolationError(f"C2: zero bandwidth on used link {sid}->{ssid}")
        e_tr += (size / bw) * server.tx_power_w
    # Sink tasks spend no transmission energy.
    e = e_ex + (e_tr if task.out_edges else 0.0)

    f = monetary_cost(server, t, e)
    b = bounds if bounds is not None else task_bounds(task, dag, env)
    j = weighted_cost(env, t, e, f, b)

    return TaskCosts(
        task_id=task.id,
        server_id=sid,
        data_arrival_time=t_dat,
        execution_time=t_ex,
        transmission_time=t_tr,
        response_time=t,
        execution_energy=e_ex,
        transmission_energy=e_tr,
        energy=e,
        monetary=f,
        weighted=j,
    )


def critical_path(dag: AppDag, per_task_response: dict[int, float]) -> list[int]:
    """Root-to-sink path with the highest cumulative response time.

    Ties break toward the smallest task index at each divergence, which keeps
    golden tests deterministic.
    """
    missing = [t.id for t in dag.tasks if t.id not in per_task_response]
    if missing:
        raise PreconditionError(f"per-task response times missing for tasks {missing}")
    order = validate_and_order(dag)

    # Suffix value: best cumulative time of any path starting at the task.
    suffix: dict[int, float] = {}
    for tid in reversed(order):
        succs = dag.successors(tid)
        tail = max((suffix[s] for s in succs), default=0.0)
        suffix[tid] = per_task_response[tid] + tail

    sources = dag.sources()
    start = min(sources, key=lambda tid: (-suffix[tid], tid))
    path = [start]
    node = start
    while dag.successors(node):
        node = min(dag.successors(node), key=lambda s: (-suffix[s], s))
        path.append(node)
    return path


def app_costs(dag: AppDag, assignment: Assignment, env: EnvironmentSpec) -> CostBreakdown:
    """Application-level costs: critical-path response time, total energy,
    total monetary cost, and the normalized weighted combination."""
    per_task = [
        task_costs(t, dag, assignment, env) for t in dag.tasks
    ]
    responses = {c.task_id: c.response_time for c in per_task}
    cp = critical_path(dag, responses)
    cp_set = set(cp)
    for c in per_task:
        c.on_critical_path = c.task_id in cp_set

    t_app = sum(c.response_time for c in per_task if c.on_critical_path)
    e_app = sum(c.energy for c in per_task)
    f_app = sum(c.monetary for c in per_task)
    j_app = weighted_cost(env, t_app, e_app, f_app, app_bounds(dag, env))

    return CostBreakdown(
        response_time=t_app,
        energy=e_app,
        monetary=f_app,
        weighted=j_app,
        per_task=per_task,
        critical_path=cp,
    )


# ---------------------------------------------------------------------------
# Constraint checking
# ---------------------------------------------------------------------------

@dataclass
class ConstraintResult:
    name: str
    passed: bool
    violations: list[str] = field(default_factory=list)


@dataclass
class FeasibilityReport:
    results: dict[str, ConstraintResult]

    @property
    def feasible(self) -> bool:
        return all(r.passed for r in self.results.values())

    def __getitem__(self, name: str) -> ConstraintResult:
        return self.results[name]


def check_constraints(dag: AppDag, assignment: Assignment,
                      env: EnvironmentSpec) -> FeasibilityReport:
    """Evaluate scheduling constraints C1-C6; violations are reported, never
    raised."""
    results: dict[str, ConstraintResult] = {}

    # C1: every task mapped to exactly one existing server.
    c1: list[str] = []
    for t in dag.tasks:
        sid = assignment.get(t.id)
        if sid is None:
            c1.append(f"task {t.id} unassigned")
        elif not (0 <= sid < env.size):
            c1.append(f"task {t.id} assigned to unknown server {sid}")
    extra = set(assignment.mapping) - {t.id for t in dag.tasks}
    c1.extend(f"assignment references unknown task {tid}" for tid in sorted(extra))
    results["C1"] = ConstraintResult("C1", not c1, c1)

    # C2: positive data sizes, positive bandwidth on every used link.
    c2: list[str] = []
    for t in dag.tasks:
        for succ, size in t.out_edges:
            if size <= 0:
                c2.append(f"edge {t.id}->{succ} has data size {size}")
            src, dst = assignment.get(t.id), assignment.get(succ)
            if src is not None and dst is not None and src != dst:
                if env.links.bandwidth_bytes_per_s[src, dst] <= 0:
                    c2.append(f"link {src}->{dst} used by edge {t.id}->{succ} has no bandwidth")
    results["C2"] = ConstraintResult("C2", not c2, c2)

    # C3: positive server frequency and RAM (enforced at construction; restated).
    c3 = [f"server {s.id}" for s in env.servers if s.freq_mhz <= 0 or s.ram_gb <= 0]
    results["C3"] = ConstraintResult("C3", not c3, c3)

    # C4: per-server RAM load within capacity. Equality counts as feasible so
    # the check agrees with the headroom-based action mask.
    load = {s.id: 0.0 for s in env.servers}
    for t in dag.tasks:
        sid = assignment.get(t.id)
        if sid is not None and 0 <= sid < env.size:
            load[sid] += t.ram_demand
    c4 = [
        f"server {sid} needs {load[sid]:.3f} GB of {env.server(sid).ram_gb:.3f} GB"
        for sid in load
        if load[sid] > env.server(sid).ram_gb
    ]
    results["C4"] = ConstraintResult("C4", not c4, c4)

    # C5: cumulative response time never decreases along an edge.
    c5: list[str] = []
    try:
        order = validate_and_order(dag)
        costs = {t.id: task_costs(t, dag, assignment, env) for t in dag.tasks}
        cum: dict[int, float] = {}
        for tid in order:
            preds = dag.predecessors(tid)
            cum[tid] = max((cum[p] for p in preds), default=0.0) + costs[tid].response_time
        for t in dag.tasks:
            for succ, _ in t.out_edges:
                if cum[succ] < cum[t.id]:
                    c5.append(f"edge {t.id}->{succ}: cumulative time decreases")
        results["C5"] = ConstraintResult("C5", not c5, c5)
    except (PreconditionError, ConstraintViolationError) as exc:
        results["C5"] = ConstraintResult("C5", False, [f"not evaluable: {exc}"])

    # C6: weights renormalize onto the simplex (guaranteed by CostWeights).
    w = env.weights.normalized()
    c6_ok = math.isclose(sum(w), 1.0, rel_tol=0, abs_tol=1e-12) and all(0 <= x <= 1 for x in w)
    results["C6"] = ConstraintResult("C6", c6_ok, [] if c6_ok else [f"weights {w}"])

    return FeasibilityReport(results)


# ---------------------------------------------------------------------------
# Spec files
# ---------------------------------------------------------------------------

def environment_to_dict(env: EnvironmentSpec) -> dict:
    doc = {
        "servers": [
            {
                "id": s.id,
                "tier": s.tier.value,
                "freq_mhz": s.freq_mhz,
                "ram_gb": s.ram_gb,
                "exec_power_w": s.exec_power_w,
                "tx_power_w": s.tx_power_w,
                **({"cloud_price_per_hour": s.cloud_price_per_hour}
                   if s.tier == Tier.CLOUD else
                   {"electricity_price_per_kwh": s.electricity_price_per_kwh}),
            }
            for s in env.servers
        ],
        "links": {
            "propagation_ms": env.links.propagation_ms.tolist(),
            "bandwidth_bytes_per_s": env.links.bandwidth_bytes_per_s.tolist(),
        },
        "weights": {"w1": env.weights.w1, "w2": env.weights.w2, "w3": env.weights.w3},
    }
    if env.weights.bounds_override is not None:
        b = env.weights.bounds_override
        doc["bounds_override"] = {
            "t_min": b.t_min, "t_max": b.t_max,
            "e_min": b.e_min, "e_max": b.e_max,
            "f_min": b.f_min, "f_max": b.f_max,
        }
    return doc


def environment_from_dict(doc: dict) -> EnvironmentSpec:
    try:
        servers = tuple(
            ServerSpec(
                id=int(s["id"]),
                tier=Tier(s["tier"]),
                freq_mhz=float(s["freq_mhz"]),
                ram_gb=float(s["ram_gb"]),
                exec_power_w=float(s["exec_power_w"]),
                tx_power_w=float(s["tx_power_w"]),
                cloud_price_per_hour=(float(s["cloud_price_per_hour"])
                                      if "cloud_price_per_hour" in s else None),
                electricity_price_per_kwh=(float(s["electricity_price_per_kwh"])
                                           if "electricity_price_per_kwh" in s else None),
            )
            for s in doc["servers"]
        )
        links = LinkMatrix(
            propagation_ms=np.asarray(doc["links"]["propagation_ms"], float),
            bandwidth_bytes_per_s=np.asarray(doc["links"]["bandwidth_bytes_per_s"], float),
        )
        override = None
        if "bounds_override" in doc:
            b = doc["bounds_override"]
            override = CostBounds(
                t_min=float(b["t_min"]), t_max=float(b["t_max"]),
                e_min=float(b["e_min"]), e_max=float(b["e_max"]),
                f_min=float(b["f_min"]), f_max=float(b["f_max"]),
            )
        w = doc.get("weights", {})
        weights = CostWeights(
            w1=float(w.get("w1", 1 / 3)), w2=float(w.get("w2", 1 / 3)),
            w3=float(w.get("w3", 1 / 3)), bounds_override=override,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed environment document: {exc}") from exc
    return EnvironmentSpec(servers=servers, links=links, weights=weights)


def load_environment(path) -> EnvironmentSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return environment_from_dict(json.load(fh))


def save_environment(env: EnvironmentSpec, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(environment_to_dict(env), fh, indent=2)
        fh.write("\n")
