"""DAG application model, synthetic workload generation, and trace files.

An application is a directed acyclic graph of tasks. Each task carries a CPU
cycle demand (Mcycles), a RAM demand (GB), and outgoing edges annotated with
the number of bytes produced for each successor.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .errors import CycleError, DanglingEdgeError, ValidationError

#: Reference resolution label; preset cycle/data magnitudes are calibrated to it.
BASE_LABEL = 480


@dataclass(frozen=True)
class TaskSpec:
    """One task (DAG vertex). ``out_edges`` holds (successor_id, data_bytes)."""

    id: int
    app_id: int
    cycles: float          # Mcycles
    ram_demand: float      # GB
    out_edges: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.cycles <= 0:
            raise ValidationError(f"task {self.id}: cycles must be > 0")
        if self.ram_demand < 0:
            raise ValidationError(f"task {self.id}: ram_demand must be >= 0")
        for succ, size in self.out_edges:
            if size <= 0:
                raise ValidationError(
                    f"task {self.id}: edge to {succ} has non-positive data size"
                )


@dataclass
class AppDag:
    """A DAG-structured application.

    ``label`` is the resolution tag of the workload the application models;
    generators scale cycle and data magnitudes by ``label / BASE_LABEL``.
    """

    app_id: int
    tasks: list[TaskSpec]
    label: int = BASE_LABEL
    name: str = ""

    # Derived structure, built on first use.
    _preds: dict[int, list[int]] = field(default_factory=dict, repr=False)
    _in_edges: dict[int, list[tuple[int, float]]] = field(default_factory=dict, repr=False)
    _indexed: bool = field(default=False, repr=False)

    def __post_init__(self):
        if not self.tasks:
            raise ValidationError("application must contain at least one task")
        ids = sorted(t.id for t in self.tasks)
        if ids != list(range(len(self.tasks))):
            raise ValidationError(f"task ids must be contiguous from 0, got {ids}")

    def _build_index(self):
        if self._indexed:
            return
        known = {t.id for t in self.tasks}
        preds: dict[int, list[int]] = {t.id: [] for t in self.tasks}
        in_edges: dict[int, list[tuple[int, float]]] = {t.id: [] for t in self.tasks}
        for t in self.tasks:
            for succ, size in t.out_edges:
                if succ not in known:
                    raise DanglingEdgeError(
                        f"task {t.id} has an edge to unknown task {succ}"
                    )
                preds[succ].append(t.id)
                in_edges[succ].append((t.id, size))
        self._preds = preds
        self._in_edges = in_edges
        self._indexed = True

    def task(self, task_id: int) -> TaskSpec:
        return self.tasks[task_id]

    def predecessors(self, task_id: int) -> list[int]:
        self._build_index()
        return self._preds[task_id]

    def in_edges(self, task_id: int) -> list[tuple[int, float]]:
        """Incoming (predecessor_id, data_bytes) pairs."""
        self._build_index()
        return self._in_edges[task_id]

    def successors(self, task_id: int) -> list[int]:
        return [succ for succ, _ in self.tasks[task_id].out_edges]

    def sources(self) -> list[int]:
        self._build_index()
        return [t.id for t in self.tasks if not self._preds[t.id]]

    def sinks(self) -> list[int]:
        return [t.id for t in self.tasks if not t.out_edges]


@dataclass(frozen=True)
class WorkloadTrace:
    """An ordered stream of application arrivals."""

    apps: tuple[AppDag, ...]

    def __post_init__(self):
        if not self.apps:
            raise ValidationError("workload trace must contain at least one application")

    def __len__(self):
        return len(self.apps)

    def __iter__(self):
        return iter(self.apps)


def validate_and_order(dag: AppDag) -> list[int]:
    """Topological order of the DAG, index-ascending among ready tasks.

    Raises CycleError if the graph has a cycle and DanglingEdgeError if an
    edge references a missing task.
    """
    indegree = {t.id: 0 for t in dag.tasks}
    for t in dag.tasks:
        for succ, _ in t.out_edges:
            if succ not in indegree:
                raise DanglingEdgeError(f"task {t.id} has an edge to unknown task {succ}")
            indegree[succ] += 1

    ready = sorted(tid for tid, deg in indegree.items() if deg == 0)
    order: list[int] = []
    while ready:
        tid = ready.pop(0)
        order.append(tid)
        inserted = False
        for succ, _ in dag.task(tid).out_edges:
            indegree[succ] -= 1
            if indegree[succ] == 0:
                ready.append(succ)
                inserted = True
        if inserted:
            ready.sort()
    if len(order) != len(dag.tasks):
        stuck = sorted(tid for tid, deg in indegree.items() if deg > 0)
        raise CycleError(f"cycle detected involving tasks {stuck}")
    return order


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

GENERATOR_SHAPES = ("chain", "diamond", "layered")


@dataclass(frozen=True)
class GeneratorParams:
    task_count: int
    shape: str = "layered"
    max_fanout: int = 3
    cycles_range: tuple[float, float] = (200.0, 4000.0)    # Mcycles
    data_range: tuple[float, float] = (0.2e6, 8.0e6)       # bytes
    ram_range: tuple[float, float] = (0.1, 0.8)            # GB

    def __post_init__(self):
        if self.task_count < 1:
            raise ValidationError("task_count must be >= 1")
        if self.shape not in GENERATOR_SHAPES:
            raise ValidationError(f"unknown shape {self.shape!r}")
        if self.max_fanout < 1:
            raise ValidationError("max_fanout must be >= 1")
        for name in ("cycles_range", "data_range", "ram_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 and name != "ram_range":
                raise ValidationError(f"{name} must be positive")
            if lo < 0:
                raise ValidationError(f"{name} must be non-negative")
            if hi < lo:
                raise ValidationError(f"{name} is empty: {lo} > {hi}")


def generate_dag(params: GeneratorParams, seed: int, app_id: int = 0,
                 label: int = BASE_LABEL) -> AppDag:
    """Deterministically generate an acyclic application for (params, seed).

    Construction is layered, so acyclicity holds by construction: edges only
    run from lower layers to strictly higher layers.
    """
    rng = random.Random(seed)
    m = params.task_count
    scale = label / BASE_LABEL

    # Assign every task to a layer; edges point to later layers only.
    if params.shape == "chain" or m <= 2:
        layers = [[i] for i in range(m)]
    elif params.shape == "diamond":
        layers = [[0], list(range(1, m - 1)), [m - 1]]
    else:  # layered
        layers = [[0]]
        nxt = 1
        while nxt < m:
            width = min(rng.randint(1, params.max_fanout), m - nxt)
            layers.append(list(range(nxt, nxt + width)))
            nxt += width

    edges: dict[int, list[tuple[int, float]]] = {i: [] for i in range(m)}

    def data_size():
        lo, hi = params.data_range
        return rng.uniform(lo, hi) * scale

    for li in range(len(layers) - 1):
        below, above = layers[li], layers[li + 1]
        # Every task in the next layer needs at least one predecessor.
        for tid in above:
            edges[rng.choice(below)].append((tid, data_size()))
        # Extra fanout, capped per source task.
        for src in below:
            room = params.max_fanout - len(edges[src])
            if room <= 0:
                continue
            targets = [t for t in above if all(s != t for s, _ in edges[src])]
            rng.shuffle(targets)
            for tid in targets[: rng.randint(0, room)]:
                edges[src].append((tid, data_size()))

    tasks = []
    for i in range(m):
        lo, hi = params.cycles_range
        cycles = rng.uniform(lo, hi) * scale
        rlo, rhi = params.ram_range
        ram = rng.uniform(rlo, rhi)
        tasks.append(
            TaskSpec(
                id=i,
                app_id=app_id,
                cycles=cycles,
                ram_demand=ram,
                out_edges=tuple(sorted(edges[i])),
            )
        )
    dag = AppDag(app_id=app_id, tasks=tasks, label=label,
                 name=f"{params.shape}-{m}")
    validate_and_order(dag)
    return dag


# ---------------------------------------------------------------------------
# Named presets
#
# Stand-ins for small stream-processing pipelines (capture / transform /
# detect / render stages). Shapes and magnitudes are artifact choices, not
# measurements of any real application.
# ---------------------------------------------------------------------------

_PRESETS: dict[str, dict] = {
    # name: (shape spec) — explicit edges keep presets stable across versions.
    "facedetect": {
        "cycles": [400.0, 1800.0, 2600.0, 1400.0, 600.0],
        "ram": [0.2, 0.4, 0.6, 0.4, 0.2],
        "edges": [(0, 1, 4.0e6), (1, 2, 3.0e6), (2, 3, 1.5e6), (3, 4, 0.8e6)],
    },
    "colortrack": {
        "cycles": [300.0, 1200.0, 900.0, 500.0],
        "ram": [0.2, 0.3, 0.3, 0.2],
        "edges": [(0, 1, 3.0e6), (1, 2, 2.0e6), (2, 3, 1.0e6)],
    },
    "faceeye": {
        "cycles": [450.0, 2200.0, 1700.0, 2000.0, 1100.0, 700.0],
        "ram": [0.2, 0.5, 0.4, 0.5, 0.3, 0.2],
        # Two parallel detector branches between a shared source and merge.
        "edges": [
            (0, 1, 3.5e6), (0, 2, 3.5e6),
            (1, 3, 1.2e6), (2, 4, 1.2e6),
            (3, 5, 0.9e6), (4, 5, 0.9e6),
        ],
    },
    "ocr": {
        "cycles": [500.0, 1600.0, 2400.0, 2900.0, 1500.0, 2100.0, 800.0],
        "ram": [0.3, 0.4, 0.6, 0.7, 0.4, 0.5, 0.3],
        "edges": [
            (0, 1, 5.0e6), (0, 2, 5.0e6),
            (1, 3, 2.5e6), (2, 3, 2.5e6),
            (3, 4, 1.5e6), (3, 5, 1.5e6),
            (4, 6, 0.7e6), (5, 6, 0.7e6),
        ],
    },
}

PRESET_NAMES = tuple(_PRESETS)


def preset_app(name: str, app_id: int = 0, label: int = BASE_LABEL) -> AppDag:
    """Build a named preset application, scaled by the resolution label."""
    if name not in _PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    spec = _PRESETS[name]
    scale = label / BASE_LABEL
    out: dict[int, list[tuple[int, float]]] = {i: [] for i in range(len(spec["cycles"]))}
    for src, dst, size in spec["edges"]:
        out[src].append((dst, size * scale))
    tasks = [
        TaskSpec(
            id=i,
            app_id=app_id,
            cycles=spec["cycles"][i] * scale,
            ram_demand=spec["ram"][i],
            out_edges=tuple(sorted(out[i])),
        )
        for i in range(len(spec["cycles"]))
    ]
    return AppDag(app_id=app_id, tasks=tasks, label=label, name=name)


def preset_workload(label: int = BASE_LABEL) -> WorkloadTrace:
    """All four presets, in name order, as one trace."""
    return WorkloadTrace(
        apps=tuple(
            preset_app(name, app_id=i, label=label)
            for i, name in enumerate(PRESET_NAMES)
        )
    )


def preset_variants(count: int, seed: int, label: int = BASE_LABEL) -> WorkloadTrace:
    """Jittered preset instances for held-out evaluation.

    Cycles and data sizes get a per-instance multiplicative jitter in
    [0.8, 1.25]; shapes and RAM demands stay fixed.
    """
    rng = random.Random(seed)
    apps = []
    for i in range(count):
        base = preset_app(PRESET_NAMES[i % len(PRESET_NAMES)], app_id=i, label=label)
        jitter = rng.uniform(0.8, 1.25)
        tasks = [
            TaskSpec(
                id=t.id,
                app_id=i,
                cycles=t.cycles * jitter,
                ram_demand=t.ram_demand,
                out_edges=tuple((s, d * jitter) for s, d in t.out_edges),
            )
            for t in base.tasks
        ]
        apps.append(AppDag(app_id=i, tasks=tasks, label=label, name=base.name))
    return WorkloadTrace(apps=tuple(apps))


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

def workload_to_dict(trace: WorkloadTrace) -> dict:
    return {
        "apps": [
            {
                "app_id": dag.app_id,
                "label": dag.label,
                "name": dag.name,
                "tasks": [
                    {
                        "id": t.id,
                        "cycles": t.cycles,
                        "ram": t.ram_demand,
                        "edges": [[succ, size] for succ, size in t.out_edges],
                    }
                    for t in dag.tasks
                ],
            }
            for dag in trace.apps
        ]
    }


def workload_from_dict(doc: dict) -> WorkloadTrace:
    try:
        apps = []
        for app in doc["apps"]:
            tasks = [
                TaskSpec(
                    id=int(t["id"]),
                    app_id=int(app["app_id"]),
                    cycles=float(t["cycles"]),
                    ram_demand=float(t["ram"]),
                    out_edges=tuple((int(s), float(d)) for s, d in t.get("edges", [])),
                )
                for t in app["tasks"]
            ]
            dag = AppDag(
                app_id=int(app["app_id"]),
                tasks=tasks,
                label=int(app.get("label", BASE_LABEL)),
                name=str(app.get("name", "")),
            )
            validate_and_order(dag)
            apps.append(dag)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed workload document: {exc}") from exc
    return WorkloadTrace(apps=tuple(apps))


def load_workload(path) -> WorkloadTrace:
    with open(path, "r", encoding="utf-8") as fh:
        return workload_from_dict(json.load(fh))


def save_workload(trace: WorkloadTrace, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(workload_to_dict(trace), fh, indent=2)
        fh.write("\n")
