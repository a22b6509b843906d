"""Run analysis: emission estimates, time-to-threshold speedups, scheduling
overhead, and CSV/chart reports over training run directories."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ValidationError

SHARE_TOLERANCE = 1e-9


# ---------------------------------------------------------------------------
# Greenhouse-gas emission estimate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmissionSource:
    name: str
    share: float                 # fraction of generation
    intensity_kg_per_kwh: float  # kg CO2e emitted per kWh produced


@dataclass(frozen=True)
class EmissionMix:
    sources: tuple[EmissionSource, ...]

    def __post_init__(self):
        total = math.fsum(s.share for s in self.sources)
        if abs(total - 1.0) > SHARE_TOLERANCE:
            raise ValidationError(f"emission mix shares must sum to 1, got {total}")
        if any(s.intensity_kg_per_kwh < 0 or s.share < 0 for s in self.sources):
            raise ValidationError("shares and intensities must be non-negative")

    @property
    def intensity(self) -> float:
        """Mix-weighted kg CO2e per kWh."""
        return math.fsum(s.share * s.intensity_kg_per_kwh for s in self.sources)


def ghe(energy_kwh: float, mix: EmissionMix) -> float:
    """Total kg CO2e for the electricity consumed under the given mix."""
    if energy_kwh < 0:
        raise ValidationError("energy must be non-negative")
    return energy_kwh * mix.intensity


def load_emission_mix(source) -> EmissionMix:
    """Build a mix from a dict, a preset name (AU/US/DE), or a JSON path."""
    if isinstance(source, dict):
        doc = source
    else:
        name = str(source)
        presets = _load_presets()
        if name in presets:
            doc = presets[name]
        else:
            with open(name, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
    try:
        sources = tuple(
            EmissionSource(name=str(s["name"]), share=float(s["share"]),
                           intensity_kg_per_kwh=float(s["intensity_kg_per_kwh"]))
            for s in doc["sources"]
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed emission mix: {exc}") from exc
    return EmissionMix(sources=sources)


def _load_presets() -> dict:
    data = resources.files("dagsched.data").joinpath("emission_mixes.json")
    doc = json.loads(data.read_text(encoding="utf-8"))
    return {k: v for k, v in doc.items() if not k.startswith("_")}


def preset_mix_names() -> list[str]:
    return sorted(_load_presets())


# ---------------------------------------------------------------------------
# Speedup
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpeedupResult:
    reached: bool
    speedup: float | None
    time_reference: float | None
    time_candidate: float | None
    detail: str = ""


def first_crossing(curve, threshold: float) -> float | None:
    """Wall-clock time at which the cost series first reaches the threshold,
    linearly interpolated between samples. ``curve`` is a sequence of
    (wall_clock_seconds, cost) pairs in time order."""
    points = [(float(t), float(j)) for t, j in curve]
    if not points:
        return None
    prev_t, prev_j = points[0]
    if prev_j <= threshold:
        return prev_t
    for t, j in points[1:]:
        if j <= threshold:
            if prev_j == j:
                return t
            frac = (prev_j - threshold) / (prev_j - j)
            return prev_t + (t - prev_t) * frac
        prev_t, prev_j = t, j
    return None


def speedup(reference_curve, candidate_curve, threshold: float) -> SpeedupResult:
    """Ratio of reference to candidate wall-clock time to reach a target
    cost. Never fabricates a number: if either curve stays above the
    threshold the result says so."""
    time_r = first_crossing(reference_curve, threshold)
    time_t = first_crossing(candidate_curve, threshold)
    if time_r is None or time_t is None:
        side = "reference" if time_r is None else "candidate"
        if time_r is None and time_t is None:
            side = "reference and candidate"
        return SpeedupResult(reached=False, speedup=None, time_reference=time_r,
                             time_candidate=time_t,
                             detail=f"threshold {threshold} not reached by {side} curve")
    if time_t == 0.0:
        return SpeedupResult(reached=False, speedup=None, time_reference=time_r,
                             time_candidate=time_t,
                             detail="candidate starts at or below the threshold")
    return SpeedupResult(reached=True, speedup=time_r / time_t,
                         time_reference=time_r, time_candidate=time_t)


# ---------------------------------------------------------------------------
# Scheduling overhead
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OverheadReport:
    mean_s: float
    ci_low: float
    ci_high: float
    samples: tuple[float, ...]
    iterations: int

    @property
    def total_s(self) -> float:
        return float(math.fsum(self.samples))


def confidence_interval(samples, level: float = 0.95) -> tuple[float, float]:
    """Two-sided t-interval for the mean."""
    arr = np.asarray(samples, dtype=float)
    if arr.size < 2:
        raise ValidationError("confidence interval needs at least two samples")
    mean = arr.mean()
    sem = arr.std(ddof=1) / math.sqrt(arr.size)
    t_crit = stats.t.ppf(0.5 + level / 2.0, df=arr.size - 1)
    return (mean - t_crit * sem, mean + t_crit * sem)


def measure_scheduling_overhead(env_spec, workload, params,
                                iterations: int = 100) -> OverheadReport:
    """Average per-iteration wall-clock cost of producing scheduling
    decisions: one policy rollout over the workload plus envelope build,
    no learning."""
    from .agent import actor_episode
    from .mdp import SchedulingEnv
    from .runtime import make_envelope

    env = SchedulingEnv(env_spec, workload)
    steps = sum(len(dag.tasks) for dag in workload.apps)
    rng = np.random.default_rng(0)
    samples = []
    for i in range(iterations):
        t0 = time.perf_counter()
        traj = actor_episode(env, params, n=steps, rng=rng, gamma=0.99)
        make_envelope(i, 0, traj)
        samples.append(time.perf_counter() - t0)
        env.pop_completed()
    lo, hi = confidence_interval(samples)
    return OverheadReport(mean_s=float(np.mean(samples)), ci_low=lo, ci_high=hi,
                          samples=tuple(samples), iterations=iterations)


# ---------------------------------------------------------------------------
# Run-directory reports
# ---------------------------------------------------------------------------

def read_run_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise ValidationError(f"no metrics.csv in run directory {run_dir}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"metrics file {path} is empty")
    return rows


def _float_or_nan(value) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return float("nan")


def cost_curve(rows, column: str = "mean_app_j"):
    """(wall_clock, cost) pairs for rows where the cost was recorded."""
    curve = []
    for row in rows:
        j = _float_or_nan(row.get(column))
        if not math.isnan(j):
            curve.append((float(row["wall_clock_s"]), j))
    return curve


def write_report(run_dirs, out_dir, threshold: float | None = None,
                 mixes: list[str] | None = None,
                 reference: str | None = None) -> dict:
    """Emit comparison tables (and charts) for one or more run directories.

    Produces cost_vs_iteration.csv per run, a combined comparison.csv, a GHE
    table over the requested emission mixes, and, when a threshold is given,
    a speedup table against the reference run (default: the first).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mixes = mixes or preset_mix_names()

    runs: dict[str, list[dict]] = {}
    errors: dict[str, str] = {}
    for run_dir in run_dirs:
        name = Path(run_dir).name
        try:
            runs[name] = read_run_metrics(run_dir)
        except ValidationError as exc:
            errors[str(run_dir)] = str(exc)
    if errors:
        listing = "; ".join(f"{d}: {m}" for d, m in errors.items())
        raise ValidationError(f"unreadable run directories: {listing}")

    cost_columns = ["mean_app_t", "mean_app_e", "mean_app_f", "mean_app_j"]
    for name, rows in runs.items():
        with open(out_dir / f"cost_vs_iteration_{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "wall_clock_s"] + cost_columns)
            for row in rows:
                writer.writerow([row["iteration"], row["wall_clock_s"]]
                                + [row.get(c, "") for c in cost_columns])

    # One row per run per metric: final and best observed values.
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "metric", "final", "best"])
        for name, rows in runs.items():
            for col in cost_columns + ["mean_reward"]:
                series = [_float_or_nan(r.get(col)) for r in rows]
                series = [v for v in series if not math.isnan(v)]
                if not series:
                    continue
                best = min(series) if col != "mean_reward" else max(series)
                writer.writerow([name, col, series[-1], best])

    # Total model-derived energy per run, converted to emissions per mix.
    with open(out_dir / "ghe.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "total_energy_kwh"]
                        + [f"ghe_kg_{m}" for m in mixes])
        for name, rows in runs.items():
            joules = 0.0
            for row in rows:
                e = _float_or_nan(row.get("mean_app_e"))
                count = _float_or_nan(row.get("apps_completed"))
                if not math.isnan(e) and not math.isnan(count):
                    joules += e * count
            kwh = joules / 3.6e6
            writer.writerow([name, kwh]
                            + [ghe(kwh, load_emission_mix(m)) for m in mixes])

    result = {"runs": sorted(runs), "out_dir": str(out_dir)}

    if threshold is not None:
        ref_name = Path(reference).name if reference else sorted(runs)[0]
        if ref_name not in runs:
            raise ValidationError(f"reference run {ref_name!r} not among inputs")
        ref_curve = cost_curve(runs[ref_name])
        with open(out_dir / "speedup.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "reached", "speedup", "time_reference_s",
                             "time_candidate_s", "detail"])
            for name, rows in runs.items():
                res = speedup(ref_curve, cost_curve(rows), threshold)
                writer.writerow([name, res.reached, res.speedup,
                                 res.time_reference, res.time_candidate,
                                 res.detail])
        result["reference"] = ref_name

    _write_charts(runs, out_dir, cost_columns)
    return result


def write_overhead_table(reports: dict[str, OverheadReport], out_path):
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "iterations", "mean_s", "ci95_low", "ci95_high"])
        for name, rep in sorted(reports.items()):
            writer.writerow([name, rep.iterations, rep.mean_s, rep.ci_low,
                             rep.ci_high])


def _write_charts(runs, out_dir: Path, cost_columns):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for col in cost_columns:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        plotted = False
        for name, rows in runs.items():
            xs, ys = [], []
            for row in rows:
                v = _float_or_nan(row.get(col))
                if not math.isnan(v):
                    xs.append(int(row["iteration"]))
                    ys.append(v)
            if xs:
                ax.plot(xs, ys, label=name, linewidth=1.2)
                plotted = True
        if not plotted:
            plt.close(fig)
            continue
        ax.set_xlabel("iteration")
        ax.set_ylabel(col)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / f"{col}.svg")
        plt.close(fig)
