"""Command-line surface: train, eval, baseline, ghe, speedup, report.

Failures exit nonzero with a one-line JSON error object on stderr.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from .agent import evaluate_policy, greedy_assignment
from .baselines import BASELINE_KINDS, baseline_schedule
from .costmodel import app_costs, load_environment
from .errors import DagschedError
from .mdp import state_dim
from .network import load_checkpoint
from .reporting import (
    cost_curve,
    ghe,
    load_emission_mix,
    measure_scheduling_overhead,
    preset_mix_names,
    speedup,
    write_overhead_table,
    write_report,
)
from .runtime import TrainingConfig, run_training
from .workload import load_workload


def _fail(exc: Exception, code: int = 2):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(doc), err=True)
    sys.exit(code)


def _load_training_config(path) -> TrainingConfig:
    if path is None:
        return TrainingConfig.desk_scale()
    with open(path, "r", encoding="utf-8") as fh:
        return TrainingConfig.from_dict(json.load(fh))


@click.group()
def main():
    """Schedule DAG applications on edge/cloud servers with a distributed
    actor-learner RL scheduler."""


@main.command()
@click.option("--env", "env_path", required=True, type=click.Path(exists=True))
@click.option("--workload", "workload_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--actors", default=1, show_default=True)
@click.option("--iterations", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["sync", "threads"]), default="sync",
              show_default=True)
@click.option("--transport", type=click.Choice(["memory", "tcp"]),
              default="memory", show_default=True)
def train(env_path, workload_path, config_path, actors, iterations, seed,
          out_dir, mode, transport):
    """Run the actor/learner training loop."""
    try:
        env_spec = load_environment(env_path)
        workload = load_workload(workload_path)
        config = _load_training_config(config_path)
        result = run_training(env_spec, workload, config, actor_count=actors,
                              iterations=iterations, seed=seed,
                              out_dir=out_dir, mode=mode, transport=transport)
    except DagschedError as exc:
        _fail(exc)
    click.echo(json.dumps({
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(result.metrics_path),
        "iterations": result.iterations,
        "final_version": result.final_params.version,
        "envelopes": {"submitted": result.counters.submitted,
                      "consumed": result.counters.consumed,
                      "lost": result.counters.lost},
    }, indent=2))


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True))
@click.option("--env", "env_path", required=True, type=click.Path(exists=True))
@click.option("--workload", "workload_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path())
@click.option("--overhead/--no-overhead", default=False,
              help="Also measure per-iteration scheduling overhead.")
def eval_cmd(checkpoint_path, env_path, workload_path, out_path, overhead):
    """Greedy-argmax evaluation of a trained policy on a workload."""
    try:
        env_spec = load_environment(env_path)
        workload = load_workload(workload_path)
        params = load_checkpoint(checkpoint_path)
        if params.config.input_dim != state_dim(env_spec):
            raise DagschedError(
                "checkpoint was trained for a different environment shape")
        rows = []
        for dag in workload.apps:
            assignment, failed = greedy_assignment(params, env_spec, dag)
            if failed:
                rows.append({"app_id": dag.app_id, "name": dag.name,
                             "failed_tasks": failed})
                continue
            b = app_costs(dag, assignment, env_spec)
            rows.append({
                "app_id": dag.app_id, "name": dag.name,
                "assignment": {str(k): v for k, v in sorted(assignment.items())},
                "response_time_s": b.response_time, "energy_j": b.energy,
                "monetary": b.monetary, "weighted": b.weighted,
            })
        mean_j = evaluate_policy(params, env_spec, workload.apps)
        doc = {"mean_weighted_cost": mean_j, "apps": rows,
               "policy_version": params.version}
        if overhead:
            rep = measure_scheduling_overhead(env_spec, workload, params)
            doc["scheduling_overhead"] = {
                "iterations": rep.iterations, "mean_s": rep.mean_s,
                "ci95": [rep.ci_low, rep.ci_high],
            }
    except DagschedError as exc:
        _fail(exc)
    text = json.dumps(doc, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
    click.echo(text)


@main.command()
@click.option("--kind", type=click.Choice(list(BASELINE_KINDS)), required=True)
@click.option("--env", "env_path", required=True, type=click.Path(exists=True))
@click.option("--workload", "workload_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path())
def baseline(kind, env_path, workload_path, seed, out_path):
    """Schedule every application in the workload with a baseline policy."""
    try:
        env_spec = load_environment(env_path)
        workload = load_workload(workload_path)
        rows = []
        for dag in workload.apps:
            assignment, breakdown = baseline_schedule(kind, dag, env_spec, seed)
            rows.append({
                "app_id": dag.app_id, "name": dag.name,
                "assignment": {str(k): v for k, v in sorted(assignment.items())},
                "response_time_s": breakdown.response_time,
                "energy_j": breakdown.energy,
                "monetary": breakdown.monetary,
                "weighted": breakdown.weighted,
            })
    except DagschedError as exc:
        _fail(exc)
    doc = {"kind": kind,
           "mean_weighted_cost": float(np.mean([r["weighted"] for r in rows])),
           "apps": rows}
    text = json.dumps(doc, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
    click.echo(text)


@main.command("ghe")
@click.option("--energy-kwh", type=float, required=True)
@click.option("--mix", default="AU", show_default=True,
              help="Preset name (AU/US/DE) or path to a mix JSON file.")
def ghe_cmd(energy_kwh, mix):
    """Greenhouse-gas emissions for a given electricity consumption."""
    try:
        mix_obj = load_emission_mix(mix)
        value = ghe(energy_kwh, mix_obj)
    except (DagschedError, OSError) as exc:
        _fail(exc)
    click.echo(json.dumps({"energy_kwh": energy_kwh, "mix": str(mix),
                           "intensity_kg_per_kwh": mix_obj.intensity,
                           "ghe_kg": value}))


@main.command("speedup")
@click.option("--reference", "reference_path", required=True,
              type=click.Path(exists=True),
              help="metrics.csv of the reference run.")
@click.option("--candidate", "candidate_path", required=True,
              type=click.Path(exists=True))
@click.option("--threshold", type=float, required=True,
              help="Weighted-cost level both curves must reach.")
@click.option("--column", default="mean_app_j", show_default=True)
def speedup_cmd(reference_path, candidate_path, threshold, column):
    """Time-to-threshold ratio between two training runs."""
    try:
        def curve(path):
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            if not rows:
                raise DagschedError(f"{path} holds no metric rows")
            return cost_curve(rows, column=column)

        result = speedup(curve(reference_path), curve(candidate_path), threshold)
    except (DagschedError, OSError) as exc:
        _fail(exc)
    click.echo(json.dumps({
        "threshold": threshold, "reached": result.reached,
        "speedup": result.speedup, "time_reference_s": result.time_reference,
        "time_candidate_s": result.time_candidate, "detail": result.detail,
    }))
    if not result.reached:
        sys.exit(3)


@main.command()
@click.option("--runs", "run_dirs", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--threshold", type=float, default=None,
              help="Optional weighted-cost threshold for the speedup table.")
@click.option("--mix", "mixes", multiple=True,
              help=f"Emission mixes to tabulate (default: {', '.join(preset_mix_names())}).")
@click.option("--reference", type=click.Path(),
              help="Run directory used as the speedup reference.")
@click.option("--overhead-env", type=click.Path(exists=True),
              help="Environment file: also measure scheduling overhead per run checkpoint.")
@click.option("--overhead-workload", type=click.Path(exists=True))
def report(run_dirs, out_dir, threshold, mixes, reference, overhead_env,
           overhead_workload):
    """Summarize one or more run directories into tables and charts."""
    try:
        result = write_report(run_dirs, out_dir, threshold=threshold,
                              mixes=list(mixes) or None, reference=reference)
        if overhead_env and overhead_workload:
            env_spec = load_environment(overhead_env)
            workload = load_workload(overhead_workload)
            reports = {}
            for run_dir in run_dirs:
                ckpt = Path(run_dir) / "checkpoint.ckpt"
                if ckpt.exists():
                    params = load_checkpoint(ckpt)
                    reports[Path(run_dir).name] = measure_scheduling_overhead(
                        env_spec, workload, params)
            if reports:
                write_overhead_table(reports, Path(out_dir) / "overhead.csv")
                result["overhead_runs"] = sorted(reports)
    except (DagschedError, OSError) as exc:
        _fail(exc)
    click.echo(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
