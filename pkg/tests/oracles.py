"""Independent reference implementations used only to cross-check the package.

Everything here is deliberately written as plain loops over plain dicts,
separate from the library code paths it validates.
"""

from __future__ import annotations

import math
from itertools import product

import numpy as np


# ---------------------------------------------------------------------------
# Cost model, recomputed from first principles
# ---------------------------------------------------------------------------

def enumerate_paths(dag):
    """All root-to-sink paths as lists of task ids."""
    succs = {t.id: [s for s, _ in t.out_edges] for t in dag.tasks}
    has_pred = set()
    for t in dag.tasks:
        for s, _ in t.out_edges:
            has_pred.add(s)
    roots = [t.id for t in dag.tasks if t.id not in has_pred]

    paths = []

    def walk(node, acc):
        acc = acc + [node]
        if not succs[node]:
            paths.append(acc)
            return
        for nxt in succs[node]:
            walk(nxt, acc)

    for r in roots:
        walk(r, [])
    return paths


def brute_force_critical_path(dag, response):
    """Max-total path; ties resolved to the lexicographically smallest id
    sequence."""
    best_path, best_val = None, -math.inf
    for path in enumerate_paths(dag):
        val = sum(response[tid] for tid in path)
        if val > best_val or (val == best_val and path < best_path):
            best_path, best_val = path, val
    return best_path


def brute_force_task_costs(dag, mapping, env):
    """Recompute every per-task cost component with straight loops."""
    prop = np.asarray(env.links.propagation_ms, float)
    bw = np.asarray(env.links.bandwidth_bytes_per_s, float)
    in_edges = {t.id: [] for t in dag.tasks}
    for t in dag.tasks:
        for succ, size in t.out_edges:
            in_edges[succ].append((t.id, size))

    out = {}
    for t in dag.tasks:
        k = mapping[t.id]
        srv = env.servers[k]

        t_dat = 0.0
        for pred, size in in_edges[t.id]:
            pk = mapping[pred]
            if pk == k:
                dat = 0.0
            else:
                dat = size / bw[pk, k] + prop[pk, k] / 1000.0
            t_dat = max(t_dat, dat)
        t_ex = t.cycles / srv.freq_mhz
        t_resp = t_dat + t_ex

        e_ex = t_ex * srv.exec_power_w
        e_tr = 0.0
        for succ, size in t.out_edges:
            sk = mapping[succ]
            if sk != k:
                e_tr += (size / bw[k, sk]) * srv.tx_power_w
        energy = e_ex + (e_tr if t.out_edges else 0.0)

        if srv.tier.value == "cloud":
            money = (t_resp / 3600.0) * srv.cloud_price_per_hour
        else:
            money = (energy / 3.6e6) * srv.electricity_price_per_kwh

        out[t.id] = {"t": t_resp, "t_dat": t_dat, "t_ex": t_ex,
                     "e": energy, "e_ex": e_ex, "e_tr": e_tr, "f": money}
    return out


def _norm(v, lo, hi):
    if hi <= lo:
        return 0.0
    return min(1.0, max(0.0, (v - lo) / (hi - lo)))


def brute_force_task_bounds(task, dag, env):
    """Re-derive the analytic per-task cost bounds."""
    override = env.weights.bounds_override
    if override is not None:
        return {"t": (override.t_min, override.t_max),
                "e": (override.e_min, override.e_max),
                "f": (override.f_min, override.f_max)}

    n = len(env.servers)
    min_bw, max_prop = math.inf, 0.0
    for a in range(n):
        for b in range(n):
            if a != b:
                min_bw = min(min_bw, env.links.bandwidth_bytes_per_s[a, b])
                max_prop = max(max_prop, env.links.propagation_ms[a, b] / 1000.0)

    in_sizes = []
    for t in dag.tasks:
        for succ, size in t.out_edges:
            if succ == task.id:
                in_sizes.append(size)
    out_total = sum(size for _, size in task.out_edges)

    worst_dat = (max(in_sizes) / min_bw + max_prop) if in_sizes and math.isfinite(min_bw) else 0.0
    ex = [task.cycles / s.freq_mhz for s in env.servers]
    t_lo, t_hi = min(ex), max(ex) + worst_dat

    eex = [task.cycles / s.freq_mhz * s.exec_power_w for s in env.servers]
    worst_etr = ((out_total / min_bw) * max(s.tx_power_w for s in env.servers)
                 if task.out_edges and math.isfinite(min_bw) else 0.0)
    e_lo, e_hi = min(eex), max(eex) + worst_etr

    f_lo, f_hi = math.inf, 0.0
    for s in env.servers:
        x = task.cycles / s.freq_mhz
        if s.tier.value == "cloud":
            f_lo = min(f_lo, (x / 3600.0) * s.cloud_price_per_hour)
            f_hi = max(f_hi, ((x + worst_dat) / 3600.0) * s.cloud_price_per_hour)
        else:
            base = x * s.exec_power_w
            extra = ((out_total / min_bw) * s.tx_power_w
                     if task.out_edges and math.isfinite(min_bw) else 0.0)
            f_lo = min(f_lo, (base / 3.6e6) * s.electricity_price_per_kwh)
            f_hi = max(f_hi, ((base + extra) / 3.6e6) * s.electricity_price_per_kwh)
    return {"t": (t_lo, t_hi), "e": (e_lo, e_hi), "f": (f_lo, f_hi)}


def brute_force_app_costs(dag, mapping, env):
    """Application-level T/E/F/weighted, recomputed end to end."""
    per = brute_force_task_costs(dag, mapping, env)
    response = {tid: c["t"] for tid, c in per.items()}
    cp = brute_force_critical_path(dag, response)

    t_app = math.fsum(per[tid]["t"] for tid in cp)
    e_app = math.fsum(per[tid]["e"] for tid in per)
    f_app = math.fsum(per[tid]["f"] for tid in per)

    bounds = {t.id: brute_force_task_bounds(t, dag, env) for t in dag.tasks}
    path_vals_lo = [math.fsum(bounds[tid]["t"][0] for tid in p) for p in enumerate_paths(dag)]
    path_vals_hi = [math.fsum(bounds[tid]["t"][1] for tid in p) for p in enumerate_paths(dag)]
    if env.weights.bounds_override is not None:
        b = env.weights.bounds_override
        nt = len(dag.tasks)
        t_b = (b.t_min * nt, b.t_max * nt)
        e_b = (b.e_min * nt, b.e_max * nt)
        f_b = (b.f_min * nt, b.f_max * nt)
    else:
        t_b = (max(path_vals_lo), max(path_vals_hi))
        e_b = (math.fsum(bounds[t]["e"][0] for t in bounds),
               math.fsum(bounds[t]["e"][1] for t in bounds))
        f_b = (math.fsum(bounds[t]["f"][0] for t in bounds),
               math.fsum(bounds[t]["f"][1] for t in bounds))

    s = env.weights.w1 + env.weights.w2 + env.weights.w3
    j = (env.weights.w1 / s * _norm(t_app, *t_b)
         + env.weights.w2 / s * _norm(e_app, *e_b)
         + env.weights.w3 / s * _norm(f_app, *f_b))
    return {"t": t_app, "e": e_app, "f": f_app, "j": j, "cp": cp}


# ---------------------------------------------------------------------------
# n-step returns and the truncated-correction fixed point
# ---------------------------------------------------------------------------

def n_step_return(rewards, bootstrap, gamma):
    """Plain discounted n-step return with a bootstrap tail."""
    total = bootstrap
    for r in reversed(rewards):
        total = r + gamma * total
    return total


def solve_policy_value(transitions, rewards, policy, gamma):
    """Exact value of a fixed policy on a tabular MDP via the linear system.

    transitions: (S, A, S) array, rewards: (S, A), policy: (S, A).
    """
    S = transitions.shape[0]
    p_pi = np.einsum("sa,sat->st", policy, transitions)
    r_pi = np.einsum("sa,sa->s", policy, rewards)
    return np.linalg.solve(np.eye(S) - gamma * p_pi, r_pi)


# ---------------------------------------------------------------------------
# Second, structurally different assignment enumerator
# ---------------------------------------------------------------------------

def recursive_min_cost_assignment(dag, env, app_cost_fn):
    """Depth-first enumeration of feasible assignments, minimizing the
    weighted app cost. Independent of the itertools-product enumerator in the
    library."""
    tasks = sorted(t.id for t in dag.tasks)
    ram = {t.id: t.ram_demand for t in dag.tasks}
    cap = [s.ram_gb for s in env.servers]

    best = {"j": math.inf, "mapping": None}

    def rec(idx, mapping, load):
        if idx == len(tasks):
            j = app_cost_fn(dict(mapping))
            if j < best["j"]:
                best["j"] = j
                best["mapping"] = dict(mapping)
            return
        tid = tasks[idx]
        for sid in range(len(env.servers)):
            if load[sid] + ram[tid] > cap[sid]:
                continue
            mapping[tid] = sid
            load[sid] += ram[tid]
            rec(idx + 1, mapping, load)
            load[sid] -= ram[tid]
            del mapping[tid]

    rec(0, {}, [0.0] * len(env.servers))
    return best["mapping"], best["j"]


def exhaustive_assignments(n_tasks, n_servers):
    """Every total mapping, in lexicographic order."""
    return product(range(n_servers), repeat=n_tasks)
