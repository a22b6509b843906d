import math
import random

import numpy as np
import pytest

from conftest import chain_dag, cloud_server, diamond_dag, edge_server, make_env
from oracles import (
    brute_force_app_costs,
    brute_force_critical_path,
    enumerate_paths,
)
from generators import random_dag, random_environment, random_feasible_assignment

from dagsched.costmodel import (
    Assignment,
    CostBounds,
    CostWeights,
    app_costs,
    check_constraints,
    critical_path,
    environment_from_dict,
    environment_to_dict,
    normalize,
    task_bounds,
    task_costs,
    weighted_cost,
)
from dagsched.errors import (
    ConstraintViolationError,
    PreconditionError,
    ValidationError,
)
from dagsched.workload import AppDag, TaskSpec


class TestTaskCosts:
    def test_colocated_predecessor_has_zero_arrival(self, two_server_env):
        # 2000 Mcycles on the 2000 MHz server: execution exactly 1 s.
        dag = chain_dag([1000.0, 2000.0])
        asg = Assignment({0: 0, 1: 0})
        c = task_costs(dag.task(1), dag, asg, two_server_env)
        assert c.data_arrival_time == 0.0
        assert c.execution_time == pytest.approx(1.0, abs=0)
        assert c.response_time == pytest.approx(1.0, abs=0)

    def test_cross_server_arrival(self, two_server_env):
        # 28 MB over 14 MB/s plus 10 ms, then 0.5 s of execution: 2.51 s.
        dag = chain_dag([1000.0, 1000.0], data=28e6)
        asg = Assignment({0: 1, 1: 0})
        c = task_costs(dag.task(1), dag, asg, two_server_env)
        assert c.response_time == pytest.approx(2.51, rel=1e-12)
        assert c.transmission_time == pytest.approx(2.0, rel=1e-12)

    def test_sink_task_spends_no_transmission_energy(self, two_server_env):
        dag = chain_dag([1000.0, 1000.0])
        asg = Assignment({0: 0, 1: 1})
        c = task_costs(dag.task(1), dag, asg, two_server_env)
        assert c.transmission_energy == 0.0
        assert c.energy == pytest.approx(c.execution_energy, abs=0)

    def test_edge_electricity_price(self):
        # 3600 s at 10 W is 0.01 kWh; at 0.2871 per kWh that costs 0.002871.
        env = make_env([edge_server(0, freq=1000.0, exec_w=10.0, price=0.2871),
                        edge_server(1, freq=1500.0)])
        dag = AppDag(app_id=0, tasks=[TaskSpec(0, 0, 3_600_000.0, 0.1, ())])
        c = task_costs(dag.task(0), dag, Assignment({0: 0}), env)
        assert c.energy == pytest.approx(36000.0, rel=1e-12)
        assert c.monetary == pytest.approx(0.002871, rel=1e-12)

    def test_missing_predecessor_assignment_raises(self, two_server_env):
        dag = chain_dag([1000.0, 1000.0])
        with pytest.raises(PreconditionError):
            task_costs(dag.task(1), dag, Assignment({1: 0}), two_server_env)

    def test_zero_bandwidth_on_used_link_raises(self):
        bw = np.array([[0.0, 0.0], [0.0, 0.0]])
        env = make_env([edge_server(0), edge_server(1)], bw=bw)
        dag = chain_dag([1000.0, 1000.0])
        with pytest.raises(ConstraintViolationError):
            task_costs(dag.task(1), dag, Assignment({0: 0, 1: 1}), env)


class TestCriticalPath:
    def test_linear_chain_is_entirely_critical(self):
        dag = chain_dag([1.0, 1.0, 1.0])
        assert critical_path(dag, {0: 0.1, 1: 0.2, 2: 0.3}) == [0, 1, 2]

    def test_equal_branches_pick_lower_index(self):
        dag = diamond_dag([1.0, 1.0, 1.0, 1.0])
        path = critical_path(dag, {0: 0.5, 1: 1.0, 2: 1.0, 3: 0.5})
        assert path == [0, 1, 3]

    def test_matches_enumeration_on_random_dags(self):
        rng = random.Random(7)
        for _ in range(50):
            dag = random_dag(rng, rng.randint(2, 6))
            response = {t.id: rng.uniform(0.01, 5.0) for t in dag.tasks}
            assert critical_path(dag, response) == brute_force_critical_path(dag, response)

    def test_requires_full_response_map(self):
        dag = chain_dag([1.0, 1.0])
        with pytest.raises(PreconditionError):
            critical_path(dag, {0: 1.0})


class TestAppCosts:
    def test_single_task_app(self, two_server_env):
        dag = chain_dag([2000.0])
        b = app_costs(dag, Assignment({0: 0}), two_server_env)
        assert b.critical_path == [0]
        assert b.response_time == pytest.approx(b.per_task[0].response_time, abs=0)

    def test_diamond_counts_slow_branch_only(self, two_server_env):
        # Co-located on the 2000 MHz edge server: branch times 2 s vs 1 s.
        dag = diamond_dag([500.0, 4000.0, 2000.0, 500.0])
        asg = Assignment({0: 0, 1: 0, 2: 0, 3: 0})
        b = app_costs(dag, asg, two_server_env)
        assert b.critical_path == [0, 1, 3]
        assert b.response_time == pytest.approx(0.25 + 2.0 + 0.25, rel=1e-12)

    def test_response_only_weights(self, two_server_env):
        env = make_env(list(two_server_env.servers), weights=CostWeights(1.0, 0.0, 0.0))
        dag = chain_dag([1000.0, 3000.0])
        asg = Assignment({0: 0, 1: 1})
        b = app_costs(dag, asg, env)
        from dagsched.costmodel import app_bounds
        bounds = app_bounds(dag, env)
        assert b.weighted == pytest.approx(
            normalize(b.response_time, bounds.t_min, bounds.t_max), abs=0
        )

    def test_full_colocation_kills_transfers(self, two_server_env):
        rng = random.Random(3)
        dag = random_dag(rng, 5)
        asg = Assignment({t.id: 0 for t in dag.tasks})
        b = app_costs(dag, asg, two_server_env)
        for c in b.per_task:
            assert c.data_arrival_time == 0.0
            assert c.transmission_energy == 0.0

    def test_monotone_in_cycles_and_data(self, two_server_env):
        rng = random.Random(11)
        for _ in range(10):
            dag = random_dag(rng, 5)
            asg = random_feasible_assignment(rng, dag, two_server_env)
            base = app_costs(dag, asg, two_server_env).response_time

            bump_id = rng.randrange(5)
            bumped_tasks = [
                TaskSpec(t.id, t.app_id, t.cycles * (2.0 if t.id == bump_id else 1.0),
                         t.ram_demand, t.out_edges)
                for t in dag.tasks
            ]
            bumped = AppDag(app_id=dag.app_id, tasks=bumped_tasks)
            assert app_costs(bumped, asg, two_server_env).response_time >= base

            grown_tasks = [
                TaskSpec(t.id, t.app_id, t.cycles, t.ram_demand,
                         tuple((s, d * (3.0 if t.id == bump_id else 1.0))
                               for s, d in t.out_edges))
                for t in dag.tasks
            ]
            grown = AppDag(app_id=dag.app_id, tasks=grown_tasks)
            assert app_costs(grown, asg, two_server_env).response_time >= base - 1e-15

    def test_brute_force_equivalence_small_batch(self):
        rng = random.Random(20)
        for _ in range(20):
            env = random_environment(rng, rng.randint(2, 4))
            dag = random_dag(rng, rng.randint(1, 6))
            asg = random_feasible_assignment(rng, dag, env)
            got = app_costs(dag, asg, env)
            want = brute_force_app_costs(dag, asg.mapping, env)
            assert got.response_time == pytest.approx(want["t"], rel=1e-9)
            assert got.energy == pytest.approx(want["e"], rel=1e-9)
            assert got.monetary == pytest.approx(want["f"], rel=1e-9)
            assert got.weighted == pytest.approx(want["j"], rel=1e-9, abs=1e-12)
            assert got.critical_path == want["cp"]


class TestBoundsAndClamping:
    def test_weighted_cost_in_unit_interval_within_bounds(self):
        env = make_env([edge_server(0), cloud_server(1)])
        bounds = CostBounds(0.0, 10.0, 0.0, 100.0, 0.0, 1.0)
        rng = random.Random(5)
        for _ in range(100):
            j = weighted_cost(env, rng.uniform(0, 10), rng.uniform(0, 100),
                              rng.uniform(0, 1), bounds)
            assert 0.0 <= j <= 1.0

    def test_clamping_exact_at_boundaries(self):
        env = make_env([edge_server(0), cloud_server(1)],
                       weights=CostWeights(1.0, 0.0, 0.0))
        bounds = CostBounds(1.0, 3.0, 0.0, 1.0, 0.0, 1.0)
        assert weighted_cost(env, 1.0, 0.5, 0.5, bounds) == 0.0
        assert weighted_cost(env, 3.0, 0.5, 0.5, bounds) == 1.0
        assert weighted_cost(env, -5.0, 0.5, 0.5, bounds) == 0.0
        assert weighted_cost(env, 99.0, 0.5, 0.5, bounds) == 1.0

    def test_task_bounds_strict_for_heterogeneous_env(self, two_server_env):
        dag = chain_dag([1000.0, 2000.0])
        for t in dag.tasks:
            b = task_bounds(t, dag, two_server_env)
            assert b.t_min < b.t_max
            assert b.e_min < b.e_max
            assert b.f_min < b.f_max

    def test_bounds_override_validation(self):
        with pytest.raises(ValidationError):
            CostBounds(1.0, 1.0, 0.0, 1.0, 0.0, 1.0).validate_strict()


class TestConstraints:
    def test_total_assignment_passes_c1(self, two_server_env):
        dag = chain_dag([1000.0, 1000.0])
        rep = check_constraints(dag, Assignment({0: 0, 1: 1}), two_server_env)
        assert rep["C1"].passed

    def test_partial_assignment_fails_c1(self, two_server_env):
        dag = chain_dag([1000.0, 1000.0])
        rep = check_constraints(dag, Assignment({0: 0}), two_server_env)
        assert not rep["C1"].passed

    def test_ram_overcommit_fails_c4_naming_server(self):
        env = make_env([edge_server(0, ram=1.0), edge_server(1, ram=4.0)])
        dag = AppDag(app_id=0, tasks=[
            TaskSpec(0, 0, 100.0, 0.6, ((1, 1e6),)),
            TaskSpec(1, 0, 100.0, 0.6, ()),
        ])
        rep = check_constraints(dag, Assignment({0: 0, 1: 0}), env)
        assert not rep["C4"].passed
        assert "server 0" in rep["C4"].violations[0]

    def test_equal_weights_pass_c6_after_renormalization(self, two_server_env):
        env = make_env(list(two_server_env.servers),
                       weights=CostWeights(0.33, 0.33, 0.33))
        dag = chain_dag([1000.0])
        rep = check_constraints(dag, Assignment({0: 0}), env)
        assert rep["C6"].passed

    def test_cumulative_time_is_monotone_along_edges(self):
        rng = random.Random(17)
        for _ in range(10):
            env = random_environment(rng, 3)
            dag = random_dag(rng, 6)
            asg = random_feasible_assignment(rng, dag, env)
            rep = check_constraints(dag, asg, env)
            assert rep["C5"].passed


class TestEnvironmentSpecFiles:
    def test_round_trip(self, two_server_env, tmp_path):
        doc = environment_to_dict(two_server_env)
        env2 = environment_from_dict(doc)
        assert environment_to_dict(env2) == doc

    def test_malformed_document_rejected(self):
        with pytest.raises(ValidationError):
            environment_from_dict({"servers": "nope"})

    def test_weights_validation(self):
        with pytest.raises(ValidationError):
            CostWeights(-0.1, 0.5, 0.6)
        with pytest.raises(ValidationError):
            CostWeights(0.0, 0.0, 0.0)

    def test_enumerate_paths_sanity(self):
        dag = diamond_dag([1.0, 1.0, 1.0, 1.0])
        assert sorted(enumerate_paths(dag)) == [[0, 1, 3], [0, 2, 3]]
