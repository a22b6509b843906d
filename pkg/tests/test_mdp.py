import math
import random

import numpy as np
import pytest

from conftest import chain_dag, cloud_server, diamond_dag, edge_server, make_env
from generators import random_dag, random_environment

from dagsched.costmodel import Assignment, CostWeights, app_costs, check_constraints
from dagsched.errors import ValidationError
from dagsched.mdp import (
    FAILURE_PENALTY,
    DagFeatures,
    SchedulingEnv,
    TASK_FEATURE_COUNT,
    Transition,
    encode_state,
    feasible_mask,
    reward,
    state_dim,
)
from dagsched.workload import AppDag, TaskSpec, WorkloadTrace, preset_workload


class TestEncodeState:
    def test_deterministic(self, two_server_env):
        dag = chain_dag([1000.0, 2000.0])
        head = np.array([4.0, 8.0])
        a = encode_state(dag.task(1), dag, two_server_env, head)
        b = encode_state(dag.task(1), dag, two_server_env, head)
        assert np.array_equal(a, b)

    def test_all_entries_in_unit_interval(self):
        rng = random.Random(2)
        for _ in range(30):
            env = random_environment(rng, rng.randint(1, 5))
            dag = random_dag(rng, rng.randint(1, 7))
            head = np.array([s.ram_gb * rng.random() for s in env.servers])
            vec = encode_state(dag.task(rng.randrange(len(dag.tasks))), dag, env, head)
            assert vec.shape == (state_dim(env),)
            assert (vec >= 0).all() and (vec <= 1).all()

    def test_hand_computed_two_server_features(self, two_server_env):
        # Chain 0 -> 1, looking at task 1 with full headroom.
        dag = chain_dag([1000.0, 2000.0], data=2e6)
        head = np.array([4.0, 8.0])
        vec = encode_state(dag.task(1), dag, two_server_env, head)

        # Task block: id 1 of 2 -> 1.0; app 0 -> 0.0; one predecessor of a
        # possible one -> 1.0; no successors -> 0.0; cycles are the max of
        # {1000, 2000} -> 1.0; ram 0.1 of the 8 GB max -> 0.0125; inbound
        # data is the app max -> 1.0; the predecessor lies on the only
        # root-to-sink path -> 1.0.
        np.testing.assert_allclose(
            vec[:TASK_FEATURE_COUNT],
            [1.0, 0.0, 1.0, 0.0, 1.0, 0.1 / 8.0, 1.0, 1.0],
        )
        # Server block starts with 1/|N|.
        assert vec[TASK_FEATURE_COUNT] == 0.5
        # Server 0: freq 2000/4000, ram 4/8, edge tier, no cloud price,
        # electricity price at its own max, powers 5/50 and 1/4, uniform
        # links -> mean/max ratios 1, full headroom.
        np.testing.assert_allclose(
            vec[TASK_FEATURE_COUNT + 1: TASK_FEATURE_COUNT + 11],
            [0.5, 0.5, 0.0, 0.0, 1.0, 0.1, 0.25, 1.0, 1.0, 1.0],
        )

    def test_width_fixed_per_environment(self, two_server_env):
        dag_small = chain_dag([1000.0])
        dag_big = chain_dag([1000.0] * 6)
        head = np.array([4.0, 8.0])
        a = encode_state(dag_small.task(0), dag_small, two_server_env, head)
        b = encode_state(dag_big.task(3), dag_big, two_server_env, head)
        assert a.shape == b.shape


class TestFeasibleMask:
    def test_zero_demand_allows_everything(self, two_server_env):
        task = TaskSpec(0, 0, 100.0, 0.0, ())
        assert feasible_mask(task, two_server_env, np.array([0.0, 0.0])).all()

    def test_headroom_comparison(self, two_server_env):
        task = TaskSpec(0, 0, 100.0, 2.0, ())
        mask = feasible_mask(task, two_server_env, np.array([1.0, 4.0]))
        assert mask.tolist() == [False, True]

    def test_mask_soundness_against_constraint_check(self, two_server_env):
        # Any action the mask allows keeps the per-server RAM load feasible.
        rng = random.Random(5)
        dag = random_dag(rng, 6, max_ram=1.5)
        env = two_server_env
        head = np.array([s.ram_gb for s in env.servers])
        mapping = {}
        for t in dag.tasks:
            mask = feasible_mask(t, env, head)
            allowed = [i for i in range(env.size) if mask[i]]
            if not allowed:
                break
            sid = rng.choice(allowed)
            mapping[t.id] = sid
            head[sid] -= t.ram_demand
        if len(mapping) == len(dag.tasks):
            rep = check_constraints(dag, Assignment(mapping), env)
            assert rep["C4"].passed


class TestReward:
    def test_sign_flip(self):
        assert reward(0.4) == -0.4

    def test_failure_penalty(self):
        assert reward(None) == FAILURE_PENALTY == -2.0

    def test_success_range_strictly_above_penalty(self):
        for j in np.linspace(0.0, 1.0, 21):
            assert FAILURE_PENALTY < reward(float(j)) <= 0.0


class TestTransition:
    def test_behavior_prob_domain(self):
        s = np.zeros(3)
        with pytest.raises(ValidationError):
            Transition(s, 0, 0.0, 0.0, s, 1.0, np.array([True]))
        with pytest.raises(ValidationError):
            Transition(s, 0, 0.0, 0.5, s, 0.0, np.array([True]))


class TestSchedulingEnv:
    def test_topological_stepping_and_headroom_reset(self, two_server_env):
        wl = WorkloadTrace((chain_dag([1000.0, 1000.0], ram=1.5),))
        env = SchedulingEnv(two_server_env, wl)
        assert env.current_task().id == 0
        r0, _, info0 = env.step(0)
        assert not info0["failed"] and r0 <= 0
        assert env.headroom[0] == pytest.approx(4.0 - 1.5)
        r1, _, info1 = env.step(0)
        assert info1["app_boundary"]
        # New application instance: headroom back to capacity.
        assert env.headroom[0] == pytest.approx(4.0)
        done = env.pop_completed()
        assert len(done) == 1 and done[0].fully_assigned

    def test_infeasible_action_fails_task_and_continues(self):
        env_spec = make_env([edge_server(0, ram=1.0), edge_server(1, ram=1.0)])
        wl = WorkloadTrace((chain_dag([1000.0, 1000.0], ram=0.8),))
        env = SchedulingEnv(env_spec, wl)
        env.step(0)                      # headroom[0] now 0.2
        r, _, info = env.step(0)         # demand 0.8 > 0.2: fail
        assert info["failed"] and r == FAILURE_PENALTY
        done = env.pop_completed()
        assert done[0].failed_tasks == [1]

    def test_step_reward_matches_negated_step_cost(self, two_server_env):
        wl = preset_workload(label=240)
        env = SchedulingEnv(two_server_env, wl)
        rng = random.Random(0)
        for _ in range(30):
            mask = env.current_mask()
            action = rng.choice([i for i in range(2) if mask[i]])
            r, _, info = env.step(action)
            if not info["failed"]:
                assert r == -info["step_cost"]
                assert 0.0 <= info["step_cost"] <= 1.0

    def test_step_energy_totals_match_app_accounting(self, two_server_env):
        # Receiver-side energy attribution must agree with the sender-side
        # application totals once an application completes.
        wl = WorkloadTrace((diamond_dag([500.0, 1500.0, 800.0, 400.0], data=4e6),))
        env = SchedulingEnv(two_server_env, wl)
        actions = [0, 1, 0, 1]
        step_energy = 0.0
        for a in actions:
            task = env.current_task()
            sid = a
            server = two_server_env.server(sid)
            t_ex = task.cycles / server.freq_mhz
            e = t_ex * server.exec_power_w
            for pred, size in env.dag.in_edges(task.id):
                psid = env.assignment.get(pred)
                if psid is not None and psid != sid:
                    bw = two_server_env.links.bandwidth_bytes_per_s[psid, sid]
                    e += size / bw * two_server_env.server(psid).tx_power_w
            step_energy += e
            env.step(a)
        done = env.pop_completed()[0]
        breakdown = app_costs(done.dag, done.assignment, two_server_env)
        assert breakdown.energy == pytest.approx(step_energy, rel=1e-12)

    def test_wraps_around_workload(self, two_server_env):
        wl = WorkloadTrace((chain_dag([1000.0]),))
        env = SchedulingEnv(two_server_env, wl)
        for _ in range(5):
            _, _, info = env.step(0)
            assert info["app_boundary"]
        assert len(env.pop_completed()) == 5

    def test_cp_gated_mode_never_exceeds_full_cost(self, two_server_env):
        wl = preset_workload(label=240)
        full = SchedulingEnv(two_server_env, wl, cp_gated_reward=False)
        gated = SchedulingEnv(two_server_env, wl, cp_gated_reward=True)
        rng = random.Random(1)
        for _ in range(40):
            a = rng.randrange(2)
            rf, _, inf_f = full.step(a)
            rg, _, inf_g = gated.step(a)
            if not inf_f["failed"]:
                assert inf_g["step_cost"] <= inf_f["step_cost"] + 1e-12
