import csv
import socket

import numpy as np
import pytest

from dagsched.agent import actor_episode
from dagsched.errors import TransportError, ValidationError
from dagsched.mdp import SchedulingEnv, state_dim
from dagsched.network import NetworkConfig, init_params, load_checkpoint
from dagsched.runtime import (
    SnapshotHolder,
    TrainingConfig,
    deserialize_envelope,
    deserialize_snapshot,
    make_envelope,
    recv_frame,
    run_training,
    send_frame,
    serialize_envelope,
    serialize_snapshot,
    serialize_trajectory,
    deserialize_trajectory,
    run_training as _run_training,
)
from dagsched.workload import preset_workload


def small_config(**overrides):
    defaults = dict(n=6, draws_per_trajectory=3, context_window=4,
                    fc_units=(16, 8), tf_units=1, heads=2, head_dim=4,
                    mlp_dim=8)
    defaults.update(overrides)
    return TrainingConfig(**defaults)


@pytest.fixture
def sample_trajectory(two_server_env):
    wl = preset_workload(label=240)
    env = SchedulingEnv(two_server_env, wl)
    cfg = NetworkConfig.desk_scale(input_dim=state_dim(two_server_env),
                                   action_count=2, context_window=4)
    params = init_params(cfg, 0)
    traj = actor_episode(env, params, n=6, rng=np.random.default_rng(0), gamma=0.99)
    return traj, cfg, params


class TestSnapshotHolder:
    def test_versions_strictly_increase(self, sample_trajectory):
        _, _, params = sample_trajectory
        holder = SnapshotHolder(params)
        newer = params.copy(version=1)
        holder.publish(newer)
        assert holder.version == 1
        with pytest.raises(ValidationError):
            holder.publish(params.copy(version=1))

    def test_snapshots_are_read_only(self, sample_trajectory):
        _, _, params = sample_trajectory
        holder = SnapshotHolder(params)
        snap = holder.get()
        with pytest.raises(ValueError):
            snap.values[0] = 1.0


class TestSerialization:
    def test_trajectory_round_trip_is_bit_exact(self, sample_trajectory):
        traj, _, _ = sample_trajectory
        data = serialize_trajectory(traj)
        again = deserialize_trajectory(data)
        assert serialize_trajectory(again) == data
        assert np.array_equal(again.states(), traj.states())
        assert np.array_equal(again.actions(), traj.actions())
        assert again.behavior_version == traj.behavior_version

    def test_envelope_round_trip(self, sample_trajectory):
        traj, _, _ = sample_trajectory
        env = make_envelope(envelope_id=7, actor_id=2, trajectory=traj)
        env.verify()
        data = serialize_envelope(env)
        back = deserialize_envelope(data)
        assert back.envelope_id == 7 and back.actor_id == 2
        assert back.policy_version == traj.behavior_version
        back.verify()

    def test_envelope_corruption_detected(self, sample_trajectory):
        traj, _, _ = sample_trajectory
        data = bytearray(serialize_envelope(make_envelope(1, 0, traj)))
        data[100] ^= 0xFF
        with pytest.raises(TransportError):
            deserialize_envelope(bytes(data))

    def test_snapshot_round_trip(self, sample_trajectory):
        _, cfg, params = sample_trajectory
        data = serialize_snapshot(params.copy(version=3))
        back = deserialize_snapshot(data, cfg)
        assert back.version == 3
        assert np.array_equal(back.values, params.values)

    def test_snapshot_config_mismatch_detected(self, sample_trajectory):
        _, cfg, params = sample_trajectory
        other = NetworkConfig.desk_scale(input_dim=cfg.input_dim,
                                         action_count=cfg.action_count + 1,
                                         context_window=4)
        with pytest.raises(TransportError):
            deserialize_snapshot(serialize_snapshot(params), other)

    def test_wire_frames_over_socketpair(self, sample_trajectory):
        traj, _, _ = sample_trajectory
        envelope = make_envelope(5, 1, traj)
        a, b = socket.socketpair()
        try:
            send_frame(a, serialize_envelope(envelope))
            payload = recv_frame(b)
            assert deserialize_envelope(payload).envelope_id == 5
        finally:
            a.close()
            b.close()

    def test_corruption_detected_over_the_wire(self, sample_trajectory):
        traj, _, _ = sample_trajectory
        envelope = make_envelope(6, 1, traj)
        frame = bytearray(serialize_envelope(envelope))
        frame[60] ^= 0x01
        a, b = socket.socketpair()
        try:
            send_frame(a, bytes(frame))
            payload = recv_frame(b)
            with pytest.raises(TransportError):
                deserialize_envelope(payload)
        finally:
            a.close()
            b.close()


def read_metrics(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestRunTrainingSync:
    def test_single_actor_is_bitwise_reproducible(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        results = []
        for run in range(2):
            out = tmp_path / f"run{run}"
            res = run_training(two_server_env, wl, small_config(), actor_count=1,
                               iterations=5, seed=123, out_dir=out)
            results.append(res)
        a, b = results
        assert np.array_equal(a.final_params.values, b.final_params.values)
        assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
        rows_a, rows_b = read_metrics(a.metrics_path), read_metrics(b.metrics_path)
        for ra, rb in zip(rows_a, rows_b):
            for key in ("mean_reward", "loss_total", "policy_version"):
                assert ra[key] == rb[key]

    def test_different_seeds_differ(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        a = run_training(two_server_env, wl, small_config(), 1, 3, 1, tmp_path / "a")
        b = run_training(two_server_env, wl, small_config(), 1, 3, 2, tmp_path / "b")
        assert not np.array_equal(a.final_params.values, b.final_params.values)

    def test_four_actors_consume_at_least_four_per_iteration(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        res = run_training(two_server_env, wl, small_config(), actor_count=4,
                           iterations=3, seed=5, out_dir=tmp_path / "four")
        for row in read_metrics(res.metrics_path):
            assert int(row["envelopes_consumed"]) >= 4
        assert res.counters.lost == 0
        assert res.counters.duplicates == 0

    def test_version_advances_once_per_iteration(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        res = run_training(two_server_env, wl, small_config(), 2, 4, 9,
                           tmp_path / "v")
        versions = [int(r["policy_version"]) for r in read_metrics(res.metrics_path)]
        assert versions == [1, 2, 3, 4]

    def test_checkpoint_loads_back(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        res = run_training(two_server_env, wl, small_config(), 1, 3, 11,
                           tmp_path / "ck")
        loaded = load_checkpoint(res.checkpoint_path)
        assert loaded.version == 3
        assert np.array_equal(loaded.values, res.final_params.values)

    def test_refresh_period_caps_staleness(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        cfg = small_config(refresh_period=3)
        res = run_training(two_server_env, wl, cfg, 1, 7, 13, tmp_path / "stale")
        assert res.counters.lost == 0

    def test_eval_hook_runs(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        calls = []

        def fake_eval(params):
            calls.append(params.version)
            return 0.5

        res = run_training(two_server_env, wl, small_config(), 1, 4, 17,
                           tmp_path / "ev", eval_fn=fake_eval, eval_every=2)
        assert len(res.eval_curve) == 2
        assert calls  # ran at least once


class TestRunTrainingThreads:
    def test_clean_shutdown_loses_nothing(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        res = run_training(two_server_env, wl, small_config(queue_depth=4),
                           actor_count=4, iterations=6, seed=3,
                           out_dir=tmp_path / "threads", mode="threads")
        c = res.counters
        assert c.lost == 0
        assert c.duplicates == 0
        assert c.consumed >= 6
        assert c.submitted == c.consumed + c.drained + c.dropped_in_transport

    def test_version_lag_bounded_by_queue_depth(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        depth = 3
        res = run_training(two_server_env, wl, small_config(queue_depth=depth),
                           actor_count=2, iterations=10, seed=7,
                           out_dir=tmp_path / "lag", mode="threads")
        assert res.counters.max_version_lag <= depth + 1

    def test_tcp_transport_round_trips(self, two_server_env, tmp_path):
        wl = preset_workload(label=240)
        res = run_training(two_server_env, wl, small_config(queue_depth=4),
                           actor_count=2, iterations=4, seed=21,
                           out_dir=tmp_path / "tcp", mode="threads",
                           transport="tcp")
        c = res.counters
        assert c.consumed >= 4
        assert c.lost == 0
        rows = read_metrics(res.metrics_path)
        assert len(rows) == 4

    def test_sync_with_tcp_rejected(self, two_server_env, tmp_path):
        with pytest.raises(ValidationError):
            run_training(two_server_env, preset_workload(240), small_config(),
                         1, 1, 0, tmp_path / "x", mode="sync", transport="tcp")


class TestTrainingConfigRoundTrip:
    def test_dict_round_trip(self):
        cfg = small_config(use_per=False, cp_gated_reward=True)
        doc = cfg.to_dict()
        again = TrainingConfig.from_dict(doc)
        assert again == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError):
            TrainingConfig.from_dict({"nonsense": 1})
