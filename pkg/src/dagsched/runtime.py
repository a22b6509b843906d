"""Distributed orchestration: actor pool, trajectory transport, policy
broadcast, and the training loop.

Two transports honor the same envelope contract: in-process bounded FIFO
queues (default; single-actor runs are bitwise reproducible) and
length-prefixed binary frames over TCP for multi-host demos. Envelopes are
checksummed end to end; every envelope an actor submits is either consumed
by the learner or counted when drained at shutdown, never silently lost and
never applied twice.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import (
    LearnerConfig,
    LossWeights,
    actor_episode,
    learner_update,
)
from .costmodel import EnvironmentSpec, app_costs
from .errors import TransportError, ValidationError
from .mdp import SchedulingEnv, Trajectory, Transition, state_dim
from .network import (
    AdamState,
    NetworkConfig,
    ParameterSet,
    init_params,
    save_checkpoint,
)
from .replay import PERConfig, beta_at
from .vtrace import VTraceConfig
from .workload import WorkloadTrace

WIRE_VERSION = 1
FRAME_ENVELOPE = 1
FRAME_SNAPSHOT = 2

ENV_PORT = "DAGSCHED_PORT"
ENV_QUEUE_DEPTH = "DAGSCHED_QUEUE_DEPTH"


# ---------------------------------------------------------------------------
# Snapshot publication
# ---------------------------------------------------------------------------

class SnapshotHolder:
    """Atomically swapped, immutable policy snapshots with strictly
    increasing versions."""

    def __init__(self, initial: ParameterSet):
        self._lock = threading.Lock()
        self._snapshot = initial.copy()
        self._snapshot.values.flags.writeable = False

    def get(self) -> ParameterSet:
        with self._lock:
            return self._snapshot

    @property
    def version(self) -> int:
        return self.get().version

    def publish(self, params: ParameterSet):
        snap = params.copy()
        snap.values.flags.writeable = False
        with self._lock:
            if snap.version <= self._snapshot.version:
                raise ValidationError(
                    f"snapshot versions must increase: {snap.version} after "
                    f"{self._snapshot.version}"
                )
            self._snapshot = snap


# ---------------------------------------------------------------------------
# Envelopes and wire format
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryEnvelope:
    envelope_id: int
    actor_id: int
    policy_version: int
    trajectory: Trajectory
    checksum: bytes
    submit_version: int = -1   # learner version when submitted; not serialized

    def verify(self):
        if trajectory_checksum(self.trajectory) != self.checksum:
            raise TransportError(
                f"envelope {self.envelope_id}: trajectory checksum mismatch"
            )


def serialize_trajectory(traj: Trajectory) -> bytes:
    states = traj.states().astype("<f8")
    n, dim = len(traj), states.shape[1]
    masks = traj.masks().astype("<i8")
    header = np.array([WIRE_VERSION, traj.behavior_version, n, dim,
                       masks.shape[1]], dtype="<i8")
    bounds = np.array([t.app_boundary for t in traj.transitions], dtype="<i8")
    parts = [header.tobytes(), states.tobytes(),
             traj.actions().astype("<i8").tobytes(),
             traj.rewards().astype("<f8").tobytes(),
             traj.behavior_probs().astype("<f8").tobytes(),
             traj.priorities().astype("<f8").tobytes(),
             masks.tobytes(), bounds.tobytes()]
    return b"".join(parts)


def deserialize_trajectory(data: bytes) -> Trajectory:
    header = np.frombuffer(data[:40], dtype="<i8")
    wire, behavior_version, n, dim, actions_n = (int(x) for x in header)
    if wire != WIRE_VERSION:
        raise TransportError(f"unsupported wire version {wire}")
    off = 40

    def take(count, dtype):
        nonlocal off
        width = np.dtype(dtype).itemsize * count
        arr = np.frombuffer(data[off:off + width], dtype=dtype)
        off += width
        return arr

    states = take((n + 1) * dim, "<f8").reshape(n + 1, dim).astype(np.float64)
    actions = take(n, "<i8")
    rewards = take(n, "<f8")
    probs = take(n, "<f8")
    priorities = take(n, "<f8")
    masks = take(n * actions_n, "<i8").reshape(n, actions_n).astype(bool)
    bounds = take(n, "<i8")
    if off != len(data):
        raise TransportError("trajectory payload has trailing bytes")
    transitions = [
        Transition(
            state=states[t],
            action=int(actions[t]),
            reward=float(rewards[t]),
            behavior_prob=float(probs[t]),
            next_state=states[t + 1],
            priority=float(priorities[t]),
            mask=masks[t],
            app_boundary=bool(bounds[t]),
        )
        for t in range(n)
    ]
    return Trajectory(transitions=transitions, behavior_version=behavior_version)


def trajectory_checksum(traj: Trajectory) -> bytes:
    return hashlib.sha256(serialize_trajectory(traj)).digest()


def make_envelope(envelope_id: int, actor_id: int, trajectory: Trajectory) -> TrajectoryEnvelope:
    return TrajectoryEnvelope(
        envelope_id=envelope_id,
        actor_id=actor_id,
        policy_version=trajectory.behavior_version,
        trajectory=trajectory,
        checksum=trajectory_checksum(trajectory),
    )


def serialize_envelope(env: TrajectoryEnvelope) -> bytes:
    body = serialize_trajectory(env.trajectory)
    header = np.array([FRAME_ENVELOPE, WIRE_VERSION, env.envelope_id,
                       env.actor_id, env.policy_version, len(body)], dtype="<i8")
    return header.tobytes() + body + env.checksum


def deserialize_envelope(data: bytes) -> TrajectoryEnvelope:
    header = np.frombuffer(data[:48], dtype="<i8")
    kind, wire, envelope_id, actor_id, policy_version, body_len = (int(x) for x in header)
    if kind != FRAME_ENVELOPE or wire != WIRE_VERSION:
        raise TransportError("not an envelope frame")
    body = data[48:48 + body_len]
    checksum = data[48 + body_len:]
    if len(checksum) != 32:
        raise TransportError("envelope missing checksum")
    if hashlib.sha256(body).digest() != checksum:
        raise TransportError(f"envelope {envelope_id}: checksum mismatch on the wire")
    traj = deserialize_trajectory(body)
    return TrajectoryEnvelope(
        envelope_id=envelope_id,
        actor_id=actor_id,
        policy_version=policy_version,
        trajectory=traj,
        checksum=checksum,
    )


def serialize_snapshot(params: ParameterSet) -> bytes:
    payload = np.ascontiguousarray(params.values, dtype="<f8").tobytes()
    header = np.array([FRAME_SNAPSHOT, WIRE_VERSION, params.version,
                       params.values.size], dtype="<i8")
    digest = params.config.digest().encode("ascii")
    return header.tobytes() + digest + payload + hashlib.sha256(payload).digest()


def deserialize_snapshot(data: bytes, config: NetworkConfig) -> ParameterSet:
    header = np.frombuffer(data[:32], dtype="<i8")
    kind, wire, version, count = (int(x) for x in header)
    if kind != FRAME_SNAPSHOT or wire != WIRE_VERSION:
        raise TransportError("not a snapshot frame")
    digest = data[32:96].decode("ascii")
    if digest != config.digest():
        raise TransportError("snapshot was built for a different network config")
    payload = data[96:96 + count * 8]
    checksum = data[96 + count * 8:]
    if hashlib.sha256(payload).digest() != checksum:
        raise TransportError("snapshot checksum mismatch on the wire")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ParameterSet(config=config, values=values, version=version)


def send_frame(sock: socket.socket, payload: bytes):
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def recv_frame(sock: socket.socket) -> bytes | None:
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack(">I", head)
    return _recv_exact(sock, length)


def _recv_exact(sock: socket.socket, count: int) -> bytes | None:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# TCP transport
# ---------------------------------------------------------------------------

class TcpLearnerServer:
    """Accepts actor connections, feeds their envelopes into a bounded queue,
    and pushes policy snapshots back down every connection.

    ``ingested`` counts envelopes that arrived intact; ``dropped`` counts
    envelopes discarded because shutdown hit while the queue was full. Every
    ingested envelope is eventually queued or counted dropped, so transport
    accounting stays conserved.
    """

    def __init__(self, inbox: "queue.Queue", host: str = "127.0.0.1",
                 port: int | None = None):
        if port is None:
            port = int(os.environ.get(ENV_PORT, "0"))
        self.inbox = inbox
        self.ingested = 0
        self.dropped = 0
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()
        self._conns: list[socket.socket] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._readers: list[threading.Thread] = []
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        self._acceptor.start()

    def _accept_loop(self):
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            reader = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            with self._lock:
                self._conns.append(conn)
                self._readers.append(reader)
            reader.start()

    def _read_loop(self, conn: socket.socket):
        while True:
            try:
                payload = recv_frame(conn)
            except OSError:
                break
            if payload is None:
                break
            envelope = deserialize_envelope(payload)
            envelope.submit_version = -1
            with self._lock:
                self.ingested += 1
            while True:
                try:
                    self.inbox.put(envelope, timeout=0.2)
                    break
                except queue.Full:
                    if self._stop.is_set():
                        with self._lock:
                            self.dropped += 1
                        break

    def quiesce(self):
        """Wait for reader threads to finish flushing closed connections."""
        with self._lock:
            readers = list(self._readers)
        for r in readers:
            r.join(timeout=5.0)

    def broadcast(self, params: ParameterSet):
        frame = serialize_snapshot(params)
        with self._lock:
            for conn in list(self._conns):
                try:
                    send_frame(conn, frame)
                except OSError:
                    self._conns.remove(conn)

    def begin_shutdown(self):
        self._stop.set()

    def close(self):
        self._stop.set()
        with self._lock:
            for conn in self._conns:
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                conn.close()
            self._conns.clear()
        self._sock.close()


class TcpActorClient:
    """One actor's connection to the learner: submits envelopes, keeps the
    most recent snapshot pushed by the learner."""

    def __init__(self, host: str, port: int, config: NetworkConfig,
                 initial: ParameterSet):
        self.config = config
        self._sock = socket.create_connection((host, port))
        self._latest = initial
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        while not self._stop.is_set():
            try:
                payload = recv_frame(self._sock)
            except OSError:
                break
            if payload is None:
                break
            snapshot = deserialize_snapshot(payload, self.config)
            with self._lock:
                if snapshot.version > self._latest.version:
                    self._latest = snapshot

    def submit(self, envelope: TrajectoryEnvelope):
        send_frame(self._sock, serialize_envelope(envelope))

    def latest_snapshot(self) -> ParameterSet:
        with self._lock:
            return self._latest

    def close(self):
        self._stop.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


# ---------------------------------------------------------------------------
# Training configuration and bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class TrainingConfig:
    fc_units: tuple[int, ...] = (256, 256, 128)
    tf_units: int = 2
    heads: int = 4
    head_dim: int = 32
    mlp_dim: int = 32
    context_window: int = 8

    n: int = 16
    draws_per_trajectory: int = 8
    trajectories_per_actor: int = 1
    lr: float = 1e-3
    gamma: float = 0.99

    c_bar: float = 1.0
    rho_bar: float = 1.0

    alpha: float = 0.6
    beta0: float = 0.4
    priority_epsilon: float = 1e-6
    use_per: bool = True

    a_v: float = 0.5
    a_p: float = 1.0
    a_e: float = 0.01

    cp_gated_reward: bool = False
    refresh_period: int = 1          # actor snapshot refresh cadence, in trajectories
    queue_depth: int = 8
    min_batch: int = 1
    checkpoint_interval: int = 0     # 0: final checkpoint only

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainingConfig":
        base = dict(fc_units=(32, 32, 16), tf_units=1, heads=2, head_dim=8,
                    mlp_dim=16, context_window=8)
        base.update(overrides)
        return cls(**base)

    def network_config(self, input_dim: int, action_count: int) -> NetworkConfig:
        if self.tf_units == 0:
            return NetworkConfig.feedforward(input_dim, action_count, self.fc_units)
        return NetworkConfig(
            input_dim=input_dim, action_count=action_count,
            fc_units=tuple(self.fc_units), tf_units=self.tf_units,
            heads=self.heads, head_dim=self.head_dim, mlp_dim=self.mlp_dim,
            context_window=self.context_window,
        )

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(n=self.n, draws_per_trajectory=self.draws_per_trajectory,
                             batch_size=max(1, self.min_batch), lr=self.lr,
                             gamma=self.gamma, use_per=self.use_per)

    def vtrace_config(self) -> VTraceConfig:
        return VTraceConfig(gamma=self.gamma, c_bar=self.c_bar, rho_bar=self.rho_bar)

    def loss_weights(self) -> LossWeights:
        return LossWeights(a_v=self.a_v, a_p=self.a_p, a_e=self.a_e)

    def to_dict(self) -> dict:
        doc = dict(self.__dict__)
        doc["fc_units"] = list(self.fc_units)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainingConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "fc_units" in doc:
            doc["fc_units"] = tuple(doc["fc_units"])
        return cls(**doc)


@dataclass
class TransportCounters:
    produced: int = 0
    submitted: int = 0
    consumed: int = 0
    drained: int = 0
    dropped_by_actor: int = 0       # built but never submitted (shutdown)
    dropped_in_transport: int = 0   # submitted, explicitly discarded at shutdown
    duplicates: int = 0
    max_version_lag: int = 0

    @property
    def lost(self) -> int:
        """Submitted envelopes with no recorded fate; must stay 0."""
        return (self.submitted - self.consumed - self.drained
                - self.dropped_in_transport)


@dataclass
class RunResult:
    out_dir: Path
    checkpoint_path: Path
    metrics_path: Path
    final_params: ParameterSet
    counters: TransportCounters
    iterations: int
    eval_curve: list[tuple[int, float]] = field(default_factory=list)


METRIC_FIELDS = [
    "iteration", "mean_reward", "loss_value", "loss_policy", "loss_entropy",
    "loss_total", "mean_entropy", "policy_version", "envelopes_consumed",
    "apps_completed", "apps_failed", "mean_app_t", "mean_app_e", "mean_app_f",
    "mean_app_j", "eval_j", "wall_clock_s",
]


class _AppCostLog:
    """Thread-safe sink for completed-application costs."""

    def __init__(self, env_spec: EnvironmentSpec):
        self.env_spec = env_spec
        self._lock = threading.Lock()
        self._rows: list[tuple[float, float, float, float]] = []
        self._failed = 0

    def record(self, completed):
        for app in completed:
            if not app.fully_assigned:
                with self._lock:
                    self._failed += 1
                continue
            b = app_costs(app.dag, app.assignment, self.env_spec)
            with self._lock:
                self._rows.append((b.response_time, b.energy, b.monetary, b.weighted))

    def drain(self):
        with self._lock:
            rows, self._rows = self._rows, []
            failed, self._failed = self._failed, 0
        if rows:
            arr = np.asarray(rows)
            means = arr.mean(axis=0)
        else:
            means = (float("nan"),) * 4
        return len(rows), failed, tuple(float(m) for m in means)


class _Actor:
    """One experience generator: owns an environment copy and an rng."""

    def __init__(self, actor_id: int, env_spec: EnvironmentSpec,
                 workload: WorkloadTrace, config: TrainingConfig,
                 seed_seq: np.random.SeedSequence, cost_log: _AppCostLog):
        self.actor_id = actor_id
        self.env = SchedulingEnv(env_spec, workload,
                                 cp_gated_reward=config.cp_gated_reward)
        self.rng = np.random.default_rng(seed_seq)
        self.config = config
        self.cost_log = cost_log
        self.snapshot: ParameterSet | None = None
        self.trajectories_built = 0
        self.next_envelope = 0

    def maybe_refresh(self, holder: SnapshotHolder):
        period = max(1, self.config.refresh_period)
        if self.snapshot is None or self.trajectories_built % period == 0:
            self.snapshot = holder.get()

    def build(self) -> TrajectoryEnvelope:
        traj = actor_episode(self.env, self.snapshot, n=self.config.n,
                             rng=self.rng, gamma=self.config.gamma,
                             priority_epsilon=self.config.priority_epsilon)
        self.trajectories_built += 1
        self.cost_log.record(self.env.pop_completed())
        envelope_id = (self.actor_id << 40) | self.next_envelope
        self.next_envelope += 1
        return make_envelope(envelope_id, self.actor_id, traj)


class _Learner:
    def __init__(self, params: ParameterSet, config: TrainingConfig,
                 iterations: int, rng: np.random.Generator):
        self.params = params
        self.opt_state = AdamState.zeros(params.values.size)
        self.config = config
        self.rng = rng
        self.per = PERConfig(alpha=config.alpha, beta0=config.beta0,
                             total_iterations=max(1, iterations),
                             epsilon=config.priority_epsilon,
                             capacity=max(config.n, 1))
        self.seen_ids: set[int] = set()

    def consume(self, envelopes: list[TrajectoryEnvelope],
                counters: TransportCounters, holder: SnapshotHolder,
                iteration: int):
        fresh = []
        for env in envelopes:
            env.verify()
            if env.envelope_id in self.seen_ids:
                counters.duplicates += 1
                continue
            self.seen_ids.add(env.envelope_id)
            if env.submit_version >= 0:
                lag = holder.version - env.submit_version
                counters.max_version_lag = max(counters.max_version_lag, lag)
            fresh.append(env)
        counters.consumed += len(fresh)
        if not fresh:
            return None
        beta = beta_at(self.per, iteration)
        self.params, self.opt_state, metrics = learner_update(
            [e.trajectory for e in fresh], self.params, self.opt_state,
            loss_weights=self.config.loss_weights(),
            learner=self.config.learner_config(),
            vtrace_cfg=self.config.vtrace_config(),
            beta=beta, rng=self.rng, alpha=self.config.alpha,
            priority_epsilon=self.config.priority_epsilon)
        holder.publish(self.params)
        return metrics


# ---------------------------------------------------------------------------
# Training entry point
# ---------------------------------------------------------------------------

def run_training(env_spec: EnvironmentSpec, workload: WorkloadTrace,
                 config: TrainingConfig, actor_count: int, iterations: int,
                 seed: int, out_dir, mode: str = "sync",
                 transport: str = "memory", eval_fn=None,
                 eval_every: int = 0) -> RunResult:
    """Run the actor/learner loop and leave a checkpoint plus metrics CSV in
    ``out_dir``.

    ``mode="sync"`` steps every actor round-robin in the calling thread
    (deterministic given the seed); ``mode="threads"`` runs actors on
    threads behind a bounded queue. ``transport="tcp"`` routes envelopes and
    snapshots through localhost sockets instead of the in-process queue.
    """
    if actor_count < 1 or iterations < 1:
        raise ValidationError("actor_count and iterations must be >= 1")
    if mode not in ("sync", "threads"):
        raise ValidationError(f"unknown mode {mode!r}")
    if transport not in ("memory", "tcp"):
        raise ValidationError(f"unknown transport {transport!r}")
    if mode == "sync" and transport == "tcp":
        raise ValidationError("tcp transport requires mode='threads'")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    checkpoint_path = out_dir / "checkpoint.ckpt"

    net_config = config.network_config(state_dim(env_spec), env_spec.size)
    seeds = np.random.SeedSequence(seed).spawn(actor_count + 2)
    params = init_params(net_config, seed)
    holder = SnapshotHolder(params)
    cost_log = _AppCostLog(env_spec)
    actors = [
        _Actor(i, env_spec, workload, config, seeds[i], cost_log)
        for i in range(actor_count)
    ]
    learner = _Learner(params, config, iterations,
                       np.random.default_rng(seeds[actor_count]))
    counters = TransportCounters()
    start = time.perf_counter()
    eval_curve: list[tuple[int, float]] = []

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()

        def log_iteration(iteration, metrics, consumed):
            if metrics is None:  # every envelope in the batch was a duplicate
                return
            apps_done, apps_failed, means = cost_log.drain()
            eval_j = ""
            if eval_fn is not None and eval_every > 0 and (
                    (iteration + 1) % eval_every == 0 or iteration == iterations - 1):
                eval_j = float(eval_fn(learner.params))
                eval_curve.append((iteration, eval_j))
            writer.writerow({
                "iteration": iteration,
                "mean_reward": metrics.mean_reward,
                "loss_value": metrics.loss_value,
                "loss_policy": metrics.loss_policy,
                "loss_entropy": metrics.loss_entropy,
                "loss_total": metrics.loss_total,
                "mean_entropy": metrics.mean_entropy,
                "policy_version": learner.params.version,
                "envelopes_consumed": consumed,
                "apps_completed": apps_done,
                "apps_failed": apps_failed,
                "mean_app_t": means[0],
                "mean_app_e": means[1],
                "mean_app_f": means[2],
                "mean_app_j": means[3],
                "eval_j": eval_j,
                "wall_clock_s": time.perf_counter() - start,
            })
            if config.checkpoint_interval > 0 and (
                    (iteration + 1) % config.checkpoint_interval == 0):
                save_checkpoint(learner.params, checkpoint_path)

        if mode == "sync":
            _run_sync(actors, learner, holder, counters, iterations,
                      config, log_iteration)
        else:
            _run_threads(actors, learner, holder, counters, iterations,
                         config, log_iteration, transport, net_config)

    save_checkpoint(learner.params, checkpoint_path)
    return RunResult(
        out_dir=out_dir,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        final_params=learner.params,
        counters=counters,
        iterations=iterations,
        eval_curve=eval_curve,
    )


def _run_sync(actors, learner, holder, counters, iterations, config,
              log_iteration):
    for iteration in range(iterations):
        envelopes = []
        for actor in actors:
            for _ in range(max(1, config.trajectories_per_actor)):
                actor.maybe_refresh(holder)
                envelope = actor.build()
                envelope.submit_version = holder.version
                counters.produced += 1
                counters.submitted += 1
                envelopes.append(envelope)
        metrics = learner.consume(envelopes, counters, holder, iteration)
        log_iteration(iteration, metrics, len(envelopes))


def _run_threads(actors, learner, holder, counters, iterations, config,
                 log_iteration, transport, net_config):
    depth = int(os.environ.get(ENV_QUEUE_DEPTH, str(config.queue_depth)))
    inbox: queue.Queue = queue.Queue(maxsize=max(1, depth))
    stop = threading.Event()
    lock = threading.Lock()

    server = None
    clients: list[TcpActorClient] = []
    if transport == "tcp":
        server = TcpLearnerServer(inbox)

    def actor_loop(actor: _Actor):
        client = None
        if transport == "tcp":
            client = TcpActorClient(server.host, server.port, net_config,
                                    holder.get())
            with lock:
                clients.append(client)
        try:
            while not stop.is_set():
                if transport == "tcp":
                    snap = client.latest_snapshot()
                    period = max(1, actor.config.refresh_period)
                    if actor.snapshot is None or actor.trajectories_built % period == 0:
                        actor.snapshot = snap
                else:
                    actor.maybe_refresh(holder)
                envelope = actor.build()
                with lock:
                    counters.produced += 1
                if transport == "tcp":
                    # Submission is counted at the server when the envelope
                    # arrives intact.
                    try:
                        client.submit(envelope)
                    except OSError:
                        with lock:
                            counters.dropped_by_actor += 1
                        return
                    continue
                envelope.submit_version = holder.version
                while not stop.is_set():
                    try:
                        inbox.put(envelope, timeout=0.1)
                        with lock:
                            counters.submitted += 1
                        break
                    except queue.Full:
                        continue
                else:
                    with lock:
                        counters.dropped_by_actor += 1
        finally:
            if client is not None:
                client.close()

    threads = [threading.Thread(target=actor_loop, args=(a,), daemon=True)
               for a in actors]
    for t in threads:
        t.start()

    try:
        for iteration in range(iterations):
            batch = [inbox.get()]
            while len(batch) < max(1, config.min_batch):
                batch.append(inbox.get())
            # Opportunistically fold in whatever already arrived.
            limit = max(4 * max(1, config.min_batch), len(batch))
            while len(batch) < limit:
                try:
                    batch.append(inbox.get_nowait())
                except queue.Empty:
                    break
            metrics = learner.consume(batch, counters, holder, iteration)
            if transport == "tcp":
                server.broadcast(learner.params)
            log_iteration(iteration, metrics, len(batch))
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=5.0)
        if server is not None:
            # Actors are done and their connections closed; let readers
            # flush anything already on the wire, draining as they go so a
            # full queue cannot wedge them.
            server.begin_shutdown()
            deadline = time.monotonic() + 5.0
            while time.monotonic() < deadline:
                while True:
                    try:
                        inbox.get_nowait()
                        counters.drained += 1
                    except queue.Empty:
                        break
                if not any(r.is_alive() for r in server._readers):
                    break
                time.sleep(0.01)
            server.quiesce()
        while True:
            try:
                inbox.get_nowait()
                counters.drained += 1
            except queue.Empty:
                break
        if server is not None:
            counters.submitted += server.ingested
            counters.dropped_in_transport += server.dropped
            server.close()
