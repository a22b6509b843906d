"""Actor-side experience generation and learner-side policy updates.

Actors roll a scheduling environment forward under a (possibly stale) policy
snapshot, recording states, actions, rewards, behavior probabilities, and
TD-error priorities into fixed-length trajectories. The learner samples
start indices inside each received trajectory proportionally to priority,
corrects the trailing windows with truncated importance weighting, and
applies one Adam step per trajectory before publishing a new snapshot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .mdp import SchedulingEnv, Trajectory, Transition
from .network import (
    AdamState,
    LossBatch,
    LossReport,
    ParameterSet,
    adam_step,
    forward_batch,
    loss_and_gradients,
    masked_policy,
    pad_window,
)
from .replay import PrioritizedBuffer
from .vtrace import VTraceConfig, vtrace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    a_v: float = 0.5
    a_p: float = 1.0
    a_e: float = 0.01

    def __post_init__(self):
        if self.a_v < 0 or self.a_p < 0 or self.a_e < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass(frozen=True)
class LearnerConfig:
    n: int = 16                    # trajectory length
    draws_per_trajectory: int = 8  # sampled update positions per trajectory
    batch_size: int = 1            # trajectories consumed per iteration
    lr: float = 1e-3
    gamma: float = 0.99
    use_per: bool = True           # False: uniform draws with unit weights

    def __post_init__(self):
        if self.n < 1 or self.draws_per_trajectory < 1 or self.batch_size < 1:
            raise ValidationError("n, draws_per_trajectory, batch_size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValidationError("gamma must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Actor
# ---------------------------------------------------------------------------

def _window_stack(states: list[np.ndarray], context: int) -> np.ndarray:
    return pad_window(np.stack(states[-context:]), context)


def actor_episode(env: SchedulingEnv, snapshot: ParameterSet, n: int,
                  rng: np.random.Generator, gamma: float,
                  priority_epsilon: float = 1e-6) -> Trajectory:
    """Generate one n-step trajectory under the snapshot policy.

    The attention window is confined to this trajectory: it starts empty and
    grows with each step. Priorities are TD errors under the snapshot's own
    value estimates.
    """
    context = snapshot.config.context_window
    buffer = PrioritizedBuffer(capacity=n, epsilon=priority_epsilon)
    history: list[np.ndarray] = []

    state = env.current_state()
    mask = env.current_mask()
    history.append(state)
    window = _window_stack(history, context)
    logits, values, _, _ = forward_batch(snapshot, window[None])
    probs = masked_policy(logits[0], mask)
    value = float(values[0])

    for _ in range(n):
        action = int(rng.choice(len(probs), p=probs))
        r, next_state, info = env.step(action)

        history.append(next_state)
        next_mask = env.current_mask()
        next_window = _window_stack(history, context)
        logits, values, _, _ = forward_batch(snapshot, next_window[None])
        next_probs = masked_policy(logits[0], next_mask)
        next_value = float(values[0])

        td = r + gamma * next_value - value
        transition = Transition(
            state=state,
            action=action,
            reward=r,
            behavior_prob=float(probs[action]),
            next_state=next_state,
            priority=abs(td) + priority_epsilon,
            mask=mask,
            app_boundary=info["app_boundary"],
        )
        buffer.push(transition, td_error=td)

        state, mask, probs, value = next_state, next_mask, next_probs, next_value

    return Trajectory(transitions=buffer.items_fifo(),
                      behavior_version=snapshot.version)


# ---------------------------------------------------------------------------
# Learner
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryTensors:
    """Per-trajectory quantities the learner derives once under current
    parameters: windows for every state, value estimates, and target-policy
    probabilities of the taken actions."""

    windows: np.ndarray        # (n+1, K, D)
    values: np.ndarray         # (n+1,)
    target_probs: np.ndarray   # (n,)
    rewards: np.ndarray
    actions: np.ndarray
    behavior_probs: np.ndarray
    masks: np.ndarray


def prepare_trajectory(trajectory: Trajectory, params: ParameterSet) -> TrajectoryTensors:
    context = params.config.context_window
    states = trajectory.states()
    n_plus_1 = states.shape[0]
    windows = np.stack([
        pad_window(states[max(0, t - context + 1): t + 1], context)
        for t in range(n_plus_1)
    ])
    logits, values, _, _ = forward_batch(params, windows)
    masks = trajectory.masks()
    actions = trajectory.actions()
    target_probs = np.empty(len(trajectory))
    for t in range(len(trajectory)):
        target_probs[t] = masked_policy(logits[t], masks[t])[actions[t]]
    return TrajectoryTensors(
        windows=windows,
        values=values,
        target_probs=target_probs,
        rewards=trajectory.rewards(),
        actions=actions,
        behavior_probs=trajectory.behavior_probs(),
        masks=masks,
    )


def loss_components(vhat: float, value: float, log_pi_taken: float,
                    entropy_sum: float, pg_advantage: float, rho: float,
                    weights: LossWeights) -> tuple[float, float, float, float]:
    """Scalar loss pieces for one sample.

    loss_value   = (vhat - V)^2
    loss_policy  = -rho * log pi(a|s) * (r + gamma * v_next - V)
    loss_entropy = sum_a pi log pi
    """
    loss_value = (vhat - value) ** 2
    loss_policy = -rho * log_pi_taken * pg_advantage
    loss_entropy = entropy_sum
    total = (weights.a_v * loss_value + weights.a_p * loss_policy
             + weights.a_e * loss_entropy)
    return loss_value, loss_policy, loss_entropy, total


@dataclass
class SampledUpdate:
    """One sampled start index with its corrected targets."""

    start: int
    is_weight: float
    vhat: float
    rho: float
    pg_advantage: float
    delta: float


def sample_updates(trajectory: Trajectory, tensors: TrajectoryTensors,
                   learner: LearnerConfig, vtrace_cfg: VTraceConfig,
                   beta: float, rng: np.random.Generator,
                   alpha: float, priority_epsilon: float) -> list[SampledUpdate]:
    """Draw start indices by priority and run the trailing-window correction
    from each. Also refreshes the trajectory's stored priorities to the |TD|
    errors found under current parameters."""
    n = len(trajectory)
    draws = learner.draws_per_trajectory

    if learner.use_per:
        sampler = PrioritizedBuffer(capacity=n, alpha=alpha,
                                    epsilon=priority_epsilon)
        ids = [sampler.push_priority(t, p)
               for t, p in enumerate(trajectory.priorities())]
        records = sampler.sample(draws, beta=beta, rng=rng)
        picks = [(int(r.item), float(r.weight)) for r in records]
    else:
        picks = [(int(rng.integers(n)), 1.0) for _ in range(draws)]

    updates = []
    for start, weight in picks:
        res = vtrace(
            rewards=tensors.rewards[start:],
            values=tensors.values[start:-1],
            bootstrap_value=float(tensors.values[-1]),
            target_probs=tensors.target_probs[start:],
            behavior_probs=tensors.behavior_probs[start:],
            config=vtrace_cfg,
        )
        updates.append(SampledUpdate(
            start=start,
            is_weight=weight,
            vhat=float(res.targets[0]),
            rho=float(res.rho[0]),
            pg_advantage=float(res.pg_advantage[0]),
            delta=float(res.delta[0]),
        ))
        trajectory.transitions[start].priority = abs(res.delta[0]) + priority_epsilon
    return updates


def compute_losses(trajectory: Trajectory, params: ParameterSet,
                   loss_weights: LossWeights, learner: LearnerConfig,
                   vtrace_cfg: VTraceConfig, beta: float,
                   rng: np.random.Generator, alpha: float = 0.6,
                   priority_epsilon: float = 1e-6):
    """Loss scalars plus per-sample deltas for one trajectory, without
    touching parameters."""
    tensors = prepare_trajectory(trajectory, params)
    updates = sample_updates(trajectory, tensors, learner, vtrace_cfg, beta,
                             rng, alpha, priority_epsilon)
    batch = _build_loss_batch(tensors, updates)
    report, _ = loss_and_gradients(params, batch, loss_weights, compute_grads=False)
    return report, updates


def _build_loss_batch(tensors: TrajectoryTensors, updates: list[SampledUpdate]) -> LossBatch:
    starts = [u.start for u in updates]
    return LossBatch(
        windows=tensors.windows[starts],
        actions=tensors.actions[starts],
        masks=tensors.masks[starts],
        vhat=np.array([u.vhat for u in updates]),
        pg_coeff=np.array([u.rho * u.pg_advantage for u in updates]),
        is_weights=np.array([u.is_weight for u in updates]),
    )


@dataclass
class LearnerMetrics:
    mean_reward: float
    loss_value: float
    loss_policy: float
    loss_entropy: float
    loss_total: float
    mean_entropy: float
    trajectories: int


def learner_update(trajectories: list[Trajectory], params: ParameterSet,
                   opt_state: AdamState, *, loss_weights: LossWeights,
                   learner: LearnerConfig, vtrace_cfg: VTraceConfig,
                   beta: float, rng: np.random.Generator,
                   alpha: float = 0.6, priority_epsilon: float = 1e-6
                   ) -> tuple[ParameterSet, AdamState, LearnerMetrics]:
    """One learner iteration over a batch of trajectories.

    Per trajectory: draw start indices by priority, build corrected targets
    over the trailing windows, accumulate importance-weighted gradients, and
    take one Adam step. The returned parameter set carries version + 1; on
    any numeric failure the input parameters are returned untouched by the
    caller since all updates here are functional.
    """
    if not trajectories:
        raise ValidationError("learner needs at least one trajectory")

    reports: list[LossReport] = []
    current = params
    state = opt_state
    for trajectory in trajectories:
        tensors = prepare_trajectory(trajectory, current)
        updates = sample_updates(trajectory, tensors, learner, vtrace_cfg,
                                 beta, rng, alpha, priority_epsilon)
        batch = _build_loss_batch(tensors, updates)
        report, grads = loss_and_gradients(current, batch, loss_weights,
                                           compute_grads=True)
        current, state = adam_step(current, grads, state, lr=learner.lr)
        reports.append(report)

    rewards = np.concatenate([t.rewards() for t in trajectories])
    metrics = LearnerMetrics(
        mean_reward=float(rewards.mean()),
        loss_value=float(np.mean([r.loss_value for r in reports])),
        loss_policy=float(np.mean([r.loss_policy for r in reports])),
        loss_entropy=float(np.mean([r.loss_entropy for r in reports])),
        loss_total=float(np.mean([r.loss_total for r in reports])),
        mean_entropy=float(np.mean([r.mean_entropy for r in reports])),
        trajectories=len(trajectories),
    )
    published = ParameterSet(current.config, current.values, params.version + 1)
    return published, state, metrics


# ---------------------------------------------------------------------------
# Greedy evaluation
# ---------------------------------------------------------------------------

def greedy_assignment(params: ParameterSet, env_spec, dag):
    """Argmax rollout of the policy over one application; returns the
    resulting assignment mapping and the ids of tasks no server could host."""
    from .costmodel import Assignment
    from .mdp import DagFeatures, encode_state, feasible_mask

    features = DagFeatures.build(dag)
    headroom = np.array([s.ram_gb for s in env_spec.servers])
    mapping: dict[int, int] = {}
    failed: list[int] = []
    history: list[np.ndarray] = []
    context = params.config.context_window
    for tid in features.order:
        task = dag.task(tid)
        state = encode_state(task, dag, env_spec, headroom, features)
        history.append(state)
        window = _window_stack(history, context)
        logits, _, _, _ = forward_batch(params, window[None])
        mask = feasible_mask(task, env_spec, headroom)
        if not mask.any():
            failed.append(tid)
            continue
        probs = masked_policy(logits[0], mask)
        action = int(np.argmax(probs))
        mapping[tid] = action
        headroom[action] -= task.ram_demand
    return Assignment(mapping), failed


def evaluate_policy(params: ParameterSet, env_spec, instances) -> float:
    """Mean application-level weighted cost of the greedy-argmax policy.

    Instances whose placement cannot complete count as worst-case cost 1.
    """
    from .costmodel import app_costs

    costs = []
    for dag in instances:
        assignment, failed = greedy_assignment(params, env_spec, dag)
        if failed:
            costs.append(1.0)
            continue
        costs.append(app_costs(dag, assignment, env_spec).weighted)
    return float(np.mean(costs))
