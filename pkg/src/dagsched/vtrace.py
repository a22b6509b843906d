"""Truncated importance-weighted value corrections for off-policy learning.

Given an n-step trajectory collected under a behavior policy mu, the
correction builds value targets for the current target policy pi:

    target(s_x) = V(s_x) + sum_{t=x}^{x+n-1} gamma^(t-x) (prod_{i=x}^{t-1} c_i) d_t
    d_t         = rho_t * (r_t + gamma * V(s_{t+1}) - V(s_t))
    c_i         = min(c_bar,  pi(a_i|s_i) / mu(a_i|s_i))
    rho_t       = min(rho_bar, pi(a_t|s_t) / mu(a_t|s_t))

with the empty product equal to 1 and V(s_n) supplied as a bootstrap value.
Ratios are formed in log space so tiny probabilities do not underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class VTraceConfig:
    gamma: float = 0.99
    c_bar: float = 1.0
    rho_bar: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ValidationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.c_bar <= 0 or self.rho_bar <= 0:
            raise ValidationError("truncation levels must be positive")
        if self.c_bar > self.rho_bar:
            raise ValidationError(
                f"c_bar must not exceed rho_bar, got c_bar={self.c_bar} rho_bar={self.rho_bar}"
            )


@dataclass(frozen=True)
class VTraceResult:
    targets: np.ndarray        # corrected value targets per step
    rho: np.ndarray            # truncated ratios used in the TD terms
    c: np.ndarray              # truncated ratios chaining corrections backward
    delta: np.ndarray          # truncated TD errors
    pg_advantage: np.ndarray   # r_x + gamma * target(s_{x+1}) - V(s_x)


def vtrace(rewards, values, bootstrap_value: float, target_probs,
           behavior_probs, config: VTraceConfig) -> VTraceResult:
    """Apply the n-step correction to one trajectory.

    All sequence arguments must share length n >= 1. ``values`` are the
    current value estimates at the n visited states; ``bootstrap_value``
    estimates the state after the last transition. Probabilities are the
    probabilities of the actions actually taken.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    pi = np.asarray(target_probs, dtype=np.float64)
    mu = np.asarray(behavior_probs, dtype=np.float64)

    n = r.shape[0]
    if n < 1:
        raise ValidationError("trajectory must contain at least one step")
    for name, arr in (("values", v), ("target_probs", pi), ("behavior_probs", mu)):
        if arr.shape != (n,):
            raise ValidationError(f"{name} has shape {arr.shape}, expected ({n},)")
    if (mu <= 0).any():
        raise ValidationError("behavior probabilities must be strictly positive")
    if (pi < 0).any():
        raise ValidationError("target probabilities must be non-negative")

    with np.errstate(divide="ignore"):
        log_ratio = np.log(pi) - np.log(mu)
    ratio = np.exp(log_ratio)
    rho = np.minimum(config.rho_bar, ratio)
    c = np.minimum(config.c_bar, ratio)

    gamma = config.gamma
    next_v = np.append(v[1:], bootstrap_value)
    delta = rho * (r + gamma * next_v - v)

    # Backward recursion: correction(x) = delta_x + gamma * c_x * correction(x+1).
    correction = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = delta[t] + gamma * c[t] * acc
        correction[t] = acc
    targets = v + correction

    next_target = np.append(targets[1:], bootstrap_value)
    pg_advantage = r + gamma * next_target - v

    return VTraceResult(targets=targets, rho=rho, c=c, delta=delta,
                        pg_advantage=pg_advantage)


def target_policy_pi_rho(mu, pi, rho_bar: float) -> np.ndarray:
    """The policy whose value function the truncated correction converges to:
    pointwise min(rho_bar * mu, pi), renormalized."""
    mu = np.asarray(mu, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if mu.shape != pi.shape:
        raise ValidationError("distributions must share a shape")
    if (mu < 0).any() or (pi < 0).any():
        raise ValidationError("distributions must be non-negative")
    unnormalized = np.minimum(rho_bar * mu, pi)
    z = unnormalized.sum()
    if z <= 0:
        raise ValidationError("zero normalizer: min(rho_bar * mu, pi) vanishes everywhere")
    return unnormalized / z
