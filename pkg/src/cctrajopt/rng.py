"""Counter-based random streams for reproducible, schedule-independent rollouts.

Every rollout draws all of its noise from a Philox stream keyed by
(seed, iteration, rollout index), in one fixed order. Results therefore do
not depend on how rollouts are scheduled or batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, iteration: int = 0, rollout: int = 0) -> np.random.Generator:
    """Generator for one rollout's noise, keyed by (seed, iteration, rollout)."""
    if not (0 <= iteration < 2**32 and 0 <= rollout < 2**32):
        raise ValueError("iteration and rollout must fit in 32 bits")
    key = np.array([seed & _MASK64, (iteration << 32) | rollout], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class RolloutNoise:
    """Pre-drawn noise for one rollout, in the order it is consumed."""

    init: np.ndarray        # (n,) standard normal, initial-state perturbation
    dither: np.ndarray      # (T, m) standard normal, action exploration
    action: np.ndarray      # (T, m) standard normal, actuator noise
    process: np.ndarray     # (T, n) standard normal, process noise


def rollout_noise(seed: int, iteration: int, rollout: int, horizon: int,
                  state_dim: int, action_dim: int) -> RolloutNoise:
    """Draw a rollout's full noise block from its stream.

    Draw order is fixed (init, dither, action, process) so that trajectories
    are bit-reproducible for a given (seed, iteration, rollout).
    """
    g = stream(seed, iteration, rollout)
    return RolloutNoise(
        init=g.standard_normal(state_dim),
        dither=g.standard_normal((horizon, action_dim)),
        action=g.standard_normal((horizon, action_dim)),
        process=g.standard_normal((horizon, state_dim)),
    )


def batch_noise(seed: int, iteration: int, n_rollouts: int, horizon: int,
                state_dim: int, action_dim: int) -> RolloutNoise:
    """Stack the per-rollout noise blocks along a leading sample axis."""
    blocks = [rollout_noise(seed, iteration, i, horizon, state_dim, action_dim)
              for i in range(n_rollouts)]
    return RolloutNoise(
        init=np.stack([b.init for b in blocks]),
        dither=np.stack([b.dither for b in blocks]),
        action=np.stack([b.action for b in blocks]),
        process=np.stack([b.process for b in blocks]),
    )
