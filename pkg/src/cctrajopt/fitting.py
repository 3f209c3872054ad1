"""Time-variant linear-Gaussian models fitted to sampled rollouts.

Each step's transition s_{t+1} = A_t s_t + B_t a_t + c_t + w_t,
w_t ~ N(0, Sigma_t), is estimated independently by ridge regression over
the N rollouts of a batch, and the reference trajectory is the sample mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TrajectoryBatch",
    "ReferenceTrajectory",
    "LinearGaussianDynamics",
    "mean_trajectory",
    "fit_time_variant_dynamics",
]

COV_JITTER = 1e-9


@dataclass(frozen=True)
class TrajectoryBatch:
    """N sampled rollouts over a shared horizon T.

    states: (N, T+1, n), actions: (N, T, m), rewards: (N, T) with the
    terminal reward folded into the final entry.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        actions = np.asarray(self.actions, dtype=float)
        rewards = np.asarray(self.rewards, dtype=float)
        if states.ndim != 3 or actions.ndim != 3 or rewards.ndim != 2:
            raise ValueError("states (N,T+1,n), actions (N,T,m), rewards (N,T)")
        n_samples, horizon_p1, _ = states.shape
        if actions.shape[0] != n_samples or rewards.shape[0] != n_samples:
            raise ValueError("sample counts disagree across fields")
        if actions.shape[1] != horizon_p1 - 1 or rewards.shape[1] != horizon_p1 - 1:
            raise ValueError("horizons disagree across fields")
        for name, arr in (("states", states), ("actions", actions), ("rewards", rewards)):
            if not np.all(np.isfinite(arr)):
                bad = int(np.count_nonzero(~np.isfinite(arr)))
                raise ValueError(f"{name} contains {bad} non-finite entries")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    @property
    def num_samples(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[2]

    def total_rewards(self) -> np.ndarray:
        """Per-rollout summed reward, (N,)."""
        return self.rewards.sum(axis=1)


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Mean state/action trajectory of a batch (the nominal trajectory)."""

    states: np.ndarray  # (T+1, n)
    actions: np.ndarray  # (T, m)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        actions = np.asarray(self.actions, dtype=float)
        if states.ndim != 2 or actions.ndim != 2 or states.shape[0] != actions.shape[0] + 1:
            raise ValueError("states must be (T+1, n) and actions (T, m)")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise ValueError("reference trajectory contains non-finite entries")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


@dataclass(frozen=True)
class LinearGaussianDynamics:
    """Per-step transition s' = A s + B a + c + w, w ~ N(0, Sigma)."""

    A: np.ndarray        # (T, n, n)
    B: np.ndarray        # (T, n, m)
    c: np.ndarray        # (T, n)
    sigma_w: np.ndarray  # (T, n, n), symmetric PSD
    ridge: float = 0.0

    def __post_init__(self):
        for name in ("A", "B", "c", "sigma_w"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, arr)
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        # PSD check: Cholesky must succeed after the construction-time jitter
        for t in range(self.sigma_w.shape[0]):
            sym_err = np.max(np.abs(self.sigma_w[t] - self.sigma_w[t].T))
            if sym_err > 1e-9 * (1.0 + np.max(np.abs(self.sigma_w[t]))):
                raise ValueError(f"sigma_w[{t}] is not symmetric")
            try:
                np.linalg.cholesky(self.sigma_w[t] + 2.0 * COV_JITTER * np.eye(self.sigma_w.shape[1]))
            except np.linalg.LinAlgError:
                raise ValueError(f"sigma_w[{t}] is not positive semidefinite") from None

    @property
    def horizon(self) -> int:
        return self.A.shape[0]


def mean_trajectory(batch: TrajectoryBatch) -> ReferenceTrajectory:
    """Elementwise mean over the sample axis."""
    return ReferenceTrajectory(
        states=batch.states.mean(axis=0),
        actions=batch.actions.mean(axis=0),
    )


def fit_time_variant_dynamics(batch: TrajectoryBatch, ridge: float = 1e-6,
                              standardize: bool = False) -> LinearGaussianDynamics:
    """Ridge regression [s_t; a_t; 1] -> s_{t+1}, one fit per step.

    The effective Tikhonov weight is ridge * trace of the step's design Gram
    matrix, which keeps the regularization unit-free. Residual covariance
    uses the unbiased 1/(N-1) normalization, is symmetrized, and gets a
    1e-9 jitter when its smallest eigenvalue falls below that.

    standardize rescales the design columns to unit RMS before solving
    (coefficients are mapped back to raw units); off by default, fits are in
    raw units.
    """
    n_samples = batch.num_samples
    n, m = batch.state_dim, batch.action_dim
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if n_samples < n + m + 2:
        raise ValueError(
            f"need at least n+m+2={n + m + 2} samples to fit each per-step "
            f"regression, got N={n_samples}"
        )
    horizon = batch.horizon
    A = np.empty((horizon, n, n))
    B = np.empty((horizon, n, m))
    c = np.empty((horizon, n))
    sigma_w = np.empty((horizon, n, n))
    eye = np.eye(n + m + 1)
    for t in range(horizon):
        design = np.concatenate(
            [batch.states[:, t, :], batch.actions[:, t, :], np.ones((n_samples, 1))],
            axis=1,
        )
        target = batch.states[:, t + 1, :]
        scale = np.ones(n + m + 1)
        if standardize:
            rms = np.sqrt(np.mean(design * design, axis=0))
            scale = np.where(rms > 0, rms, 1.0)
            design = design / scale
        gram = design.T @ design
        lam = ridge * np.trace(gram)
        if lam == 0.0:
            # no regularization: the design must have full column rank
            rank = np.linalg.matrix_rank(gram)
            if rank < n + m + 1:
                raise ValueError(
                    f"design matrix at step {t} is rank-deficient ({rank} < "
                    f"{n + m + 1}); pass ridge > 0 to regularize the fit"
                )
        coef = np.linalg.solve(gram + lam * eye, design.T @ target)
        coef = coef / scale[:, None]
        if not np.all(np.isfinite(coef)):
            raise ValueError(f"regression at step {t} produced non-finite coefficients")
        A[t] = coef[:n, :].T
        B[t] = coef[n:n + m, :].T
        c[t] = coef[-1, :]
        resid = target - (design * scale) @ coef
        resid = resid - resid.mean(axis=0)
        cov = resid.T @ resid / (n_samples - 1)
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] < COV_JITTER:
            cov = cov + COV_JITTER * np.eye(n)
        sigma_w[t] = cov
    return LinearGaussianDynamics(A=A, B=B, c=c, sigma_w=sigma_w, ridge=ridge)
