"""iLQG backward pass and sampled forward pass.

Maximization convention throughout: rewards are negative quadratics, so a
usable step requires -Q_aa positive definite (checked by Cholesky). The
backward pass regularizes the value function, subtracting mu*I from V_ss
inside Q_aa and Q_as only, and escalates mu (x10 on failure, /2 after a
successful pass) in the usual Levenberg-Marquardt fashion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitting import LinearGaussianDynamics, ReferenceTrajectory, TrajectoryBatch
from .rng import batch_noise

__all__ = [
    "QuadraticReward",
    "RewardExpansion",
    "QExpansion",
    "AffineController",
    "ValueRecursion",
    "BackwardPassDiverged",
    "ForwardPassError",
    "quadratize_reward",
    "backward_pass",
    "forward_pass",
    "MU_MIN",
    "MU_MAX",
]

MU_MIN = 1e-6
MU_MAX = 1e80
MU_FLOOR = 1e-10


class BackwardPassDiverged(RuntimeError):
    """Raised when no regularization below MU_MAX yields a usable pass."""


class ForwardPassError(RuntimeError):
    """Raised when too many rollouts leave the finite state range."""


def _check_spd(mat: np.ndarray, name: str):
    sym_err = np.max(np.abs(mat - mat.swapaxes(-1, -2)))
    if sym_err > 1e-9 * (1.0 + np.max(np.abs(mat))):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None


@dataclass(frozen=True)
class QuadraticReward:
    """Negative-quadratic tracking reward.

    Per-step reward -(s - goal_t)' M_t (s - goal_t) - a' D_t a for
    t < T plus the terminal term with M_T; M has T+1 entries, D has T.
    All weight matrices must be symmetric positive definite.
    """

    M: np.ndarray     # (T+1, n, n)
    D: np.ndarray     # (T, m, m)
    goal: np.ndarray  # (T+1, n)

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        D = np.asarray(self.D, dtype=float)
        goal = np.asarray(self.goal, dtype=float)
        if M.ndim != 3 or D.ndim != 3 or goal.ndim != 2:
            raise ValueError("M (T+1,n,n), D (T,m,m), goal (T+1,n)")
        if M.shape[0] != D.shape[0] + 1 or goal.shape[0] != M.shape[0]:
            raise ValueError("M must have one more entry than D, goal matches M")
        if not np.all(np.isfinite(goal)):
            raise ValueError("goal contains non-finite entries")
        _check_spd(M, "M")
        _check_spd(D, "D")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "goal", goal)

    @property
    def horizon(self) -> int:
        return self.D.shape[0]

    @property
    def state_dim(self) -> int:
        return self.M.shape[1]

    @property
    def action_dim(self) -> int:
        return self.D.shape[1]

    @staticmethod
    def from_diag(state_weight, action_weight, terminal_weight, goal,
                  horizon: int) -> "QuadraticReward":
        """Time-invariant diagonal weights with a fixed goal state."""
        sw = np.atleast_1d(np.asarray(state_weight, dtype=float))
        aw = np.atleast_1d(np.asarray(action_weight, dtype=float))
        tw = np.atleast_1d(np.asarray(terminal_weight, dtype=float))
        g = np.atleast_1d(np.asarray(goal, dtype=float))
        M = np.repeat(np.diag(sw)[None], horizon + 1, axis=0)
        M[-1] = np.diag(tw)
        D = np.repeat(np.diag(aw)[None], horizon, axis=0)
        return QuadraticReward(M=M, D=D, goal=np.repeat(g[None], horizon + 1, axis=0))

    def step_rewards(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Per-step rewards with the terminal term folded into the last entry.

        states (..., T+1, n), actions (..., T, m) -> (..., T).
        """
        ds = states - self.goal
        state_pen = np.einsum("...ti,tij,...tj->...t", ds[..., :-1, :],
                              self.M[:-1], ds[..., :-1, :])
        action_pen = np.einsum("...ti,tij,...tj->...t", actions, self.D, actions)
        rewards = -(state_pen + action_pen)
        terminal = -np.einsum("...i,ij,...j->...", ds[..., -1, :], self.M[-1],
                              ds[..., -1, :])
        rewards[..., -1] += terminal
        return rewards

    def total_reward(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.step_rewards(states, actions).sum(axis=-1)


@dataclass(frozen=True)
class RewardExpansion:
    """Exact derivatives of the reward at the reference trajectory."""

    r_s: np.ndarray   # (T+1, n)
    r_a: np.ndarray   # (T, m)
    r_ss: np.ndarray  # (T+1, n, n)
    r_aa: np.ndarray  # (T, m, m)
    r_as: np.ndarray  # (T, m, n)

    @property
    def horizon(self) -> int:
        return self.r_a.shape[0]


@dataclass(frozen=True)
class QExpansion:
    """Per-step quadratic model of the state-action value function.

    q_sa is stored as the transpose of q_as rather than computed
    independently, so the symmetry invariant holds by construction.
    """

    q_s: np.ndarray   # (T, n)
    q_a: np.ndarray   # (T, m)
    q_ss: np.ndarray  # (T, n, n)
    q_aa: np.ndarray  # (T, m, m)
    q_as: np.ndarray  # (T, m, n)

    @property
    def q_sa(self) -> np.ndarray:
        return self.q_as.swapaxes(-1, -2)


@dataclass(frozen=True)
class AffineController:
    """Time-variant affine law a = a_r + k + K (s - s_r) around a reference."""

    K: np.ndarray  # (T, m, n)
    k: np.ndarray  # (T, m)
    reference: ReferenceTrajectory

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        k = np.asarray(self.k, dtype=float)
        T = self.reference.horizon
        n = self.reference.states.shape[1]
        m = self.reference.actions.shape[1]
        if K.shape != (T, m, n) or k.shape != (T, m):
            raise ValueError("controller dimensions do not match the reference")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(k))):
            raise ValueError("controller contains non-finite entries")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "k", k)

    @property
    def horizon(self) -> int:
        return self.k.shape[0]

    def stacked_feedforward(self) -> np.ndarray:
        """Feedforward terms stacked into one (T*m,) vector."""
        return self.k.reshape(-1)

    def with_feedforward(self, k_new: np.ndarray) -> "AffineController":
        return AffineController(K=self.K, k=np.asarray(k_new, dtype=float).reshape(self.k.shape),
                                reference=self.reference)

    @staticmethod
    def zero(reference: ReferenceTrajectory) -> "AffineController":
        T = reference.horizon
        n = reference.states.shape[1]
        m = reference.actions.shape[1]
        return AffineController(K=np.zeros((T, m, n)), k=np.zeros((T, m)),
                                reference=reference)


@dataclass(frozen=True)
class ValueRecursion:
    """State-value expansion along the trajectory plus the regularization used."""

    v_s: np.ndarray    # (T+1, n)
    v_ss: np.ndarray   # (T+1, n, n), symmetric
    delta_v: np.ndarray  # (T+1,), expected improvement terms
    mu_reg: float


def quadratize_reward(reward: QuadraticReward, ref: ReferenceTrajectory) -> RewardExpansion:
    """Derivatives of the quadratic reward at (s_r, a_r), maximization sign."""
    if reward.horizon != ref.horizon:
        raise ValueError("reward and reference horizons disagree")
    ds = ref.states - reward.goal
    r_s = -2.0 * np.einsum("tij,tj->ti", reward.M, ds)
    r_a = -2.0 * np.einsum("tij,tj->ti", reward.D, ref.actions)
    r_ss = -2.0 * reward.M
    r_aa = -2.0 * reward.D
    r_as = np.zeros((reward.horizon, reward.action_dim, reward.state_dim))
    return RewardExpansion(r_s=r_s, r_a=r_a, r_ss=r_ss, r_aa=r_aa, r_as=r_as)


class _PassFailed(Exception):
    pass


def _run_pass(dyn: LinearGaussianDynamics, exp: RewardExpansion, mu: float):
    T = dyn.horizon
    n = dyn.A.shape[1]
    m = dyn.B.shape[2]
    v_s = np.empty((T + 1, n))
    v_ss = np.empty((T + 1, n, n))
    delta_v = np.zeros(T + 1)
    K = np.empty((T, m, n))
    k = np.empty((T, m))
    q_s = np.empty((T, n))
    q_a = np.empty((T, m))
    q_ss = np.empty((T, n, n))
    q_aa = np.empty((T, m, m))
    q_as = np.empty((T, m, n))
    v_s[T] = exp.r_s[T]
    v_ss[T] = exp.r_ss[T]
    eye_n = np.eye(n)
    for t in range(T - 1, -1, -1):
        A, B = dyn.A[t], dyn.B[t]
        vs_next = v_s[t + 1]
        vss_next = v_ss[t + 1]
        vss_reg = vss_next - mu * eye_n
        q_s[t] = exp.r_s[t] + A.T @ vs_next
        q_a[t] = exp.r_a[t] + B.T @ vs_next
        q_ss[t] = exp.r_ss[t] + A.T @ vss_next @ A
        q_aa[t] = exp.r_aa[t] + B.T @ vss_reg @ B
        q_as[t] = exp.r_as[t] + B.T @ vss_reg @ A
        neg_qaa = -0.5 * (q_aa[t] + q_aa[t].T)
        if not np.all(np.isfinite(neg_qaa)):
            raise _PassFailed
        try:
            chol = np.linalg.cholesky(neg_qaa)
        except np.linalg.LinAlgError:
            raise _PassFailed from None
        # K = -Q_aa^{-1} Q_as, k = -Q_aa^{-1} Q_a via the Cholesky of -Q_aa
        rhs = np.concatenate([q_as[t], q_a[t][:, None]], axis=1)
        sol = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        K[t] = sol[:, :n]
        k[t] = sol[:, n]
        delta_v[t] = 0.5 * float(q_a[t] @ k[t])
        v_s[t] = q_s[t] + q_as[t].T @ k[t]
        vss = q_ss[t] + q_as[t].T @ K[t]
        v_ss[t] = 0.5 * (vss + vss.T)
        if not (np.all(np.isfinite(v_ss[t])) and np.all(np.isfinite(v_s[t]))):
            raise _PassFailed
    q_exp = QExpansion(q_s=q_s, q_a=q_a, q_ss=q_ss, q_aa=q_aa, q_as=q_as)
    return K, k, ValueRecursion(v_s=v_s, v_ss=v_ss, delta_v=delta_v, mu_reg=mu), q_exp


def backward_pass(dyn: LinearGaussianDynamics, expansion: RewardExpansion,
                  ref: ReferenceTrajectory, mu0: float = 0.0):
    """iLQG backward recursion with adaptive value-function regularization.

    Returns (AffineController, ValueRecursion); the recursion carries the mu
    actually used. If the Cholesky of -Q_aa fails at any step, mu is raised
    to max(10 mu, 1e-6) and the whole pass restarts; above 1e80 the pass
    aborts.
    """
    if dyn.horizon != expansion.horizon or dyn.horizon != ref.horizon:
        raise ValueError("dynamics, expansion and reference horizons disagree")
    if mu0 < 0:
        raise ValueError("mu0 must be nonnegative")
    mu = float(mu0)
    while True:
        try:
            K, k, value, _ = _run_pass(dyn, expansion, mu)
        except _PassFailed:
            mu = max(10.0 * mu, MU_MIN)
            if mu > MU_MAX:
                raise BackwardPassDiverged(
                    f"backward pass diverged: regularization exceeded {MU_MAX:g}"
                ) from None
            continue
        return AffineController(K=K, k=k, reference=ref), value


def next_mu(mu_used: float) -> float:
    """Schedule for the next iteration's starting mu: halve, snap to 0 below 1e-10."""
    half = 0.5 * mu_used
    return 0.0 if half < MU_FLOOR else half


def forward_pass(env, controller: AffineController, alpha: float, n_rollouts: int,
                 seed: int, iteration: int = 0, action_dither: float = 0.0,
                 max_failed_fraction: float = 0.1) -> TrajectoryBatch:
    """Sample N closed-loop rollouts of the environment.

    Actions follow a = a_r + alpha*k + K (s - s_r) plus optional zero-mean
    exploration noise with standard deviation action_dither, are clipped to
    the environment's hard actuator box, and the clipped command is what the
    batch records. The initial state is s_r,0 plus the environment's
    initial-state noise. Rollouts that leave the finite range are dropped;
    more than max_failed_fraction of them failing aborts the pass.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    spec = env.spec
    T = controller.horizon
    if T != spec.horizon:
        raise ValueError("controller and environment horizons disagree")
    n, m = spec.state_dim, spec.action_dim
    ref = controller.reference
    noise = batch_noise(seed, iteration, n_rollouts, T, n, m)
    lo, hi = spec.action_lower, spec.action_upper
    states = np.empty((n_rollouts, T + 1, n))
    actions = np.empty((n_rollouts, T, m))
    states[:, 0] = ref.states[0] + noise.init @ env.init_noise_chol.T
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            dev = states[:, t] - ref.states[t]
            cmd = (ref.actions[t] + alpha * controller.k[t]
                   + dev @ controller.K[t].T)
            if action_dither:
                cmd = cmd + action_dither * noise.dither[:, t]
            a_rec = np.clip(cmd, lo, hi)
            actions[:, t] = a_rec
            states[:, t + 1] = env.step_with_noise(
                states[:, t], a_rec, noise.action[:, t], noise.process[:, t])
    ok = (np.isfinite(states).all(axis=(1, 2)) & np.isfinite(actions).all(axis=(1, 2)))
    n_failed = int(n_rollouts - ok.sum())
    if n_failed > max_failed_fraction * n_rollouts:
        raise ForwardPassError(
            f"{n_failed}/{n_rollouts} rollouts left the finite state range"
        )
    states, actions = states[ok], actions[ok]
    rewards = env.reward.step_rewards(states, actions)
    return TrajectoryBatch(states=states, actions=actions, rewards=rewards)
