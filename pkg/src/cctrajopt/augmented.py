"""Whole-trajectory closed-loop representation and the QP in the feedforwards.

With Ahat_t = A_t + B_t K_t and d_t = c_t - B_t K_t s_r,t + B_t a_r,t, the
closed loop over the horizon stacks into

    s_tilde = A_tilde s_0 + B_tilde k_tilde + G_tilde w_tilde + G_tilde d_tilde,

whose Gaussian belief has mean affine in k_tilde and covariance independent
of it. The expected cumulative reward therefore reduces to a closed-form
quadratic in k_tilde, and the relaxed chance constraints to linear rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chance import HalfPlaneConstraintSet, RiskAllocation, erf_inv
from .fitting import LinearGaussianDynamics, ReferenceTrajectory
from .ilqg import AffineController, QuadraticReward

__all__ = [
    "AugmentedSystem",
    "TrajectoryBelief",
    "QpObjective",
    "ConstraintRows",
    "build_augmented",
    "propagate_belief",
    "build_qp_objective",
    "evaluate_qp_objective",
    "build_constraint_rows",
]


@dataclass(frozen=True)
class AugmentedSystem:
    """Stacked closed-loop matrices and weights over one horizon."""

    A: np.ndarray        # ((T+1)n, n)
    B: np.ndarray        # ((T+1)n, Tm), strictly block lower triangular
    G: np.ndarray        # ((T+1)n, Tn), strictly block lower triangular
    d: np.ndarray        # (Tn,)
    K: np.ndarray        # (Tm, Tn) block diagonal feedback
    M: np.ndarray        # ((T+1)n, (T+1)n) block diagonal state weights
    D: np.ndarray        # (Tm, Tm) block diagonal action weights
    M_C: np.ndarray      # ((T+1)n, (T+1)n) closed-loop state weights
    sigma_w: np.ndarray  # (Tn, Tn) block diagonal process noise
    sigma_s0: np.ndarray  # (n, n)
    horizon: int
    state_dim: int
    action_dim: int

    def __post_init__(self):
        n, T = self.state_dim, self.horizon
        if not np.array_equal(self.A[:n], np.eye(n)):
            raise ValueError("first block of the stacked transition must be I")
        if np.any(self.B[:n] != 0.0) or np.any(self.G[:n] != 0.0):
            raise ValueError("stacked input/noise maps must start with a zero block row")
        for name in ("M", "D", "M_C", "sigma_w"):
            mat = getattr(self, name)
            if np.max(np.abs(mat - mat.T)) > 1e-9 * (1.0 + np.max(np.abs(mat))):
                raise ValueError(f"stacked {name} must be symmetric")


@dataclass(frozen=True)
class TrajectoryBelief:
    """Gaussian belief over the stacked states and actions."""

    mean: np.ndarray      # ((T+1)n,)
    cov_state: np.ndarray  # ((T+1)n, (T+1)n)
    cov_action: np.ndarray  # (Tm, Tm)


@dataclass(frozen=True)
class QpObjective:
    """Closed-form objective J(k) = -1/2 k'Hk + g'k + c0 (maximization)."""

    H: np.ndarray
    g: np.ndarray
    c0: float

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        scale = max(1.0, float(np.max(np.abs(H))) if H.size else 1.0)
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-9 * scale:
            raise ValueError("H must be symmetric")
        try:
            np.linalg.cholesky(H + 1e-10 * scale * np.eye(H.shape[0]))
        except np.linalg.LinAlgError:
            raise ValueError("H must be positive semidefinite") from None


@dataclass(frozen=True)
class ConstraintRows:
    """Linear inequality rows L k <= rhs over the stacked feedforward.

    labels carries (family, constraint index, step) per row; infeasible marks
    rows that no k can satisfy (zero row with negative slack), which the
    solver's relaxation path absorbs.
    """

    L: np.ndarray
    rhs: np.ndarray
    labels: tuple[tuple[str, int, int], ...]
    infeasible: np.ndarray

    @property
    def num_rows(self) -> int:
        return self.rhs.shape[0]


def build_augmented(dyn: LinearGaussianDynamics, ctrl: AffineController,
                    reward: QuadraticReward, sigma_s0: np.ndarray) -> AugmentedSystem:
    """Assemble the stacked closed-loop system around the controller's reference.

    Block-triangular products are built incrementally column by column in
    O(T^2) block multiplications.
    """
    T = dyn.horizon
    if ctrl.horizon != T or reward.horizon != T:
        raise ValueError("dynamics, controller and reward horizons disagree")
    n = dyn.A.shape[1]
    m = dyn.B.shape[2]
    ref = ctrl.reference
    ahat = dyn.A + dyn.B @ ctrl.K
    d_steps = (dyn.c
               - np.einsum("tij,tj->ti", dyn.B @ ctrl.K, ref.states[:-1])
               + np.einsum("tij,tj->ti", dyn.B, ref.actions))

    A_stack = np.zeros(((T + 1) * n, n))
    A_stack[:n] = np.eye(n)
    prod = np.eye(n)
    for t in range(1, T + 1):
        prod = ahat[t - 1] @ prod
        A_stack[t * n:(t + 1) * n] = prod

    B_stack = np.zeros(((T + 1) * n, T * m))
    G_stack = np.zeros(((T + 1) * n, T * n))
    for j in range(T):
        blk_b = dyn.B[j]
        blk_g = np.eye(n)
        B_stack[(j + 1) * n:(j + 2) * n, j * m:(j + 1) * m] = blk_b
        G_stack[(j + 1) * n:(j + 2) * n, j * n:(j + 1) * n] = blk_g
        for i in range(j + 2, T + 1):
            blk_b = ahat[i - 1] @ blk_b
            blk_g = ahat[i - 1] @ blk_g
            B_stack[i * n:(i + 1) * n, j * m:(j + 1) * m] = blk_b
            G_stack[i * n:(i + 1) * n, j * n:(j + 1) * n] = blk_g

    K_blk = np.zeros((T * m, T * n))
    M_blk = np.zeros(((T + 1) * n, (T + 1) * n))
    D_blk = np.zeros((T * m, T * m))
    MC_blk = np.zeros_like(M_blk)
    W_blk = np.zeros((T * n, T * n))
    for t in range(T):
        K_blk[t * m:(t + 1) * m, t * n:(t + 1) * n] = ctrl.K[t]
        M_blk[t * n:(t + 1) * n, t * n:(t + 1) * n] = reward.M[t]
        D_blk[t * m:(t + 1) * m, t * m:(t + 1) * m] = reward.D[t]
        MC_blk[t * n:(t + 1) * n, t * n:(t + 1) * n] = (
            reward.M[t] + ctrl.K[t].T @ reward.D[t] @ ctrl.K[t])
        W_blk[t * n:(t + 1) * n, t * n:(t + 1) * n] = dyn.sigma_w[t]
    M_blk[T * n:, T * n:] = reward.M[T]
    MC_blk[T * n:, T * n:] = reward.M[T]

    return AugmentedSystem(
        A=A_stack, B=B_stack, G=G_stack, d=d_steps.reshape(-1), K=K_blk,
        M=M_blk, D=D_blk, M_C=MC_blk, sigma_w=W_blk,
        sigma_s0=np.asarray(sigma_s0, dtype=float),
        horizon=T, state_dim=n, action_dim=m,
    )


def propagate_belief(sys: AugmentedSystem, k_stack: np.ndarray,
                     s0: np.ndarray) -> TrajectoryBelief:
    """Mean and covariance of the stacked state/action under the closed loop.

    The covariances do not depend on k_stack; only the mean does.
    """
    k_stack = np.asarray(k_stack, dtype=float).reshape(-1)
    Tn = sys.horizon * sys.state_dim
    mean = sys.A @ np.asarray(s0, dtype=float) + sys.B @ k_stack + sys.G @ sys.d
    cov_state = sys.A @ sys.sigma_s0 @ sys.A.T + sys.G @ sys.sigma_w @ sys.G.T
    cov_state = 0.5 * (cov_state + cov_state.T)
    cov_action = sys.K @ cov_state[:Tn, :Tn] @ sys.K.T
    cov_action = 0.5 * (cov_action + cov_action.T)
    for name, cov in (("state", cov_state), ("action", cov_action)):
        jitter = 1e-12 * max(1.0, float(np.max(np.diag(cov))) if cov.size else 1.0)
        try:
            np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            raise ValueError(f"propagated {name} covariance is not PSD") from None
    return TrajectoryBelief(mean=mean, cov_state=cov_state, cov_action=cov_action)


def _action_mean_map(sys: AugmentedSystem, ref: ReferenceTrajectory, q: np.ndarray):
    """Stacked action mean = U k + v with U = I + K S B, v from the reference."""
    Tn = sys.horizon * sys.state_dim
    U = np.eye(sys.horizon * sys.action_dim) + sys.K @ sys.B[:Tn]
    v = sys.K @ (q[:Tn] - ref.states[:-1].reshape(-1)) + ref.actions.reshape(-1)
    return U, v


def build_qp_objective(sys: AugmentedSystem, ref: ReferenceTrajectory,
                       goal: np.ndarray, s0: np.ndarray) -> QpObjective:
    """Expand the expected cumulative reward into a quadratic in k_stack.

    Uses E[x'Wx] = mu'W mu + tr(W Sigma) and the affinity of the stacked mean
    in k; the k-independent trace terms land in c0 so the closed form remains
    comparable against Monte-Carlo estimates.
    """
    goal_stack = np.asarray(goal, dtype=float).reshape(-1)
    if goal_stack.size != (sys.horizon + 1) * sys.state_dim:
        raise ValueError("goal must stack to ((T+1)*n,)")
    belief0 = propagate_belief(sys, np.zeros(sys.horizon * sys.action_dim), s0)
    q = belief0.mean
    U, v = _action_mean_map(sys, ref, q)
    dq = q - goal_stack
    H = 2.0 * (sys.B.T @ sys.M @ sys.B + U.T @ sys.D @ U)
    H = 0.5 * (H + H.T)
    g = -2.0 * (sys.B.T @ (sys.M @ dq) + U.T @ (sys.D @ v))
    c0 = -(dq @ sys.M @ dq + v @ sys.D @ v
           + float(np.sum(sys.M * belief0.cov_state))
           + float(np.sum(sys.D * belief0.cov_action)))
    return QpObjective(H=H, g=g, c0=float(c0))


def evaluate_qp_objective(obj: QpObjective, k_stack: np.ndarray) -> float:
    k = np.asarray(k_stack, dtype=float).reshape(-1)
    return float(-0.5 * k @ obj.H @ k + obj.g @ k + obj.c0)


def build_constraint_rows(sys: AugmentedSystem, belief: TrajectoryBelief,
                          constraints: HalfPlaneConstraintSet,
                          alloc: RiskAllocation, ref: ReferenceTrajectory,
                          alloc_lower: RiskAllocation | None = None) -> ConstraintRows:
    """Stack the relaxed chance constraints as linear rows in k_stack.

    belief must be the k=0 belief, so its mean is the constant part of the
    stacked state mean. alloc budgets the upper families; alloc_lower (same
    allocation by default) budgets the lower ones. The margin terms are
    constants because the covariances do not depend on k.
    """
    if alloc_lower is None:
        alloc_lower = alloc
    T, n, m = sys.horizon, sys.state_dim, sys.action_dim
    if alloc.horizon != T or alloc_lower.horizon != T:
        raise ValueError("risk allocation horizon disagrees with the system")
    q = belief.mean
    U, v = _action_mean_map(sys, ref, q)
    rows, rhs, labels = [], [], []

    def state_var(hp, t):
        blk = belief.cov_state[t * n:(t + 1) * n, t * n:(t + 1) * n]
        var = float(hp.h @ blk @ hp.h)
        if var < -1e-12:
            raise ValueError("state covariance block is not PSD")
        return max(var, 0.0)

    def action_var(fp, t):
        blk = belief.cov_action[t * m:(t + 1) * m, t * m:(t + 1) * m]
        var = float(fp.h @ blk @ fp.h)
        if var < -1e-12:
            raise ValueError("action covariance block is not PSD")
        return max(var, 0.0)

    for idx, hp in enumerate(constraints.state_upper):
        for t in range(1, T + 1):
            margin = np.sqrt(2.0 * state_var(hp, t)) * erf_inv(1.0 - 2.0 * alloc.state_levels[t])
            rows.append(hp.h @ sys.B[t * n:(t + 1) * n])
            rhs.append(hp.b - hp.h @ q[t * n:(t + 1) * n] - margin)
            labels.append(("state_upper", idx, t))
    for idx, hp in enumerate(constraints.state_lower):
        for t in range(1, T + 1):
            margin = np.sqrt(2.0 * state_var(hp, t)) * erf_inv(1.0 - 2.0 * alloc_lower.state_levels[t])
            rows.append(-(hp.h @ sys.B[t * n:(t + 1) * n]))
            rhs.append(hp.h @ q[t * n:(t + 1) * n] - hp.b - margin)
            labels.append(("state_lower", idx, t))
    for idx, fp in enumerate(constraints.action_upper):
        for t in range(T):
            margin = np.sqrt(2.0 * action_var(fp, t)) * erf_inv(1.0 - 2.0 * alloc.action_levels[t])
            rows.append(fp.h @ U[t * m:(t + 1) * m])
            rhs.append(fp.b - fp.h @ v[t * m:(t + 1) * m] - margin)
            labels.append(("action_upper", idx, t))
    for idx, fp in enumerate(constraints.action_lower):
        for t in range(T):
            margin = np.sqrt(2.0 * action_var(fp, t)) * erf_inv(1.0 - 2.0 * alloc_lower.action_levels[t])
            rows.append(-(fp.h @ U[t * m:(t + 1) * m]))
            rhs.append(fp.h @ v[t * m:(t + 1) * m] - fp.b - margin)
            labels.append(("action_lower", idx, t))

    L = np.array(rows) if rows else np.zeros((0, T * m))
    r = np.array(rhs, dtype=float)
    infeasible = (np.max(np.abs(L), axis=1, initial=0.0) < 1e-12) & (r < -1e-12) \
        if rows else np.zeros(0, dtype=bool)
    return ConstraintRows(L=L, rhs=r, labels=tuple(labels), infeasible=infeasible)
