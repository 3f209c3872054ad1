"""Probabilistic half-plane limits and their deterministic margin form.

A joint trajectory constraint Pr(h' s_t <= b for all t) >= 1 - theta is
split by Boole's inequality into per-step budgets theta_t and, under a
Gaussian state density, each per-step constraint becomes a deterministic
margin condition

    b - h' mu - sqrt(2 h' Sigma h) * erf_inv(1 - 2 theta_t) >= 0,

valid for theta_t < 0.5. Lower bounds and action limits mirror this form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "erf_inv",
    "RiskAllocation",
    "allocate_risk",
    "state_margin",
    "HalfPlane",
    "HalfPlaneConstraintSet",
    "ViolationReport",
    "empirical_violation",
]


def erf_inv(y):
    """Inverse error function, |y| < 1, accurate to ~1e-12 absolute.

    A Winitzki-style rational initial guess is refined with Newton steps on
    erf. Odd symmetry holds exactly by construction. Accepts scalars or
    arrays; raises on |y| >= 1.
    """
    y_arr = np.asarray(y, dtype=float)
    if np.any(~np.isfinite(y_arr)) or np.any(np.abs(y_arr) >= 1.0):
        raise ValueError("erf_inv requires |y| < 1")
    a = 0.147
    ay = np.abs(y_arr)
    # initial guess: Winitzki approximation, ~1e-2 relative accuracy
    with np.errstate(divide="ignore"):
        ln1my2 = np.log1p(-ay * ay)
    u = 2.0 / (np.pi * a) + 0.5 * ln1my2
    x = np.sqrt(np.maximum(np.sqrt(u * u - ln1my2 / a) - u, 0.0))
    # Newton on f(x) = erf(x) - |y|; quadratic convergence from the guess
    sqrt_pi_half = 0.8862269254527580136490837416705726  # sqrt(pi)/2
    for _ in range(4):
        err = _erf(x) - ay
        x = x - err * sqrt_pi_half * np.exp(np.minimum(x * x, 700.0))
    x = np.copysign(x, y_arr)
    return float(x) if np.isscalar(y) or y_arr.ndim == 0 else x


@dataclass(frozen=True)
class RiskAllocation:
    """Per-step risk budgets for one constraint family.

    state_levels has T+1 entries aligned with the stacked state vector;
    entry 0 corresponds to the given initial state, generates no constraint
    row and is excluded from the budget sum. action_levels has T entries.
    """

    state_levels: np.ndarray  # (T+1,)
    action_levels: np.ndarray  # (T,)

    def __post_init__(self):
        s = np.asarray(self.state_levels, dtype=float)
        a = np.asarray(self.action_levels, dtype=float)
        if s.ndim != 1 or a.ndim != 1 or s.size != a.size + 1:
            raise ValueError("state_levels must have one more entry than action_levels")
        if np.any(s <= 0) or np.any(a <= 0):
            raise ValueError("risk levels must be positive")
        if np.any(s >= 0.5) or np.any(a >= 0.5):
            raise ValueError("per-step risk levels must be below 0.5")
        object.__setattr__(self, "state_levels", s)
        object.__setattr__(self, "action_levels", a)

    @property
    def horizon(self) -> int:
        return self.action_levels.size


def allocate_risk(theta: float, vartheta: float, horizon: int) -> RiskAllocation:
    """Uniform allocation theta_t = theta/T, vartheta_t = vartheta/T.

    The initial state is given, not constrained, so the state budget is
    spread over the T steps t = 1..T; slot 0 carries the same value for
    index alignment but consumes no budget.
    """
    if not (0.0 < theta < 0.5):
        raise ValueError(
            f"theta={theta} outside (0, 0.5); the erf_inv relaxation of the "
            "joint constraint is only valid for risk levels below 0.5"
        )
    if not (0.0 < vartheta < 0.5):
        raise ValueError(
            f"vartheta={vartheta} outside (0, 0.5); the erf_inv relaxation of "
            "the joint constraint is only valid for risk levels below 0.5"
        )
    if horizon < 1:
        raise ValueError("horizon must be positive")
    return RiskAllocation(
        state_levels=np.full(horizon + 1, theta / horizon),
        action_levels=np.full(horizon, vartheta / horizon),
    )


def state_margin(h: np.ndarray, b: float, mu: np.ndarray, sigma: np.ndarray,
                 theta_t: float) -> float:
    """Deterministic margin of Pr(h' s <= b) >= 1 - theta_t for s ~ N(mu, sigma).

    Returns g = b - h'mu - sqrt(2 h'Sigma h) * erf_inv(1 - 2 theta_t); the
    chance constraint holds iff g >= 0. At theta_t = 0.5 this reduces to the
    constraint on the median, b - h'mu.
    """
    if not (0.0 < theta_t <= 0.5):
        raise ValueError("theta_t must lie in (0, 0.5]")
    h = np.asarray(h, dtype=float)
    variance = float(h @ np.asarray(sigma, dtype=float) @ h)
    if variance < -1e-12:
        raise ValueError(f"h'Sigma h = {variance} < 0; covariance is not PSD")
    variance = max(variance, 0.0)
    return float(b - h @ np.asarray(mu, dtype=float)
                 - np.sqrt(2.0 * variance) * erf_inv(1.0 - 2.0 * theta_t))


@dataclass(frozen=True)
class HalfPlane:
    """One half-plane limit: h' x <= b (upper) or h' x >= b (lower)."""

    h: np.ndarray
    b: float

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if h.ndim != 1 or not np.any(h != 0.0) or not np.all(np.isfinite(h)):
            raise ValueError("half-plane normal must be a finite nonzero vector")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "b", float(self.b))


@dataclass(frozen=True)
class HalfPlaneConstraintSet:
    """Linear state and action limits with joint risk levels.

    Each entry applies at every constrained step (states t = 1..T, actions
    t = 0..T-1), matching physical limits that hold along the whole
    trajectory. theta budgets the state families, vartheta the action
    families; both must be below 0.5 for the relaxation to be valid.
    """

    state_upper: tuple[HalfPlane, ...] = ()
    state_lower: tuple[HalfPlane, ...] = ()
    action_upper: tuple[HalfPlane, ...] = ()
    action_lower: tuple[HalfPlane, ...] = ()
    theta: float = 0.01
    vartheta: float = 0.01

    def __post_init__(self):
        for name in ("state_upper", "state_lower", "action_upper", "action_lower"):
            entries = tuple(
                hp if isinstance(hp, HalfPlane) else HalfPlane(*hp)
                for hp in getattr(self, name)
            )
            object.__setattr__(self, name, entries)
        if not (0.0 < self.theta < 0.5) or not (0.0 < self.vartheta < 0.5):
            raise ValueError("joint risk levels must lie in (0, 0.5)")

    @staticmethod
    def box(state_bounds: dict[int, tuple[float | None, float | None]],
            action_bounds: dict[int, tuple[float | None, float | None]],
            state_dim: int, action_dim: int,
            theta: float = 0.01, vartheta: float = 0.01) -> "HalfPlaneConstraintSet":
        """Per-coordinate box limits encoded as unit-vector half-plane pairs."""
        su, sl, au, al = [], [], [], []
        for idx, (lo, hi) in state_bounds.items():
            e = np.zeros(state_dim)
            e[idx] = 1.0
            if hi is not None:
                su.append(HalfPlane(e, hi))
            if lo is not None:
                sl.append(HalfPlane(e, lo))
        for idx, (lo, hi) in action_bounds.items():
            e = np.zeros(action_dim)
            e[idx] = 1.0
            if hi is not None:
                au.append(HalfPlane(e, hi))
            if lo is not None:
                al.append(HalfPlane(e, lo))
        return HalfPlaneConstraintSet(tuple(su), tuple(sl), tuple(au), tuple(al),
                                      theta=theta, vartheta=vartheta)


@dataclass(frozen=True)
class ViolationReport:
    """Empirical violation frequencies of a rollout batch.

    Per-constraint rates are (n_constraints, steps) arrays over the
    constrained steps (states t = 1..T, actions t = 0..T-1). Joint rates are
    the fraction of rollouts violating any constraint of the family anywhere
    along the trajectory.
    """

    state_upper_rates: np.ndarray
    state_lower_rates: np.ndarray
    action_upper_rates: np.ndarray
    action_lower_rates: np.ndarray
    joint_state: float
    joint_action: float


def empirical_violation(batch, constraints: HalfPlaneConstraintSet) -> ViolationReport:
    """Measure how often sampled rollouts violate each half-plane."""
    states = batch.states[:, 1:, :]   # (N, T, n); initial state is given
    actions = batch.actions           # (N, T, m)
    n_samples = batch.num_samples

    def rates(entries, values, upper):
        if not entries:
            return np.zeros((0, values.shape[1])), np.zeros(n_samples, dtype=bool)
        proj = np.stack([values @ hp.h for hp in entries])          # (C, N, T)
        bounds = np.array([hp.b for hp in entries])[:, None, None]
        viol = proj > bounds if upper else proj < bounds
        return viol.mean(axis=1), viol.any(axis=(0, 2))

    su_rates, su_any = rates(constraints.state_upper, states, True)
    sl_rates, sl_any = rates(constraints.state_lower, states, False)
    au_rates, au_any = rates(constraints.action_upper, actions, True)
    al_rates, al_any = rates(constraints.action_lower, actions, False)
    return ViolationReport(
        state_upper_rates=su_rates,
        state_lower_rates=sl_rates,
        action_upper_rates=au_rates,
        action_lower_rates=al_rates,
        joint_state=float(np.mean(su_any | sl_any)),
        joint_action=float(np.mean(au_any | al_any)),
    )
