"""Stochastic simulated plants: cart-pole, Furuta pendulum, linear test system.

All environments integrate continuous dynamics with RK4 under zero-order-hold
actions. A step clips the commanded action to the hard actuator box, perturbs
it with actuator noise, integrates over dt, and adds process noise to the
resulting state. Angles are raw (no wrapping): 0 is hanging down, pi is
upright.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .chance import HalfPlaneConstraintSet
from .fitting import ReferenceTrajectory
from .ilqg import AffineController, QuadraticReward, forward_pass

__all__ = [
    "EnvironmentSpec",
    "Environment",
    "Trajectory",
    "step",
    "rollout",
    "sample_rollouts",
    "linear_system_env",
    "cartpole_env",
    "furuta_env",
    "make_environment",
    "cartpole_energy",
    "furuta_energy",
]


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor L with L L' = cov for PSD cov (works for singular matrices)."""
    cov = np.asarray(cov, dtype=float)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() < -1e-10 * max(1.0, w.max(initial=0.0)):
        raise ValueError("covariance is not positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class EnvironmentSpec:
    """Dimensions, noise, limits and constraint metadata of a plant."""

    name: str
    state_dim: int
    action_dim: int
    dt: float
    horizon: int
    init_mean: np.ndarray
    init_cov: np.ndarray
    process_noise_cov: np.ndarray
    action_noise_cov: np.ndarray
    action_lower: np.ndarray
    action_upper: np.ndarray
    constraints: HalfPlaneConstraintSet | None
    state_names: tuple[str, ...]
    action_names: tuple[str, ...]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        for name in ("init_mean", "init_cov", "process_noise_cov",
                     "action_noise_cov", "action_lower", "action_upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.action_lower >= self.action_upper):
            raise ValueError("action box is empty")


@dataclass(frozen=True)
class Environment:
    """A spec plus the pure continuous drift integrated with RK4."""

    spec: EnvironmentSpec
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    reward: QuadraticReward
    energy: Callable[[np.ndarray], np.ndarray] | None = None
    linear_maps: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "action_noise_chol", _psd_factor(self.spec.action_noise_cov))
        object.__setattr__(self, "process_noise_chol", _psd_factor(self.spec.process_noise_cov))
        object.__setattr__(self, "init_noise_chol", _psd_factor(self.spec.init_cov))

    def _rk4(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        dt = self.spec.dt
        k1 = self.drift(s, a)
        k2 = self.drift(s + 0.5 * dt * k1, a)
        k3 = self.drift(s + 0.5 * dt * k2, a)
        k4 = self.drift(s + dt * k3, a)
        return s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def step_with_noise(self, s: np.ndarray, a: np.ndarray,
                        eps_action: np.ndarray, eps_process: np.ndarray) -> np.ndarray:
        """Transition as a pure function of (state, action, noise draws)."""
        a_cl = np.clip(a, self.spec.action_lower, self.spec.action_upper)
        a_exec = a_cl + eps_action @ self.action_noise_chol.T
        s_next = self._rk4(s, a_exec)
        return s_next + eps_process @ self.process_noise_chol.T


@dataclass(frozen=True)
class Trajectory:
    """One rollout: states (T+1, n), actions (T, m), per-step rewards (T,)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def total_reward(self) -> float:
        return float(self.rewards.sum())


def step(env: Environment, s: np.ndarray, a: np.ndarray,
         rng: np.random.Generator) -> np.ndarray:
    """One noisy transition; draws actuator noise then process noise from rng."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise ValueError(f"non-finite input to {env.spec.name}.step: s={s}, a={a}")
    eps_a = rng.standard_normal(env.spec.action_dim)
    eps_w = rng.standard_normal(env.spec.state_dim)
    s_next = env.step_with_noise(s, a, eps_a, eps_w)
    if not np.all(np.isfinite(s_next)):
        raise ValueError(
            f"{env.spec.name}.step produced a non-finite state from s={s}, a={a}"
        )
    return s_next


def sample_rollouts(env: Environment, controller: AffineController, n_rollouts: int,
                    seed: int, iteration: int = 0, alpha: float = 1.0):
    """N noisy closed-loop rollouts without exploration dither."""
    return forward_pass(env, controller, alpha=alpha, n_rollouts=n_rollouts,
                        seed=seed, iteration=iteration, action_dither=0.0,
                        max_failed_fraction=0.0)


def rollout(env: Environment, policy, seed: int, iteration: int = 0) -> Trajectory:
    """Single noisy rollout under a controller or an open-loop action sequence."""
    if not isinstance(policy, AffineController):
        actions = np.asarray(policy, dtype=float)
        if actions.shape != (env.spec.horizon, env.spec.action_dim):
            raise ValueError("action sequence must have shape (T, m)")
        ref = ReferenceTrajectory(
            states=np.repeat(env.spec.init_mean[None], env.spec.horizon + 1, axis=0),
            actions=actions,
        )
        policy = AffineController.zero(ref)
    batch = forward_pass(env, policy, alpha=1.0, n_rollouts=1, seed=seed,
                         iteration=iteration, action_dither=0.0,
                         max_failed_fraction=0.0)
    return Trajectory(states=batch.states[0], actions=batch.actions[0],
                      rewards=batch.rewards[0])


def _rk4_linear_maps(F: np.ndarray, G: np.ndarray, bias: np.ndarray, dt: float):
    """Exact discrete-time (Phi, Gamma, bias_d) of the RK4 map for linear drift."""
    n = F.shape[0]
    eye = np.eye(n)
    dF = dt * F
    phi = eye + dF @ (eye + dF @ (eye / 2 + dF @ (eye / 6 + dF / 24)))
    psi = dt * (eye + dF @ (eye / 2 + dF @ (eye / 6 + dF / 24)))
    return phi, psi @ G, psi @ bias


def linear_system_env(F, G, bias=None, *, dt=0.05, horizon=20, init_mean=None,
                      init_std=0.0, process_noise_std=0.0, action_noise_std=0.0,
                      action_bound=1e6, constraints=None, reward=None,
                      name="linear") -> Environment:
    """Linear drift sdot = F s + G a + bias; the RK4 map is exactly linear.

    process_noise_std is the per-step additive noise on the discrete state
    (scalar or per-coordinate), not a continuous-time intensity.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    n, m = G.shape
    bias_v = np.zeros(n) if bias is None else np.asarray(bias, dtype=float)
    init_mean = np.zeros(n) if init_mean is None else np.asarray(init_mean, dtype=float)
    spec = EnvironmentSpec(
        name=name, state_dim=n, action_dim=m, dt=dt, horizon=horizon,
        init_mean=init_mean,
        init_cov=np.diag(np.broadcast_to(np.square(init_std), n).astype(float)),
        process_noise_cov=np.diag(np.broadcast_to(np.square(process_noise_std), n).astype(float)),
        action_noise_cov=np.diag(np.broadcast_to(np.square(action_noise_std), m).astype(float)),
        action_lower=np.full(m, -float(action_bound)),
        action_upper=np.full(m, float(action_bound)),
        constraints=constraints,
        state_names=tuple(f"s{i}" for i in range(n)),
        action_names=tuple(f"a{i}" for i in range(m)),
        params={"F": F, "G": G, "bias": bias_v},
    )
    if reward is None:
        reward = QuadraticReward.from_diag(np.ones(n), 0.1 * np.ones(m),
                                           np.ones(n), np.zeros(n), horizon)

    def drift(s, a):
        return s @ F.T + a @ G.T + bias_v

    return Environment(spec=spec, drift=drift, reward=reward,
                       linear_maps=_rk4_linear_maps(F, G, bias_v, dt))


# -- cart-pole ---------------------------------------------------------------

_CARTPOLE_DEFAULTS = dict(
    cart_mass=1.0, pole_mass=0.1, pole_length=0.5, gravity=9.81,
    cart_damping=0.1, pivot_damping=0.01,
)


def _cartpole_accels(s, force, p):
    """Accelerations (xddot, thddot) of the cart-pole; theta=0 hangs down.

    Uniform-rod pole: com at half length, inertia mp*L^2/3 about the pivot.
    """
    mc, mp = p["cart_mass"], p["pole_mass"]
    lc = 0.5 * p["pole_length"]
    j_piv = mp * p["pole_length"] ** 2 / 3.0
    g = p["gravity"]
    bx, bth = p["cart_damping"], p["pivot_damping"]
    x_dot, th, th_dot = s[..., 1], s[..., 2], s[..., 3]
    sin, cos = np.sin(th), np.cos(th)
    m11 = mc + mp
    m12 = mp * lc * cos
    m22 = j_piv
    rhs1 = force - bx * x_dot + mp * lc * sin * th_dot * th_dot
    rhs2 = -mp * g * lc * sin - bth * th_dot
    det = m11 * m22 - m12 * m12
    x_dd = (m22 * rhs1 - m12 * rhs2) / det
    th_dd = (m11 * rhs2 - m12 * rhs1) / det
    return x_dd, th_dd


def cartpole_energy(s, params=None) -> np.ndarray:
    """Total mechanical energy, zero at rest hanging down."""
    p = dict(_CARTPOLE_DEFAULTS, **(params or {}))
    mc, mp = p["cart_mass"], p["pole_mass"]
    lc = 0.5 * p["pole_length"]
    j_piv = mp * p["pole_length"] ** 2 / 3.0
    g = p["gravity"]
    x_dot, th, th_dot = s[..., 1], s[..., 2], s[..., 3]
    kinetic = (0.5 * (mc + mp) * x_dot ** 2
               + mp * lc * x_dot * th_dot * np.cos(th)
               + 0.5 * j_piv * th_dot ** 2)
    return kinetic + mp * g * lc * (1.0 - np.cos(th))


def cartpole_env(*, dt=0.02, horizon=100, process_noise_std=1e-3,
                 action_noise_std=1e-2, init_std=1e-3, force_limit=5.0,
                 position_limit=1.5, theta=0.01, vartheta=0.01, reward=None,
                 params=None) -> Environment:
    """Cart-pole swing-up: state (x, xdot, theta, thetadot), upright at pi.

    Constraint metadata carries the position bound |x| <= position_limit and
    the actuator bound |F| <= force_limit; the same force limit is the hard
    clipping box of the plant.
    """
    p = dict(_CARTPOLE_DEFAULTS, **(params or {}))
    constraints = HalfPlaneConstraintSet.box(
        state_bounds={0: (-position_limit, position_limit)},
        action_bounds={0: (-force_limit, force_limit)},
        state_dim=4, action_dim=1, theta=theta, vartheta=vartheta,
    )
    spec = EnvironmentSpec(
        name="cartpole", state_dim=4, action_dim=1, dt=dt, horizon=horizon,
        init_mean=np.zeros(4),
        init_cov=np.square(init_std) * np.eye(4),
        process_noise_cov=np.square(process_noise_std) * np.eye(4),
        action_noise_cov=np.square(action_noise_std) * np.eye(1),
        action_lower=np.array([-force_limit]),
        action_upper=np.array([force_limit]),
        constraints=constraints,
        state_names=("x", "x_dot", "theta", "theta_dot"),
        action_names=("force",),
        params=p,
    )
    if reward is None:
        reward = QuadraticReward.from_diag(
            state_weight=[0.5, 0.02, 1.0, 0.02],
            action_weight=[0.01],
            terminal_weight=[10.0, 1.0, 50.0, 2.0],
            goal=[0.0, 0.0, np.pi, 0.0],
            horizon=horizon,
        )

    def drift(s, a):
        x_dd, th_dd = _cartpole_accels(s, a[..., 0], p)
        return np.stack([s[..., 1], x_dd, s[..., 3], th_dd], axis=-1)

    return Environment(spec=spec, drift=drift, reward=reward,
                       energy=lambda s: cartpole_energy(s, p))


# -- Furuta pendulum ---------------------------------------------------------

_FURUTA_DEFAULTS = dict(
    arm_mass=0.095, arm_length=0.085, pend_mass=0.024, pend_length=0.129,
    gravity=9.81, arm_damping=5e-4, pivot_damping=1e-5,
)


def _furuta_constants(p):
    j_arm = p["arm_mass"] * p["arm_length"] ** 2 / 3.0
    lc = 0.5 * p["pend_length"]
    j_pend = p["pend_mass"] * p["pend_length"] ** 2 / 3.0
    j_total = j_arm + p["pend_mass"] * p["arm_length"] ** 2
    k_c = p["pend_mass"] * p["arm_length"] * lc
    k_g = p["pend_mass"] * p["gravity"] * lc
    return j_total, j_pend, k_c, k_g


def _furuta_accels(s, torque, p):
    """Accelerations (alpha_dd, beta_dd); beta=0 hangs down, both rods uniform."""
    j_total, j_pend, k_c, k_g = _furuta_constants(p)
    b1, b2 = p["arm_damping"], p["pivot_damping"]
    al_dot, be, be_dot = s[..., 1], s[..., 2], s[..., 3]
    sin, cos = np.sin(be), np.cos(be)
    m11 = j_total + j_pend * sin * sin
    m12 = k_c * cos
    m22 = j_pend
    rhs1 = (torque - b1 * al_dot - 2.0 * j_pend * sin * cos * al_dot * be_dot
            + k_c * sin * be_dot * be_dot)
    rhs2 = -b2 * be_dot + j_pend * sin * cos * al_dot * al_dot - k_g * sin
    det = m11 * m22 - m12 * m12
    al_dd = (m22 * rhs1 - m12 * rhs2) / det
    be_dd = (m11 * rhs2 - m12 * rhs1) / det
    return al_dd, be_dd


def furuta_energy(s, params=None) -> np.ndarray:
    """Total mechanical energy, zero at rest hanging down."""
    p = dict(_FURUTA_DEFAULTS, **(params or {}))
    j_total, j_pend, k_c, k_g = _furuta_constants(p)
    al_dot, be, be_dot = s[..., 1], s[..., 2], s[..., 3]
    kinetic = (0.5 * (j_total + j_pend * np.sin(be) ** 2) * al_dot ** 2
               + 0.5 * j_pend * be_dot ** 2
               + k_c * np.cos(be) * al_dot * be_dot)
    return kinetic + k_g * (1.0 - np.cos(be))


def furuta_env(*, dt=0.02, horizon=150, process_noise_std=5e-4,
               action_noise_std=2e-3, init_std=1e-3, torque_limit=0.04,
               arm_angle_limit=2.0, theta=0.01, vartheta=0.01, reward=None,
               params=None) -> Environment:
    """Furuta pendulum swing-up: state (arm, arm_dot, pend, pend_dot).

    Only the horizontal arm is actuated; its angle is state-constrained and
    the motor torque is action-constrained (and hard-clipped).
    """
    p = dict(_FURUTA_DEFAULTS, **(params or {}))
    constraints = HalfPlaneConstraintSet.box(
        state_bounds={0: (-arm_angle_limit, arm_angle_limit)},
        action_bounds={0: (-torque_limit, torque_limit)},
        state_dim=4, action_dim=1, theta=theta, vartheta=vartheta,
    )
    spec = EnvironmentSpec(
        name="furuta", state_dim=4, action_dim=1, dt=dt, horizon=horizon,
        init_mean=np.zeros(4),
        init_cov=np.square(init_std) * np.eye(4),
        process_noise_cov=np.square(process_noise_std) * np.eye(4),
        action_noise_cov=np.square(action_noise_std) * np.eye(1),
        action_lower=np.array([-torque_limit]),
        action_upper=np.array([torque_limit]),
        constraints=constraints,
        state_names=("arm", "arm_dot", "pend", "pend_dot"),
        action_names=("torque",),
        params=p,
    )
    if reward is None:
        reward = QuadraticReward.from_diag(
            state_weight=[0.5, 0.01, 1.0, 0.01],
            action_weight=[20.0],
            terminal_weight=[5.0, 0.5, 50.0, 1.0],
            goal=[0.0, 0.0, np.pi, 0.0],
            horizon=horizon,
        )

    def drift(s, a):
        al_dd, be_dd = _furuta_accels(s, a[..., 0], p)
        return np.stack([s[..., 1], al_dd, s[..., 3], be_dd], axis=-1)

    return Environment(spec=spec, drift=drift, reward=reward,
                       energy=lambda s: furuta_energy(s, p))


_FACTORIES = {"cartpole": cartpole_env, "furuta": furuta_env}


def make_environment(name: str, **kwargs) -> Environment:
    """Build a named environment; the linear plant needs F and G in kwargs."""
    if name == "linear":
        return linear_system_env(**kwargs)
    if name not in _FACTORIES:
        raise ValueError(f"unknown environment {name!r}; "
                         f"choose from {sorted(_FACTORIES) + ['linear']}")
    return _FACTORIES[name](**kwargs)
