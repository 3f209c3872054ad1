"""Outer optimization loops: chance-constrained trajectory optimization (CCTO)
and the plain iLQG baseline, with per-iteration metrics.

One iteration: mean trajectory of the last batch -> fit time-variant
linear-Gaussian dynamics -> backward pass (feedback gains and unconstrained
feedforwards) -> for CCTO, assemble the stacked system and solve the
chance-constrained QP warm-started at the unconstrained feedforwards -> new
forward pass with alpha-scaled feedforward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .augmented import build_augmented, build_constraint_rows, build_qp_objective, propagate_belief
from .chance import HalfPlaneConstraintSet, allocate_risk, empirical_violation
from .fitting import (ReferenceTrajectory, TrajectoryBatch,
                      fit_time_variant_dynamics, mean_trajectory)
from .ilqg import (AffineController, BackwardPassDiverged, ForwardPassError,
                   QuadraticReward, backward_pass, forward_pass, next_mu,
                   quadratize_reward)
from .qp import QpSettings, QuadraticProgram, solve as solve_qp

__all__ = [
    "OptimizerConfig",
    "IterationRecord",
    "OptimizationResult",
    "OptimizationAborted",
    "run_ccto",
    "run_ilqg",
    "run_algorithm",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings shared by both algorithms.

    Risk levels default to the constraint set's joint theta/vartheta when
    left as None (the experiments use one value for all four families).
    action_dither is the standard deviation of the exploration noise added to
    commanded actions during optimization rollouts; the fitted (A, B) are not
    identifiable without it because the recorded action is otherwise an exact
    affine function of the state.
    """

    algorithm: str = "ccto"  # "ccto" | "ilqg"
    alpha: float = 0.1
    n_rollouts: int = 50
    iterations: int = 45
    theta_upper: float | None = None
    theta_lower: float | None = None
    vartheta_upper: float | None = None
    vartheta_lower: float | None = None
    ridge: float = 1e-6
    mu0: float = 0.0
    convergence_tol: float | None = None
    seed: int = 0
    action_dither: float = 1e-2
    max_failed_fraction: float = 0.1
    qp_settings: QpSettings = field(default_factory=QpSettings)

    def __post_init__(self):
        if self.algorithm not in ("ccto", "ilqg"):
            raise ValueError("algorithm must be 'ccto' or 'ilqg'")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        for name in ("theta_upper", "theta_lower", "vartheta_upper", "vartheta_lower"):
            value = getattr(self, name)
            if value is not None and not (0.0 < value < 0.5):
                raise ValueError(f"{name} must lie in (0, 0.5)")
        if self.ridge < 0 or self.mu0 < 0 or self.action_dither < 0:
            raise ValueError("ridge, mu0 and action_dither must be nonnegative")


@dataclass(frozen=True)
class IterationRecord:
    """Metrics of one outer iteration."""

    iteration: int
    algorithm: str
    mean_reward: float
    std_reward: float
    mu_reg: float
    qp_status: str
    joint_state_violation: float
    joint_action_violation: float
    nominal_state_min: dict[str, float]
    nominal_state_max: dict[str, float]
    nominal_action_min: dict[str, float]
    nominal_action_max: dict[str, float]


@dataclass(frozen=True)
class OptimizationResult:
    controller: AffineController
    reference: "ReferenceTrajectory"
    records: tuple[IterationRecord, ...]
    final_batch: TrajectoryBatch


class OptimizationAborted(RuntimeError):
    """Raised on backward-pass divergence or rollout failure, trace attached."""

    def __init__(self, message: str, records: tuple[IterationRecord, ...]):
        super().__init__(message)
        self.records = records


def _constrained_coords(env):
    """Names of the box-constrained coordinates for nominal min/max reporting."""
    spec = env.spec
    cons = spec.constraints
    state_idx: list[int] = []
    action_idx: list[int] = []
    if cons is not None:
        for hp in cons.state_upper + cons.state_lower:
            nz = np.flatnonzero(hp.h)
            if nz.size == 1 and nz[0] not in state_idx:
                state_idx.append(int(nz[0]))
        for fp in cons.action_upper + cons.action_lower:
            nz = np.flatnonzero(fp.h)
            if nz.size == 1 and nz[0] not in action_idx:
                action_idx.append(int(nz[0]))
    return (sorted(state_idx), sorted(action_idx))


def _make_record(env, iteration, algorithm, batch, ref, mu_reg, qp_status,
                 constraints) -> IterationRecord:
    totals = batch.total_rewards()
    if constraints is not None:
        report = empirical_violation(batch, constraints)
        joint_s, joint_a = report.joint_state, report.joint_action
    else:
        joint_s = joint_a = 0.0
    state_idx, action_idx = _constrained_coords(env)
    names_s = env.spec.state_names
    names_a = env.spec.action_names
    return IterationRecord(
        iteration=iteration,
        algorithm=algorithm,
        mean_reward=float(totals.mean()),
        std_reward=float(totals.std(ddof=0)),
        mu_reg=float(mu_reg),
        qp_status=qp_status,
        joint_state_violation=joint_s,
        joint_action_violation=joint_a,
        nominal_state_min={names_s[i]: float(ref.states[:, i].min()) for i in state_idx},
        nominal_state_max={names_s[i]: float(ref.states[:, i].max()) for i in state_idx},
        nominal_action_min={names_a[i]: float(ref.actions[:, i].min()) for i in action_idx},
        nominal_action_max={names_a[i]: float(ref.actions[:, i].max()) for i in action_idx},
    )


def _initial_controller(env) -> AffineController:
    """Zero gains and feedforwards around a noise-free zero-action rollout."""
    spec = env.spec
    states = np.empty((spec.horizon + 1, spec.state_dim))
    states[0] = spec.init_mean
    actions = np.zeros((spec.horizon, spec.action_dim))
    zero_a = np.clip(np.zeros(spec.action_dim), spec.action_lower, spec.action_upper)
    for t in range(spec.horizon):
        states[t + 1] = env._rk4(states[t], zero_a)
    ref = ReferenceTrajectory(states=states, actions=actions)
    return AffineController.zero(ref)


def _converged(history: list[float], tol: float | None) -> bool:
    if tol is None or len(history) < 4:
        return False
    recent = history[-4:]
    return all(abs(recent[i + 1] - recent[i]) < tol for i in range(3))


def run_algorithm(env, reward: QuadraticReward, constraints: HalfPlaneConstraintSet | None,
                  cfg: OptimizerConfig) -> OptimizationResult:
    """Run the configured algorithm's full outer loop on the environment."""
    use_qp = cfg.algorithm == "ccto"
    if use_qp and constraints is None:
        raise ValueError("ccto requires a constraint set")
    if cfg.n_rollouts < env.spec.state_dim + env.spec.action_dim + 2:
        raise ValueError("n_rollouts too small for the per-step regressions")

    controller = _initial_controller(env)
    batch = forward_pass(env, controller, cfg.alpha, cfg.n_rollouts, cfg.seed,
                         iteration=0, action_dither=cfg.action_dither,
                         max_failed_fraction=cfg.max_failed_fraction)
    ref = controller.reference
    records: list[IterationRecord] = []
    reward_history: list[float] = []

    if cfg.iterations == 0:
        records.append(_make_record(env, 0, cfg.algorithm, batch, ref, cfg.mu0,
                                    "none", constraints))
        return OptimizationResult(controller=controller, reference=ref,
                                  records=tuple(records), final_batch=batch)

    if constraints is not None:
        theta_u = cfg.theta_upper if cfg.theta_upper is not None else constraints.theta
        theta_l = cfg.theta_lower if cfg.theta_lower is not None else constraints.theta
        vtheta_u = cfg.vartheta_upper if cfg.vartheta_upper is not None else constraints.vartheta
        vtheta_l = cfg.vartheta_lower if cfg.vartheta_lower is not None else constraints.vartheta
        alloc_upper = allocate_risk(theta_u, vtheta_u, env.spec.horizon)
        alloc_lower = allocate_risk(theta_l, vtheta_l, env.spec.horizon)
    mu = cfg.mu0
    for iteration in range(1, cfg.iterations + 1):
        ref = mean_trajectory(batch)
        try:
            dyn = fit_time_variant_dynamics(batch, ridge=cfg.ridge)
            expansion = quadratize_reward(reward, ref)
            bp_controller, value = backward_pass(dyn, expansion, ref, mu0=mu)
        except (BackwardPassDiverged, ValueError) as exc:
            raise OptimizationAborted(str(exc), tuple(records)) from exc
        mu_used = value.mu_reg
        mu = next_mu(mu_used)
        qp_status = "none"
        if use_qp:
            sys = build_augmented(dyn, bp_controller, reward, env.spec.init_cov)
            s0 = ref.states[0]
            belief0 = propagate_belief(sys, np.zeros(env.spec.horizon * env.spec.action_dim), s0)
            objective = build_qp_objective(sys, ref, reward.goal, s0)
            rows = build_constraint_rows(sys, belief0, constraints, alloc_upper,
                                         ref, alloc_lower)
            qp = QuadraticProgram(H=objective.H, g=objective.g, L=rows.L,
                                  rhs=rows.rhs,
                                  warm_start=bp_controller.stacked_feedforward(),
                                  settings=cfg.qp_settings)
            sol = solve_qp(qp)
            qp_status = sol.status
            controller = bp_controller.with_feedforward(sol.x)
        else:
            controller = bp_controller
        try:
            batch = forward_pass(env, controller, cfg.alpha, cfg.n_rollouts,
                                 cfg.seed, iteration=iteration,
                                 action_dither=cfg.action_dither,
                                 max_failed_fraction=cfg.max_failed_fraction)
        except ForwardPassError as exc:
            raise OptimizationAborted(str(exc), tuple(records)) from exc
        records.append(_make_record(env, iteration, cfg.algorithm, batch, ref,
                                    mu_used, qp_status, constraints))
        reward_history.append(records[-1].mean_reward)
        if _converged(reward_history, cfg.convergence_tol):
            break
    return OptimizationResult(controller=controller, reference=mean_trajectory(batch),
                              records=tuple(records), final_batch=batch)


def run_ccto(env, reward, constraints, cfg: OptimizerConfig) -> OptimizationResult:
    return run_algorithm(env, reward, constraints, replace(cfg, algorithm="ccto"))


def run_ilqg(env, reward, cfg: OptimizerConfig,
             constraints: HalfPlaneConstraintSet | None = None) -> OptimizationResult:
    """Baseline loop: QP replaced by the unconstrained feedforwards.

    Violation metrics are still measured against the (unused) constraint set
    so both algorithms report comparable records.
    """
    return run_algorithm(env, reward, constraints, replace(cfg, algorithm="ilqg"))
