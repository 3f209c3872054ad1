"""Dense convex QP solver: primal active set with warm start and slack fallback.

Convention: minimize 1/2 x'Hx - g'x subject to L x <= rhs (the negation of
the maximization objective it serves). The method is a primal active-set
iteration started from the warm-start point projected onto the feasible set;
projection uses an elastic max-violation variable with an exact penalty. If
no feasible point exists, the problem is re-solved with nonnegative per-row
slacks under a linear (L1, exact) penalty and reported as relaxed.

Everything is deterministic: pivot ties break toward the lowest row index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "QpSettings",
    "QuadraticProgram",
    "KktResiduals",
    "QpSolution",
    "solve",
    "kkt_residual",
    "dump_qp",
    "load_qp",
]


@dataclass(frozen=True)
class QpSettings:
    max_iterations: int = 5000
    tol_primal: float = 1e-8
    tol_dual: float = 1e-8
    slack_penalty: float | None = None  # default 1e6 * max(1, |g|_inf)


@dataclass(frozen=True)
class QuadraticProgram:
    """minimize 1/2 x'Hx - g'x  s.t.  L x <= rhs."""

    H: np.ndarray
    g: np.ndarray
    L: np.ndarray
    rhs: np.ndarray
    warm_start: np.ndarray | None = None
    settings: QpSettings = field(default_factory=QpSettings)

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        g = np.asarray(self.g, dtype=float).reshape(-1)
        dim = g.size
        L = np.asarray(self.L, dtype=float).reshape(-1, dim) if np.size(self.L) \
            else np.zeros((0, dim))
        rhs = np.asarray(self.rhs, dtype=float).reshape(-1)
        if H.shape != (dim, dim):
            raise ValueError("H must be (d, d) matching g")
        if L.shape[0] != rhs.size:
            raise ValueError("L and rhs row counts disagree")
        scale = max(1.0, float(np.max(np.abs(H))) if H.size else 1.0)
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-12 * scale:
            raise ValueError("H must be symmetric to 1e-12 relative")
        for name, arr in (("H", H), ("g", g), ("L", L), ("rhs", rhs)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        ws = self.warm_start
        if ws is not None:
            ws = np.asarray(ws, dtype=float).reshape(-1)
            if ws.size != dim or not np.all(np.isfinite(ws)):
                raise ValueError("warm_start must be a finite d-vector")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "rhs", rhs)
        object.__setattr__(self, "warm_start", ws)

    @property
    def dim(self) -> int:
        return self.g.size

    @property
    def num_rows(self) -> int:
        return self.rhs.size


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal: float
    complementarity: float
    dual_min: float

    def passes(self, tol: float) -> bool:
        return (self.stationarity <= tol and self.primal <= tol
                and self.complementarity <= tol and self.dual_min >= -tol)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    status: str  # optimal | relaxed_with_slack | max_iterations | unbounded
    active_set: tuple[int, ...]
    multipliers: np.ndarray
    kkt: KktResiduals
    slack_used: np.ndarray
    iterations: int


def kkt_residual(qp: QuadraticProgram, x: np.ndarray,
                 multipliers: np.ndarray) -> KktResiduals:
    """KKT residuals of (x, multipliers) for the minimization problem."""
    x = np.asarray(x, dtype=float).reshape(-1)
    lam = np.asarray(multipliers, dtype=float).reshape(-1)
    stat = float(np.max(np.abs(qp.H @ x - qp.g + qp.L.T @ lam), initial=0.0))
    resid = qp.L @ x - qp.rhs
    primal = float(np.max(resid, initial=0.0))
    primal = max(primal, 0.0)
    comp = float(np.max(np.abs(lam * resid), initial=0.0))
    dual_min = float(np.min(lam, initial=0.0))
    return KktResiduals(stationarity=stat, primal=primal,
                        complementarity=comp, dual_min=dual_min)


class _ActiveSetCore:
    """Primal active set for min 1/2 z'Pz - q'z, C z <= d, from a feasible z0.

    P must be positive definite (callers jitter beforehand). The factor
    P^{-1} C_W' is maintained incrementally per pivot. Ties in blocking and
    dropping decisions break toward the lowest row index.
    """

    def __init__(self, P, q, C, d, z0, tol, max_iter):
        self.P = P
        self.q = q
        self.C = C
        self.d = d
        self.tol = tol
        self.max_iter = max_iter
        self.pfac = cho_factor(P)
        self.z = np.array(z0, dtype=float)
        self.work: list[int] = []
        self.Y: list[np.ndarray] = []   # columns P^{-1} C_i' for i in work
        self.S = np.zeros((0, 0))       # C_W P^{-1} C_W'
        self.objective_trace: list[float] = []
        self.iterations = 0
        self.hit_max = False

    def _objective(self) -> float:
        return float(0.5 * self.z @ self.P @ self.z - self.q @ self.z)

    def _add(self, idx: int):
        y = cho_solve(self.pfac, self.C[idx])
        k = len(self.work)
        S_new = np.empty((k + 1, k + 1))
        S_new[:k, :k] = self.S
        col = np.array([self.C[i] @ y for i in self.work])
        S_new[:k, k] = col
        S_new[k, :k] = col
        S_new[k, k] = self.C[idx] @ y
        self.S = S_new
        self.Y.append(y)
        self.work.append(idx)

    def _drop(self, pos: int):
        self.work.pop(pos)
        self.Y.pop(pos)
        keep = [i for i in range(self.S.shape[0]) if i != pos]
        self.S = self.S[np.ix_(keep, keep)]

    def _solve_multipliers(self, rhs: np.ndarray) -> np.ndarray:
        if rhs.size == 0:
            return rhs
        try:
            return cho_solve(cho_factor(self.S), rhs)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(self.S, rhs, rcond=None)[0]

    def run(self):
        step_tol = self.tol
        for _ in range(self.max_iter):
            self.iterations += 1
            self.objective_trace.append(self._objective())
            p_free = cho_solve(self.pfac, self.q - self.P @ self.z)
            if self.work:
                rhs = np.array([self.C[i] @ p_free for i in self.work])
                lam = self._solve_multipliers(rhs)
                p = p_free - np.array(self.Y).T @ lam
            else:
                lam = np.zeros(0)
                p = p_free
            if np.max(np.abs(p), initial=0.0) <= step_tol * (1.0 + np.max(np.abs(self.z), initial=0.0)):
                if lam.size == 0 or np.min(lam) >= -self.tol:
                    return self.z, self._full_multipliers(lam)
                worst = int(np.argmin(lam))
                self._drop(worst)
                continue
            # ratio test over inactive rows with ascent along p
            Cp = self.C @ p if self.C.size else np.zeros(0)
            alpha = 1.0
            blocking = -1
            if Cp.size:
                inactive = np.ones(self.C.shape[0], dtype=bool)
                inactive[self.work] = False
                dir_tol = 1e-13 * (1.0 + np.max(np.abs(Cp)))
                cand = inactive & (Cp > dir_tol)
                if np.any(cand):
                    ratios = np.full(self.C.shape[0], np.inf)
                    ratios[cand] = np.maximum(self.d[cand] - self.C[cand] @ self.z, 0.0) / Cp[cand]
                    best = int(np.argmin(ratios))
                    if ratios[best] < alpha:
                        alpha = float(ratios[best])
                        blocking = best
            self.z = self.z + alpha * p
            if blocking >= 0:
                self._add(blocking)
        self.hit_max = True
        lam = np.zeros(len(self.work))
        if self.work:
            grad = self.P @ self.z - self.q
            lam = self._solve_multipliers(
                np.array([self.C[i] @ cho_solve(self.pfac, -grad) for i in self.work]))
        return self.z, self._full_multipliers(lam)

    def _full_multipliers(self, lam: np.ndarray) -> np.ndarray:
        full = np.zeros(self.C.shape[0])
        for pos, idx in enumerate(self.work):
            full[idx] = lam[pos] if pos < lam.size else 0.0
        return full


def _unbounded_certificate(H, g, L) -> bool:
    """Sufficient check: a null direction of H that decreases -g'x and recedes."""
    w, v = np.linalg.eigh(H)
    scale = max(1.0, float(w.max(initial=0.0)))
    for i in range(w.size):
        if w[i] > 1e-12 * scale:
            continue
        for direction in (v[:, i], -v[:, i]):
            if g @ direction > 1e-10 and (
                    L.shape[0] == 0 or np.max(L @ direction) <= 1e-12):
                return True
    return False


def _factorizable(H) -> bool:
    try:
        cho_factor(H)
        return True
    except np.linalg.LinAlgError:
        return False


def _project_to_feasible(L, rhs, x0, tol, max_iter):
    """Project x0 onto {L x <= rhs} via an elastic max-violation variable.

    Returns (x, feasible). The elastic weight escalates so that a feasible
    problem really does drive the violation to zero (exact penalty).
    """
    viol0 = float(np.max(L @ x0 - rhs, initial=0.0))
    if viol0 <= tol:
        return x0, True
    dim = x0.size
    scale = max(1.0, float(np.max(np.abs(L))), viol0)
    weight = 1e4 * scale
    for _ in range(3):
        P = np.eye(dim + 1)
        P[dim, dim] = 1e-9
        q = np.concatenate([x0, [-weight]])
        C = np.block([[L, -np.ones((L.shape[0], 1))],
                      [np.zeros((1, dim)), -np.ones((1, 1))]])
        d = np.concatenate([rhs, [0.0]])
        z0 = np.concatenate([x0, [viol0 * (1.0 + 1e-9) + tol]])
        core = _ActiveSetCore(P, q, C, d, z0, tol, max_iter)
        z, _ = core.run()
        x, t = z[:dim], float(z[dim])
        if t <= max(tol, 1e-10 * scale) and float(np.max(L @ x - rhs, initial=0.0)) <= 10.0 * tol:
            return x, True
        weight *= 100.0
    return x0, False


def _solve_with_slack(qp: QuadraticProgram, H_work, weight, tol, max_iter):
    """L1-penalized elastic program: min 1/2 x'Hx - g'x + weight * sum(s)."""
    dim, rows = qp.dim, qp.num_rows
    eps_s = 1e-8 * weight
    P = np.zeros((dim + rows, dim + rows))
    P[:dim, :dim] = H_work
    P[dim:, dim:] = eps_s * np.eye(rows)
    q = np.concatenate([qp.g, -weight * np.ones(rows)])
    C = np.block([[qp.L, -np.eye(rows)],
                  [np.zeros((rows, dim)), -np.eye(rows)]])
    d = np.concatenate([qp.rhs, np.zeros(rows)])
    x0 = qp.warm_start if qp.warm_start is not None else np.zeros(dim)
    s0 = np.maximum(qp.L @ x0 - qp.rhs, 0.0)
    core = _ActiveSetCore(P, q, C, d, np.concatenate([x0, s0]), tol, max_iter)
    z, lam_full = core.run()
    x, s = z[:dim], np.maximum(z[dim:], 0.0)
    lam = lam_full[:rows]
    return x, s, lam, core


def solve(qp: QuadraticProgram) -> QpSolution:
    """Solve the QP to KKT tolerance, or fall back to the slack relaxation.

    The reported residuals refer to the problem actually solved; H receives
    a 1e-10*tr(H)/d jitter only if its factorization fails (escalated x100
    up to twice more).
    """
    cfg = qp.settings
    dim, rows = qp.dim, qp.num_rows
    H_work = qp.H
    if not _factorizable(H_work):
        if _unbounded_certificate(qp.H, qp.g, qp.L):
            x = np.zeros(dim)
            lam = np.zeros(rows)
            return QpSolution(x=x, status="unbounded", active_set=(),
                              multipliers=lam,
                              kkt=kkt_residual(qp, x, lam),
                              slack_used=np.zeros(rows), iterations=0)
        jitter = 1e-10 * max(np.trace(qp.H) / max(dim, 1), 1e-6)
        for _ in range(3):
            H_work = qp.H + jitter * np.eye(dim)
            if _factorizable(H_work):
                break
            jitter *= 100.0
        else:
            raise ValueError("H could not be factorized even after jitter")
    qp_work = QuadraticProgram(H=H_work, g=qp.g, L=qp.L, rhs=qp.rhs,
                               warm_start=qp.warm_start, settings=cfg)

    x0 = qp.warm_start if qp.warm_start is not None else np.zeros(dim)
    x_start, feasible = (_project_to_feasible(qp.L, qp.rhs, x0, cfg.tol_primal,
                                              cfg.max_iterations)
                         if rows else (x0, True))
    if not feasible:
        weight = cfg.slack_penalty
        if weight is None:
            weight = 1e6 * max(1.0, float(np.max(np.abs(qp.g), initial=0.0)))
        x, slack, lam, core = _solve_with_slack(qp_work, H_work, weight,
                                                cfg.tol_primal, cfg.max_iterations)
        kkt = kkt_residual(qp_work, x, lam)
        if np.max(slack, initial=0.0) <= cfg.tol_primal and kkt.passes(cfg.tol_primal):
            # the phase-1 penalty was too small; the problem was feasible
            status = "optimal"
            slack = np.zeros(rows)
        else:
            status = "max_iterations" if core.hit_max else "relaxed_with_slack"
        active = tuple(sorted(i for i in core.work if i < rows))
        return QpSolution(x=x, status=status, active_set=active,
                          multipliers=lam, kkt=kkt, slack_used=slack,
                          iterations=core.iterations)

    core = _ActiveSetCore(H_work, qp.g, qp.L, qp.rhs, x_start,
                          cfg.tol_primal, cfg.max_iterations)
    x, lam = core.run()
    kkt = kkt_residual(qp_work, x, lam)
    tol = max(cfg.tol_primal, cfg.tol_dual)
    if core.hit_max and not kkt.passes(tol):
        status = "max_iterations"
    else:
        status = "optimal"
    return QpSolution(x=x, status=status, active_set=tuple(sorted(core.work)),
                      multipliers=lam, kkt=kkt, slack_used=np.zeros(rows),
                      iterations=core.iterations)


def dump_qp(qp: QuadraticProgram, path) -> None:
    """Write a QP instance to a self-describing text file for offline checks."""
    def fmt(arr):
        arr = np.atleast_2d(arr)
        return "\n".join(" ".join(format(v, ".17g") for v in row) for row in arr)

    parts = [
        "cctrajopt-qp 1",
        f"dim {qp.dim}",
        f"rows {qp.num_rows}",
        "H", fmt(qp.H),
        "g", fmt(qp.g),
    ]
    if qp.num_rows:
        parts += ["L", fmt(qp.L), "rhs", fmt(qp.rhs)]
    if qp.warm_start is not None:
        parts += ["warm_start", fmt(qp.warm_start)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def load_qp(path) -> QuadraticProgram:
    """Read back a QP written by dump_qp."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if lines[0] != "cctrajopt-qp 1":
        raise ValueError("not a cctrajopt QP debug file")
    dim = int(lines[1].split()[1])
    rows = int(lines[2].split()[1])
    pos = 3
    sections: dict[str, np.ndarray] = {}
    counts = {"H": dim, "g": 1, "L": rows, "rhs": 1, "warm_start": 1}
    while pos < len(lines):
        name = lines[pos]
        count = counts[name]
        block = [np.array([float(v) for v in lines[pos + 1 + i].split()])
                 for i in range(count)]
        sections[name] = np.array(block)
        pos += 1 + count
    return QuadraticProgram(
        H=sections["H"].reshape(dim, dim),
        g=sections["g"].reshape(-1),
        L=sections.get("L", np.zeros((0, dim))).reshape(rows, dim),
        rhs=sections.get("rhs", np.zeros(rows)).reshape(-1),
        warm_start=sections.get("warm_start", np.zeros(0)).reshape(-1) if "warm_start" in sections else None,
    )
