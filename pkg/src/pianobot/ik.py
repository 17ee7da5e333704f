"""Multi-task differential IK as a box-constrained QP.

Every fingertip task asks for a velocity ``v_i = K (target_i - FK_i(q)) / dt``.
One step solves::

    min_qd  sum_i w_i || J_i qd - v_i ||^2 + mu ||qd||^2
    s.t.    limit_gain (lower - q) / dt <= qd <= limit_gain (upper - q) / dt

with ``mu = damping + lm_damping * max_i ||target_i - FK_i(q)||^2`` and then
integrates ``q + qd * dt``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .kinematics import (
    N_ACTION,
    N_JOINTS,
    N_TIPS,
    PEDAL,
    HandModelSpec,
    clamp,
    default_spec,
    forward_kinematics,
    jacobians,
)

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, frame: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.frame = frame


@dataclass
class IkParams:
    gain: float = 1.0
    limit_gain: float = 0.05
    damping: float = 1e-6
    lm_damping: float = 1e-6
    dt: float = 0.05
    # ik_step calls per control frame when tracking a trajectory
    max_inner_iters: int = 1
    qp_max_iter: int = 500
    weights: tuple[float, ...] | None = None  # per finger; None = equal

    def __post_init__(self):
        if self.damping < 0 or self.lm_damping < 0:
            raise ValueError("damping terms must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_inner_iters < 1:
            raise ValueError("max_inner_iters must be >= 1")
        if self.weights is not None:
            if len(self.weights) != N_TIPS or min(self.weights) <= 0:
                raise ValueError("weights must be 10 positive numbers")

    def task_weights(self) -> np.ndarray:
        return np.ones(N_TIPS) if self.weights is None else np.asarray(self.weights, float)


@dataclass(frozen=True)
class IkTask:
    finger_id: int
    target: tuple[float, float, float]


# --------------------------------------------------------------------------
# box-constrained QP


@dataclass
class QPResult:
    x: np.ndarray
    iterations: int
    kkt_residual: float
    active_lower: np.ndarray
    active_upper: np.ndarray


def kkt_residual(H, c, x, lb, ub) -> float:
    """Projected-gradient optimality residual of ``0.5 x'Hx - c'x`` on a box."""
    g = H @ x - c
    return float(np.abs(x - np.clip(x - g, lb, ub)).max(initial=0.0))


def solve_box_qp(H, c, lb, ub, max_iter: int = 500, tol: float = 1e-12) -> QPResult:
    """Primal active-set method for ``min 0.5 x'Hx - c'x, lb <= x <= ub``.

    ``H`` must be symmetric positive definite. Starts from the projection of
    the origin onto the box and keeps every iterate feasible.
    """
    H = np.asarray(H, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    n = len(c)
    if np.any(lb > ub):
        raise ValueError("infeasible box: lower bound above upper bound")
    fixed = lb == ub
    x = np.clip(np.zeros(n), lb, ub)
    # working set: -1 at lower bound, +1 at upper bound, 0 free
    ws = np.zeros(n, dtype=int)
    ws[fixed] = -1
    scale = max(float(np.abs(H).max()), float(np.abs(c).max(initial=0.0)), 1e-300)
    on_face_min = False

    for it in range(1, max_iter + 1):
        free = ws == 0
        g = H @ x - c
        if on_face_min or not free.any():
            # x minimizes over the working face; check multipliers
            lam = np.where(ws == -1, g, np.where(ws == 1, -g, 0.0))
            lam[fixed] = 0.0
            j = int(np.argmin(lam))
            if lam[j] >= -tol * scale:
                res = kkt_residual(H, c, x, lb, ub)
                return QPResult(x, it, res, ws == -1, ws == 1)
            ws[j] = 0
            on_face_min = False
            continue
        p = np.zeros(n)
        p[free] = -np.linalg.solve(H[np.ix_(free, free)], g[free])
        # ratio test along p for free variables
        alpha, block, side = 1.0, -1, 0
        for i in np.flatnonzero(free & (p != 0)):
            if p[i] < 0:
                a = (lb[i] - x[i]) / p[i]
                s = -1
            else:
                a = (ub[i] - x[i]) / p[i]
                s = 1
            if a < alpha:
                alpha, block, side = a, i, s
        x = np.clip(x + max(alpha, 0.0) * p, lb, ub)
        if block >= 0:
            x[block] = lb[block] if side < 0 else ub[block]
            ws[block] = side
        else:
            on_face_min = True
    res = kkt_residual(H, c, x, lb, ub)
    raise ConvergenceError(f"box QP did not converge in {max_iter} iterations", res)


# --------------------------------------------------------------------------
# differential IK


def _targets(tasks) -> tuple[np.ndarray, np.ndarray]:
    """Normalize tasks to (finger ids, targets)."""
    if isinstance(tasks, np.ndarray) and tasks.shape == (N_TIPS, 3):
        return np.arange(N_TIPS), tasks.astype(np.float64)
    ids = [t.finger_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError("each finger may appear in at most one task")
    if any(not 0 <= i < N_TIPS for i in ids):
        raise ValueError("finger_id outside 0..9")
    return np.array(ids, dtype=int), np.array([t.target for t in tasks], dtype=np.float64).reshape(-1, 3)


@dataclass
class StepInfo:
    residual: float  # max task position error before the step (m)
    kkt_residual: float
    qp_iterations: int


def build_qp(spec: HandModelSpec, q, tasks, params: IkParams):
    """Hessian, linear term and velocity bounds of one IK step."""
    q = np.asarray(q, dtype=np.float64)
    ids, targets = _targets(tasks)
    if not np.all(np.isfinite(targets)):
        raise ValueError("IK targets must be finite")
    tips = forward_kinematics(spec, q)
    J = jacobians(spec, q)[ids][:, :, :N_JOINTS]  # (k, 3, 46)
    err = targets - tips[ids]
    v = params.gain * err / params.dt
    w = params.task_weights()[ids]
    Jw = J * np.sqrt(w)[:, None, None]
    A = Jw.reshape(-1, N_JOINTS)
    b = (v * np.sqrt(w)[:, None]).reshape(-1)
    max_err2 = float((err**2).sum(axis=1).max(initial=0.0))
    mu = params.damping + params.lm_damping * max_err2
    H = A.T @ A + mu * np.eye(N_JOINTS)
    c = A.T @ b
    qj = q[:N_JOINTS]
    lb = params.limit_gain * (spec.lower[:N_JOINTS] - qj) / params.dt
    ub = params.limit_gain * (spec.upper[:N_JOINTS] - qj) / params.dt
    # a joint sitting slightly outside its range must be allowed back in
    lb = np.minimum(lb, 0.0)
    ub = np.maximum(ub, 0.0)
    return H, c, lb, ub, float(np.sqrt(max_err2))


def ik_step(spec: HandModelSpec, q, tasks, params: IkParams | None = None):
    """One differential IK step.

    ``tasks`` is either a ``(10, 3)`` array of targets or a list of
    :class:`IkTask`. Returns ``(qdot, q_next, info)``; ``qdot`` has 46
    entries and ``q_next`` keeps the pedal of ``q``.
    """
    params = params or IkParams()
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (N_ACTION,):
        raise ValueError(f"q must have {N_ACTION} entries")
    H, c, lb, ub, resid = build_qp(spec, q, tasks, params)
    sol = solve_box_qp(H, c, lb, ub, max_iter=params.qp_max_iter)
    q_next = q.copy()
    q_next[:N_JOINTS] += sol.x * params.dt
    q_next = clamp(spec, q_next)
    q_next[PEDAL] = q[PEDAL]
    return sol.x, q_next, StepInfo(resid, sol.kkt_residual, sol.iterations)


def solve_ik(spec, q0, tasks, params: IkParams | None = None, iters: int = 200, tol: float = 1e-7):
    """Iterate :func:`ik_step` until the step size vanishes or ``iters`` runs out."""
    params = params or IkParams()
    q = np.asarray(q0, dtype=np.float64).copy()
    trace = []
    for _ in range(iters):
        qd, q, info = ik_step(spec, q, tasks, params)
        trace.append(info.residual)
        if np.abs(qd).max() * params.dt < tol:
            break
    return q, trace


@dataclass
class TrackLog:
    residual: list[float] = field(default_factory=list)  # max tip error after the frame
    kkt: list[float] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"frame": i, "tip_error": r, "kkt_residual": k}) + "\n"
            for i, (r, k) in enumerate(zip(self.residual, self.kkt))
        )


def track_trajectory(
    spec: HandModelSpec,
    q0,
    fingertips,
    params: IkParams | None = None,
    pedal=None,
) -> tuple[np.ndarray, TrackLog]:
    """Joint trajectory tracking ``fingertips`` (``(T, 10, 3)``) frame by frame.

    Each frame applies ``params.max_inner_iters`` IK steps warm-started from
    the previous frame's solution. ``pedal`` optionally supplies the pedal
    entry per frame.
    """
    params = params or IkParams()
    tips = np.asarray(getattr(fingertips, "tips", fingertips), dtype=np.float64)
    if tips.ndim != 3 or tips.shape[1:] != (N_TIPS, 3):
        raise ValueError("fingertips must have shape (T, 10, 3)")
    q = clamp(spec, q0)
    out = np.empty((len(tips), N_ACTION))
    log = TrackLog()
    for t in range(len(tips)):
        try:
            for _ in range(params.max_inner_iters):
                _, q, info = ik_step(spec, q, tips[t], params)
        except (ConvergenceError, ValueError) as exc:
            res = getattr(exc, "residual", float("nan"))
            raise ConvergenceError(f"frame {t}: {exc}", res, frame=t) from exc
        if pedal is not None:
            q[PEDAL] = float(pedal[t])
        out[t] = q
        err = np.linalg.norm(forward_kinematics(spec, q) - tips[t], axis=1).max()
        log.residual.append(float(err))
        log.kkt.append(info.kkt_residual)
    return out, log


def initial_configuration(spec, first_frame, params: IkParams | None = None, iters: int = 400):
    """Converge from the home pose onto the first fingertip frame."""
    params = params or IkParams()
    q, _ = solve_ik(spec, spec.home(), np.asarray(first_frame, dtype=np.float64), params, iters=iters)
    return q


class IKTracker(TransformerMixin, BaseEstimator):
    """Fingertip trajectory -> joint trajectory, scikit-learn style.

    ``transform`` takes ``(T, 10, 3)`` fingertip targets and returns the
    ``(T, 47)`` nominal joint trajectory. When ``q0`` is None the start pose
    is found by converging onto the first frame from the home pose.
    """

    def __init__(self, gain=1.0, limit_gain=0.05, damping=1e-6, lm_damping=1e-6,
                 dt=0.05, max_inner_iters=1, q0=None, spec=None):
        self.gain = gain
        self.limit_gain = limit_gain
        self.damping = damping
        self.lm_damping = lm_damping
        self.dt = dt
        self.max_inner_iters = max_inner_iters
        self.q0 = q0
        self.spec = spec

    def _params(self) -> IkParams:
        return IkParams(self.gain, self.limit_gain, self.damping, self.lm_damping,
                        self.dt, self.max_inner_iters)

    def fit(self, X=None, y=None):
        self.spec_ = self.spec if self.spec is not None else default_spec()
        return self

    def transform(self, X, pedal=None):
        spec = getattr(self, "spec_", None) or self.spec or default_spec()
        tips = np.asarray(getattr(X, "tips", X), dtype=np.float64)
        params = self._params()
        q0 = self.q0 if self.q0 is not None else initial_configuration(spec, tips[0], params)
        traj, self.log_ = track_trajectory(spec, q0, tips, params, pedal)
        return traj


def joint_csv(traj: np.ndarray, dt: float) -> str:
    header = "t," + ",".join(f"q{i}" for i in range(N_JOINTS)) + ",pedal\n"
    rows = [",".join([repr(i * dt)] + [repr(float(v)) for v in row]) for i, row in enumerate(traj)]
    return header + "\n".join(rows) + "\n"


def read_joint_csv(text: str) -> np.ndarray:
    lines = [l for l in text.strip().splitlines()[1:] if l]
    return np.array([[float(v) for v in l.split(",")[1:]] for l in lines])


def params_to_dict(p: IkParams) -> dict:
    return asdict(p)
