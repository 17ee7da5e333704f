"""Kinematic two-hand model: forward kinematics, Jacobians and joint limits.

Each hand has 23 actuated joints: three forearm sliders (x, y, z) followed
by five fingers with four joints each (abduction about the vertical axis,
then MCP, PIP and DIP flexion). The joint vector is
``[left(23), right(23), pedal]`` for 47 entries in total; fingertips are
ordered left thumb..pinky then right thumb..pinky.

A finger with abduction ``a`` and flexion angles ``f1, f2, f3`` places its
tip at::

    knuckle + slides + (p cos(yaw + a), p sin(yaw + a), -h)
    p = sum_i l_i cos(phi_i),  h = sum_i l_i sin(phi_i),  phi_i = f1 + .. + fi

so positive flexion curls the finger down towards the keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

JOINTS_PER_HAND = 23
N_JOINTS = 2 * JOINTS_PER_HAND  # actuated hand joints
N_ACTION = N_JOINTS + 1  # plus sustain pedal
PEDAL = N_JOINTS
N_TIPS = 10
SLIDE_NAMES = ("slide_x", "slide_y", "slide_z")
FINGER_JOINT_NAMES = ("abd", "mcp", "pip", "dip")


@dataclass(frozen=True)
class FingerSpec:
    name: str
    knuckle: tuple[float, float, float]
    yaw: float
    lengths: tuple[float, float, float]
    limits: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class HandSpec:
    name: str
    base: tuple[float, float, float]
    slide_limits: tuple[tuple[float, float], ...]
    fingers: tuple[FingerSpec, ...]


@dataclass
class HandModelSpec:
    hands: tuple[HandSpec, HandSpec]
    name: str = "two-hand"

    joint_names: list[str] = field(init=False, repr=False)
    lower: np.ndarray = field(init=False, repr=False)
    upper: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.hands) != 2:
            raise ValueError("exactly two hands are required")
        names, lo, hi = [], [], []
        base, yaw, lengths, slide_idx, finger_idx = [], [], [], [], []
        for h, hand in enumerate(self.hands):
            off = h * JOINTS_PER_HAND
            if len(hand.slide_limits) != 3 or len(hand.fingers) != 5:
                raise ValueError(f"hand {hand.name}: need 3 slides and 5 fingers")
            for n, (a, b) in zip(SLIDE_NAMES, hand.slide_limits):
                names.append(f"{hand.name}/{n}")
                lo.append(a)
                hi.append(b)
            for fi, f in enumerate(hand.fingers):
                if len(f.limits) != 4 or len(f.lengths) != 3:
                    raise ValueError(f"{hand.name}/{f.name}: need 4 joint limits and 3 lengths")
                if min(f.lengths) <= 0:
                    raise ValueError(f"{hand.name}/{f.name}: segment lengths must be positive")
                for n, (a, b) in zip(FINGER_JOINT_NAMES, f.limits):
                    names.append(f"{hand.name}/{f.name}/{n}")
                    lo.append(a)
                    hi.append(b)
                base.append(np.add(hand.base, f.knuckle))
                yaw.append(f.yaw)
                lengths.append(f.lengths)
                slide_idx.append([off, off + 1, off + 2])
                finger_idx.append([off + 3 + 4 * fi + j for j in range(4)])
        names.append("pedal")
        lo.append(0.0)
        hi.append(1.0)
        self.joint_names = names
        self.lower = np.array(lo, dtype=np.float64)
        self.upper = np.array(hi, dtype=np.float64)
        if len(names) != N_ACTION:
            raise ValueError(f"joint count {len(names)} != {N_ACTION}")
        if np.any(self.lower >= self.upper):
            bad = [names[i] for i in np.flatnonzero(self.lower >= self.upper)]
            raise ValueError(f"lower limit must be below upper limit for {bad}")
        self._base = np.array(base)
        self._yaw = np.array(yaw)
        self._len = np.array(lengths)
        self._slide = np.array(slide_idx)
        self._fj = np.array(finger_idx)

    # -- serialization ---------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "HandModelSpec":
        hands = []
        for h in d["hands"]:
            fingers = tuple(
                FingerSpec(
                    f["name"],
                    tuple(f["knuckle"]),
                    float(f.get("yaw", 0.0)),
                    tuple(f["lengths"]),
                    tuple(tuple(l) for l in f["limits"]),
                )
                for f in h["fingers"]
            )
            hands.append(
                HandSpec(h["name"], tuple(h["base"]), tuple(tuple(l) for l in h["slide_limits"]), fingers)
            )
        return cls(tuple(hands), d.get("name", "two-hand"))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "hands": [
                {
                    "name": h.name,
                    "base": list(h.base),
                    "slide_limits": [list(l) for l in h.slide_limits],
                    "fingers": [
                        {
                            "name": f.name,
                            "knuckle": list(f.knuckle),
                            "yaw": f.yaw,
                            "lengths": list(f.lengths),
                            "limits": [list(l) for l in f.limits],
                        }
                        for f in h.fingers
                    ],
                }
                for h in self.hands
            ],
        }

    @classmethod
    def load(cls, path) -> "HandModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    # -- queries -----------------------------------------------------------

    def reach(self, finger_id: int) -> float:
        """Upper bound on the knuckle-to-tip distance."""
        return float(self._len[finger_id].sum())

    def knuckle(self, finger_id: int, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        return self._base[finger_id] + q[self._slide[finger_id]]

    def hand_of(self, finger_id: int) -> int:
        return finger_id // 5

    def home(self) -> np.ndarray:
        return np.zeros(N_ACTION)


def default_spec() -> HandModelSpec:
    text = resources.files("pianobot").joinpath("data/hand_default.json").read_text()
    return HandModelSpec.from_dict(json.loads(text))


def _check_q(spec: HandModelSpec, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != N_ACTION:
        raise ValueError(f"joint vector must have {N_ACTION} entries, got {q.shape[-1]}")
    return q


def clamp(spec: HandModelSpec, q) -> np.ndarray:
    """Clip joints to their limits and threshold the pedal at 0.5."""
    q = np.clip(_check_q(spec, q), spec.lower, spec.upper)
    q[..., PEDAL] = (q[..., PEDAL] >= 0.5).astype(np.float64)
    return q


def within_limits(spec: HandModelSpec, q, tol: float = 0.0) -> bool:
    q = _check_q(spec, q)
    return bool(np.all(q >= spec.lower - tol) and np.all(q <= spec.upper + tol))


def _chain(spec: HandModelSpec, q: np.ndarray):
    fj = q[..., spec._fj]  # (..., 10, 4)
    phi = np.cumsum(fj[..., 1:], axis=-1)  # (..., 10, 3)
    c, s = np.cos(phi), np.sin(phi)
    lc, ls = spec._len * c, spec._len * s
    psi = spec._yaw + fj[..., 0]
    return lc, ls, np.cos(psi), np.sin(psi)


def forward_kinematics(spec: HandModelSpec, q) -> np.ndarray:
    """Fingertip positions, shape ``(..., 10, 3)`` for ``q`` of shape ``(..., 47)``."""
    q = _check_q(spec, q)
    lc, ls, cp, sp = _chain(spec, q)
    p = lc.sum(-1)
    h = ls.sum(-1)
    local = np.stack([p * cp, p * sp, -h], axis=-1)
    return spec._base + q[..., spec._slide] + local


def jacobians(spec: HandModelSpec, q) -> np.ndarray:
    """Positional Jacobians of all fingertips, shape ``(10, 3, 47)``."""
    q = _check_q(spec, q)
    if q.ndim != 1:
        raise ValueError("jacobians expects a single configuration")
    lc, ls, cp, sp = _chain(spec, q)
    J = np.zeros((N_TIPS, 3, N_ACTION))
    p = lc.sum(-1)
    # tail sums: d/d(flex_j) involves segments j..3
    tail_s = np.cumsum(ls[:, ::-1], axis=1)[:, ::-1]
    tail_c = np.cumsum(lc[:, ::-1], axis=1)[:, ::-1]
    rows = np.arange(N_TIPS)
    for a in range(3):
        J[rows, a, spec._slide[:, a]] = 1.0
    J[rows, 0, spec._fj[:, 0]] = -p * sp
    J[rows, 1, spec._fj[:, 0]] = p * cp
    for j in range(3):
        col = spec._fj[:, j + 1]
        J[rows, 0, col] = -tail_s[:, j] * cp
        J[rows, 1, col] = -tail_s[:, j] * sp
        J[rows, 2, col] = -tail_c[:, j]
    return J


def jacobian(spec: HandModelSpec, q, finger_id: int) -> np.ndarray:
    """Positional Jacobian (3 x 47) of one fingertip."""
    if not 0 <= finger_id < N_TIPS:
        raise IndexError(f"finger_id {finger_id} outside 0..9")
    return jacobians(spec, q)[finger_id]


def random_configuration(spec: HandModelSpec, rng, margin: float = 0.0) -> np.ndarray:
    """Uniform sample inside the limits, shrunk by ``margin`` of each range."""
    span = spec.upper - spec.lower
    q = rng.uniform(spec.lower + margin * span, spec.upper - margin * span)
    q[PEDAL] = float(rng.random() < 0.5)
    return q
