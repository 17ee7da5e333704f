"""From tracked pixel fingertips to 3D fingertip targets on the piano plane.

The pipeline is: fit a pixel -> plane homography from a handful of feature
correspondences, map the fingertip tracks through it, snap fingertips onto
the keys they should be pressing, then give pressing tips z = 0 and every
other tip z = 2 * h_key.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .keyboard import KeyGeometry
from .score import PianoStateTrajectory

logger = logging.getLogger(__name__)

N_TIPS = 10
UNASSIGNED = -1


class DegenerateConfigurationError(ValueError):
    pass


class PointAtInfinityError(ValueError):
    pass


@dataclass(frozen=True)
class Correspondence:
    pixel: tuple[float, float]
    plane: tuple[float, float]


@dataclass
class Homography:
    h: np.ndarray
    reprojection_error: float = float("nan")

    def __post_init__(self):
        self.h = _normalize(np.asarray(self.h, dtype=np.float64))

    def __call__(self, pts) -> np.ndarray:
        return apply_homography(self, pts)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))


def _normalize(h: np.ndarray) -> np.ndarray:
    if h.shape != (3, 3):
        raise ValueError("homography must be 3x3")
    if abs(h[2, 2]) > 1e-12 * np.abs(h).max():
        return h / h[2, 2]
    return h / np.linalg.norm(h)


def _hartley(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d == 0:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _to_h(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = np.c_[pts, np.ones(len(pts))] @ T.T
    return p[:, :2] / p[:, 2:]


def estimate_homography(pixel, plane=None, rank_tol: float = 1e-10) -> Homography:
    """Normalized DLT over all correspondences (least squares for n > 4).

    ``pixel`` may also be a list of :class:`Correspondence`, in which case
    ``plane`` is omitted.
    """
    if plane is None:
        corr = list(pixel)
        pixel = [c.pixel for c in corr]
        plane = [c.plane for c in corr]
    src = check_points(pixel, 2, "pixel")
    dst = check_points(plane, 2, "plane")
    if len(src) != len(dst):
        raise ValueError("pixel and plane point counts differ")
    if len(src) < 4:
        raise ValueError(f"need at least 4 correspondences, got {len(src)}")

    T_src, T_dst = _hartley(src), _hartley(dst)
    a, b = _to_h(T_src, src), _to_h(T_dst, dst)
    n = len(a)
    A = np.zeros((2 * n, 9))
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    A[0::2, 0:3] = np.c_[x, y, np.ones(n)]
    A[0::2, 6:9] = -u[:, None] * np.c_[x, y, np.ones(n)]
    A[1::2, 3:6] = np.c_[x, y, np.ones(n)]
    A[1::2, 6:9] = -v[:, None] * np.c_[x, y, np.ones(n)]

    _, s, vt = np.linalg.svd(A)
    # a unique solution needs a one-dimensional null space
    if s[7] <= rank_tol * s[0]:
        raise DegenerateConfigurationError(
            "correspondences do not determine a unique homography "
            "(collinear or repeated points)"
        )
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(T_dst) @ hn @ T_src
    if abs(np.linalg.det(h)) <= 1e-14 * np.abs(h).max() ** 3:
        raise DegenerateConfigurationError("estimated homography is singular")
    H = Homography(h)
    err = np.linalg.norm(apply_homography(H, src) - dst, axis=1)
    H.reprojection_error = float(err.mean())
    return H


def apply_homography(h, pts, eps: float = 1e-12) -> np.ndarray:
    """Map (n, 2) points through ``h`` with the perspective divide."""
    hm = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    p = np.asarray(pts, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    q = p @ hm[:, :2].T + hm[:, 2]
    w = q[:, 2]
    scale = np.abs(q).max(axis=1)
    if np.any(np.abs(w) <= eps * np.maximum(scale, 1.0)):
        bad = int(np.flatnonzero(np.abs(w) <= eps * np.maximum(scale, 1.0))[0])
        raise PointAtInfinityError(f"point {bad} maps to infinity")
    out = q[:, :2] / w[:, None]
    return out[0] if single else out


class HomographyEstimator(TransformerMixin, BaseEstimator):
    """Pixel -> piano-plane mapping as a scikit-learn transformer.

    ``fit(pixel, plane)`` estimates the homography; ``transform(pixel)``
    maps points through it.
    """

    def __init__(self, rank_tol: float = 1e-10):
        self.rank_tol = rank_tol

    def fit(self, X, y):
        H = estimate_homography(X, y, rank_tol=self.rank_tol)
        self.homography_ = H
        self.h_ = H.h
        self.reprojection_error_ = H.reprojection_error
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "h_")
        return apply_homography(self.h_, check_points(X, 2, "X"))

    def inverse_transform(self, X):
        check_is_fitted(self, "h_")
        return apply_homography(np.linalg.inv(self.h_), check_points(X, 2, "X"))


# --------------------------------------------------------------------------
# fingertip trajectories


@dataclass(frozen=True)
class FingertipFrame:
    t: float
    tips: np.ndarray  # (10, 3)
    press_assignment: tuple  # per tip: key index or None


@dataclass
class FingertipTrajectory:
    """Ten fingertips per frame: left thumb..pinky, then right thumb..pinky."""

    times: np.ndarray  # (T,)
    tips: np.ndarray  # (T, 10, 3); z is NaN before z-assignment
    assignment: np.ndarray = None  # (T, 10) key index or -1

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        tips = np.asarray(self.tips, dtype=np.float64)
        if tips.ndim == 3 and tips.shape[2] == 2:
            tips = np.concatenate([tips, np.full(tips.shape[:2] + (1,), np.nan)], axis=2)
        if tips.ndim != 3 or tips.shape[1:] != (N_TIPS, 3):
            raise ValueError(f"tips must have shape (T, {N_TIPS}, 3)")
        if len(tips) != len(self.times):
            raise ValueError("times and tips lengths differ")
        self.tips = tips
        if self.assignment is None:
            self.assignment = np.full((len(tips), N_TIPS), UNASSIGNED, dtype=int)
        self.assignment = np.asarray(self.assignment, dtype=int)

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i: int) -> FingertipFrame:
        a = tuple(None if k < 0 else int(k) for k in self.assignment[i])
        return FingertipFrame(float(self.times[i]), self.tips[i].copy(), a)

    def copy(self) -> "FingertipTrajectory":
        return FingertipTrajectory(self.times.copy(), self.tips.copy(), self.assignment.copy())

    def to_csv(self) -> str:
        """Plane-space rows ``t, finger_id, x, y, z, key`` (key -1 = none)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "finger_id", "x", "y", "z", "key"])
        for i, t in enumerate(self.times):
            for f in range(N_TIPS):
                x, y, z = self.tips[i, f]
                w.writerow([repr(float(t)), f, repr(float(x)), repr(float(y)), repr(float(z)),
                            int(self.assignment[i, f])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FingertipTrajectory":
        return read_fingertip_csv(text)


def read_fingertip_csv(text: str) -> FingertipTrajectory:
    """Read pixel rows ``(t, finger_id, u, v)`` or plane rows
    ``(t, finger_id, x, y[, z[, key]])``. A header row is optional."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    if not rows:
        raise ValueError("fingertip CSV has no data rows")
    by_time: dict[float, dict[int, list[float]]] = {}
    for r in rows:
        t, f = float(r[0]), int(r[1])
        if not 0 <= f < N_TIPS:
            raise ValueError(f"finger_id {f} outside 0..9")
        by_time.setdefault(t, {})[f] = [float(v) for v in r[2:]]
    times = np.array(sorted(by_time))
    tips = np.full((len(times), N_TIPS, 3), np.nan)
    assign = np.full((len(times), N_TIPS), UNASSIGNED, dtype=int)
    for i, t in enumerate(times):
        frame = by_time[t]
        if len(frame) != N_TIPS:
            raise ValueError(f"frame at t={t} has {len(frame)} fingertips, expected {N_TIPS}")
        for f, vals in frame.items():
            tips[i, f, : min(3, len(vals))] = vals[:3]
            if len(vals) >= 4:
                assign[i, f] = int(vals[3])
    return FingertipTrajectory(times, tips, assign)


def write_pixel_csv(times, pixels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "finger_id", "u", "v"])
    for i, t in enumerate(times):
        for f in range(N_TIPS):
            w.writerow([repr(float(t)), f, repr(float(pixels[i, f, 0])), repr(float(pixels[i, f, 1]))])
    return buf.getvalue()


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_correspondences(text: str) -> list[Correspondence]:
    return [Correspondence(tuple(c["pixel"]), tuple(c["plane"])) for c in json.loads(text)]


def write_correspondences(corr) -> str:
    return json.dumps([{"pixel": list(map(float, c.pixel)), "plane": list(map(float, c.plane))}
                       for c in corr], indent=1)


def map_fingertips(h, pixel_traj: FingertipTrajectory) -> FingertipTrajectory:
    """Apply the homography to every (u, v) fingertip sample."""
    T = len(pixel_traj)
    uv = pixel_traj.tips[:, :, :2].reshape(-1, 2)
    xy = apply_homography(h, uv).reshape(T, N_TIPS, 2)
    return FingertipTrajectory(pixel_traj.times.copy(), xy)


# --------------------------------------------------------------------------
# alignment


@dataclass
class AlignmentReport:
    unserved: list[tuple[int, int]] = field(default_factory=list)  # (frame, key)
    n_pressed: int = 0

    def to_json(self) -> str:
        frames: dict[int, list[int]] = {}
        for i, k in self.unserved:
            frames.setdefault(i, []).append(k)
        return json.dumps(
            {
                "n_pressed_key_events": self.n_pressed,
                "n_unserved": len(self.unserved),
                "unserved": [{"frame": i, "keys": ks} for i, ks in sorted(frames.items())],
            },
            indent=1,
        )


def _align_frame(xy: np.ndarray, keys: np.ndarray, geom: KeyGeometry, search: int):
    """Snap tips in one frame. Returns (new y, assignment, unserved keys)."""
    y = xy[:, 1].copy()
    assign = np.full(N_TIPS, UNASSIGNED, dtype=int)
    lo, hi = geom.y_lo, geom.y_hi
    pending = []
    for k in keys:
        inside = [
            f for f in range(N_TIPS)
            if assign[f] == UNASSIGNED and lo[k] <= y[f] < hi[k]
        ]
        if inside:
            f = min(inside, key=lambda f: (abs(y[f] - geom.center_y[k]), f))
            assign[f] = k
            y[f] = geom.center_y[k]
        else:
            pending.append(k)

    # nearest tip inside the +-search neighbourhood of each remaining key;
    # closer claims are honoured first, ties go to the lower key index
    claims = []
    for k in pending:
        a, b = max(0, k - search), min(len(lo) - 1, k + search)
        rlo, rhi = lo[a : b + 1].min(), hi[a : b + 1].max()
        cands = [f for f in range(N_TIPS) if rlo <= y[f] < rhi]
        if not cands:
            claims.append((np.inf, k, None))
            continue
        f = min(cands, key=lambda f: (abs(y[f] - geom.center_y[k]), f))
        claims.append((abs(y[f] - geom.center_y[k]), k, f))
    unserved = []
    for _, k, f in sorted(claims, key=lambda c: (c[0], c[1])):
        if f is None or assign[f] != UNASSIGNED:
            unserved.append(k)
            continue
        assign[f] = k
        y[f] = geom.center_y[k]
    return y, assign, sorted(unserved)


def align_fingertips(
    traj: FingertipTrajectory,
    song: PianoStateTrajectory,
    geom: KeyGeometry,
    search_keys: int = 2,
) -> tuple[FingertipTrajectory, AlignmentReport]:
    """Snap fingertips onto the keys pressed in each frame.

    A tip already inside a pressed key's y-interval is moved to the key
    centre. Otherwise the nearest tip within ``search_keys`` key indices on
    either side is used, unless it already serves another key, in which case
    the key is reported unserved. Only y changes.
    """
    if len(traj) != len(song):
        raise ValueError(f"fingertip frames ({len(traj)}) and song frames ({len(song)}) differ")
    out = traj.copy()
    report = AlignmentReport()
    for i in range(len(traj)):
        keys = np.flatnonzero(song.keys[i])
        report.n_pressed += len(keys)
        if len(keys) == 0:
            out.assignment[i] = UNASSIGNED
            continue
        y, assign, unserved = _align_frame(traj.tips[i, :, :2], keys, geom, search_keys)
        out.tips[i, :, 1] = y
        out.assignment[i] = assign
        report.unserved.extend((i, k) for k in unserved)
    if report.unserved:
        logger.info("%d of %d pressed key events unserved", len(report.unserved), report.n_pressed)
    return out, report


def assign_z(traj: FingertipTrajectory, geom: KeyGeometry) -> FingertipTrajectory:
    """Pressing tips get z = 0, all others z = 2 * h_key."""
    out = traj.copy()
    out.tips[:, :, 2] = np.where(out.assignment >= 0, 0.0, 2 * geom.h_key)
    return out


def retarget(
    pixel_traj: FingertipTrajectory,
    correspondences,
    song: PianoStateTrajectory,
    geom: KeyGeometry,
    search_keys: int = 2,
) -> tuple[FingertipTrajectory, AlignmentReport, Homography]:
    """Homography fit, mapping, alignment and z assignment in one call."""
    H = estimate_homography(correspondences)
    plane = map_fingertips(H, pixel_traj)
    aligned, report = align_fingertips(plane, song, geom, search_keys)
    return assign_z(aligned, geom), report, H
