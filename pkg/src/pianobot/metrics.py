"""Frame-level precision, recall and F1 over key presses.

Counts run over every (frame, key) cell. Empty denominators follow the
convention precision = 1 when nothing was pressed and recall = 1 when
nothing was asked for. The sustain pedal is not scored.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .score import N_KEYS


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _as_binary(x, name: str) -> np.ndarray:
    arr = np.asarray(getattr(x, "keys", x))
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D (frames, keys) array")
    if arr.shape[1] != N_KEYS and arr.shape[0] == N_KEYS:
        arr = arr.T
    if arr.shape[1] != N_KEYS:
        raise ValueError(f"{name} must have {N_KEYS} keys per frame, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary")
    return arr.astype(bool)


def from_counts(tp: int, fp: int, fn: int) -> Metrics:
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return Metrics(float(p), float(r), float(f1), int(tp), int(fp), int(fn))


def compute_metrics(pressed, goal) -> Metrics:
    """Metrics for a pressed trajectory against a goal trajectory.

    Both inputs are ``(T, 88)`` binary arrays (``(88, T)`` is accepted too)
    or objects exposing such an array as ``.keys``.
    """
    a = _as_binary(pressed, "pressed")
    b = _as_binary(goal, "goal")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: pressed {a.shape} vs goal {b.shape}")
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    return from_counts(tp, fp, fn)


def metrics_table_csv(rows: dict[str, Metrics]) -> str:
    """Per-song table: song, precision, recall, f1, tp, fp, fn."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["song", "precision", "recall", "f1", "tp", "fp", "fn"])
    for name in sorted(rows):
        m = rows[name]
        w.writerow([name, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}", m.tp, m.fp, m.fn])
    return buf.getvalue()
