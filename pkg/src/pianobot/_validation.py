"""Input validation shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_points(pts, dim: int = 2, name: str = "points", min_rows: int = 1) -> np.ndarray:
    """Finite float array of shape (n, dim)."""
    arr = check_array(pts, dtype=np.float64, ensure_min_samples=min_rows, input_name=name)
    if arr.shape[1] != dim:
        raise ValueError(f"{name} must have {dim} columns, got {arr.shape[1]}")
    return arr


def check_finite(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_same_length(**seqs) -> int:
    lengths = {k: len(v) for k, v in seqs.items()}
    if len(set(lengths.values())) > 1:
        detail = ", ".join(f"{k}={n}" for k, n in lengths.items())
        raise ValueError(f"length mismatch: {detail}")
    return next(iter(lengths.values()))


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
