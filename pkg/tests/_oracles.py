"""Independent reference implementations used by the test suite.

Each oracle is written from the definition, without calling into the
package, so that agreement is evidence rather than tautology.
"""

import numpy as np
from scipy.optimize import lsq_linear


def random_homography(rng):
    """A well-conditioned projective map with mild perspective."""
    while True:
        h = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
        h[2, :2] = 0.05 * rng.standard_normal(2)
        h[2, 2] = 1.0
        if np.linalg.cond(h) < 20:
            return h


def project(h, pts):
    out = []
    for u, v in pts:
        x = h[0, 0] * u + h[0, 1] * v + h[0, 2]
        y = h[1, 0] * u + h[1, 1] * v + h[1, 2]
        w = h[2, 0] * u + h[2, 1] * v + h[2, 2]
        out.append((x / w, y / w))
    return np.array(out)


def count_cells(pressed, goal):
    tp = fp = fn = 0
    for t in range(len(pressed)):
        for k in range(len(pressed[t])):
            p, g = int(pressed[t][k]), int(goal[t][k])
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
    return tp, fp, fn


def prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def box_qp_dense(H, c, lb, ub):
    """Minimize 0.5 x'Hx - c'x on a box via a bounded least-squares solve.

    With H = L L' the objective equals 0.5 ||L' x - L^-1 c||^2 up to a
    constant, which scipy's BVLS solves directly.
    """
    L = np.linalg.cholesky(H)
    A = L.T
    b = np.linalg.solve(L, c)
    res = lsq_linear(A, b, bounds=(lb, ub), method="bvls", tol=1e-14, lsq_solver="exact")
    return res.x


def qp_objective(H, c, x):
    return 0.5 * x @ H @ x - c @ x


def sdf_bruteforce(x, pressed_centres, d_max):
    best = None
    for p in pressed_centres:
        d = float(np.sqrt(sum((x[i] - p[i]) * (x[i] - p[i]) for i in range(3))))
        best = d if best is None or d < best else best
    return d_max if best is None else best


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)
