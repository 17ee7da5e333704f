"""Small fully connected networks with hand-written backpropagation."""

from __future__ import annotations

import json

import numpy as np


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class MLP:
    """``tanh`` hidden layers and a linear output layer.

    Weights use Glorot-uniform initialization from the given generator.
    """

    def __init__(self, sizes, rng=None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least an input and an output size, all positive")
        self.sizes = sizes
        rng = np.random.default_rng(rng)
        self.W, self.b = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (n_in + n_out))
            self.W.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
            self.b.append(np.zeros(n_out))

    # -- parameters ----------------------------------------------------------

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.W, self.b):
            out += [W, b]
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for p in self.params:
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size
        if i != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "MLP":
        m = MLP.__new__(MLP)
        m.sizes = list(self.sizes)
        m.W = [w.copy() for w in self.W]
        m.b = [b.copy() for b in self.b]
        return m

    # -- passes ------------------------------------------------------------

    def forward(self, X, cache: bool = False):
        h = np.asarray(X, dtype=np.float64)
        acts = [h]
        last = len(self.W) - 1
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            h = h @ W + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if cache else h

    __call__ = forward

    def backward(self, acts, dY):
        """Gradients of ``sum(dY * Y)`` w.r.t. parameters and input.

        Returns ``(grads, dX)`` with grads ordered like :attr:`params`.
        """
        grads = [None] * (2 * len(self.W))
        d = np.asarray(dY, dtype=np.float64)
        for i in range(len(self.W) - 1, -1, -1):
            if i < len(self.W) - 1:
                d = d * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ self.W[i].T
        return grads, d

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activation": "tanh",
            "layers": [
                {"shape": list(W.shape), "weight": W.ravel().tolist(), "bias": b.tolist()}
                for W, b in zip(self.W, self.b)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        m = cls.__new__(cls)
        m.sizes = [int(s) for s in d["sizes"]]
        m.W = [np.array(l["weight"], dtype=np.float64).reshape(l["shape"]) for l in d["layers"]]
        m.b = [np.array(l["bias"], dtype=np.float64) for l in d["layers"]]
        return m

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Standardizer:
    """Per-feature affine scaling fitted on training data."""

    def __init__(self, mean=None, scale=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.scale = None if scale is None else np.asarray(scale, dtype=np.float64)

    def fit(self, X, min_scale: float = 1e-6) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        self.mean = X.mean(axis=0)
        self.scale = np.maximum(X.std(axis=0), min_scale)
        return self

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def inverse_transform(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(d["mean"], d["scale"])


def mse_grad(pred, target):
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def fit_regressor(
    net: MLP,
    X,
    Y,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    rng=None,
    input_noise=None,
) -> list[float]:
    """Mini-batch MSE regression with Adam. Returns the per-epoch mean loss.

    ``input_noise`` optionally maps ``(batch, rng)`` to a perturbed batch.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    rng = np.random.default_rng(rng)
    opt = Adam(net.params, lr)
    curve = []
    n = len(X)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            xb = X[idx]
            if input_noise is not None:
                xb = input_noise(xb, rng)
            pred, acts = net.forward(xb, cache=True)
            loss, d = mse_grad(pred, Y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}", epoch)
            grads, _ = net.backward(acts, d)
            opt.step(grads)
            total += loss * len(idx)
        curve.append(total / n)
    return curve
