"""Piano-state signed distance field and the SDF-supervised goal autoencoder.

The SDF of a piano state at a 3-D point is the distance to the nearest
top-surface centre among the pressed keys. The autoencoder compresses a
state into a 16-dimensional code from which a decoder, given a positional
encoding of a query point, predicts that distance.
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .keyboard import KeyGeometry
from .nn import MLP, Adam, TrainingDivergedError
from .score import N_KEYS

D_MAX = 2.0


class CodecStateError(RuntimeError):
    pass


def _keys(state) -> np.ndarray:
    keys = np.asarray(getattr(state, "keys", state))
    if keys.shape[-1] != N_KEYS:
        raise ValueError(f"piano state must have {N_KEYS} keys")
    return keys.astype(bool)


def _sq_norm(v: np.ndarray) -> np.ndarray:
    # fixed left-to-right order so every route rounds identically
    return (v[..., 0] * v[..., 0] + v[..., 1] * v[..., 1]) + v[..., 2] * v[..., 2]


def sdf(x, state, geom: KeyGeometry | None = None, d_max: float = D_MAX, return_flag: bool = False):
    """Distance from ``x`` to the nearest pressed key centre.

    An empty state yields ``d_max``; with ``return_flag`` the result is
    ``(distance, empty)``.
    """
    geom = geom or KeyGeometry()
    keys = _keys(state)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise ValueError("query point must have 3 coordinates")
    centers = geom.key_centers[keys]
    if len(centers) == 0:
        d, empty = float(d_max), True
    else:
        d, empty = float(np.sqrt(_sq_norm(x - centers)).min()), False
    return (d, empty) if return_flag else d


def sdf_batch(X, states, geom: KeyGeometry | None = None, d_max: float = D_MAX) -> np.ndarray:
    """SDF for paired rows: ``X`` is ``(n, 3)`` and ``states`` is ``(n, 88)``."""
    geom = geom or KeyGeometry()
    X = np.asarray(X, dtype=np.float64)
    keys = _keys(states)
    if keys.ndim == 1:
        keys = np.broadcast_to(keys, (len(X), N_KEYS))
    d = np.sqrt(_sq_norm(X[:, None, :] - geom.key_centers[None, :, :]))
    d = np.where(keys, d, np.inf).min(axis=1)
    return np.where(np.isfinite(d), d, d_max)


def query_box(geom: KeyGeometry, inflate: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Keyboard bounding box grown by ``inflate`` of its extent, about its centre."""
    lo, hi = geom.bounding_box()
    c, half = (lo + hi) / 2, (hi - lo) / 2 * (1.0 + inflate)
    return c - half, c + half


def positional_encoding(x, n_freq: int = 6, box=None) -> np.ndarray:
    """``sin/cos(2^k pi u_d)`` with ``u`` the point scaled to [-1, 1] by ``box``.

    Works on ``(..., 3)`` inputs. Entries are ordered by coordinate, then
    frequency, then sin before cos, for ``6 * n_freq`` values per point.
    """
    if n_freq < 1:
        raise ValueError("n_freq must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3:
        raise ValueError("points must have 3 coordinates")
    if box is None:
        box = query_box(KeyGeometry())
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    u = 2.0 * (x - lo) / (hi - lo) - 1.0
    ang = np.pi * u[..., :, None] * (2.0 ** np.arange(n_freq))  # (..., 3, n_freq)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., 3, n_freq, 2)
    return enc.reshape(x.shape[:-1] + (6 * n_freq,))


class GoalAutoencoder(TransformerMixin, BaseEstimator):
    """SDF-supervised autoencoder for piano states.

    ``fit`` takes an ``(n, 88)`` array of states, ``transform`` returns the
    ``(n, latent_dim)`` codes and ``predict_sdf`` evaluates the decoder.
    """

    def __init__(
        self,
        encoder_sizes=(64, 32, 16),
        decoder_hidden=(32, 32),
        n_freq=6,
        lr=3e-3,
        epochs=800,
        states_per_batch=8,
        queries_per_state=64,
        inflate=0.2,
        d_max=D_MAX,
        seed=0,
    ):
        self.encoder_sizes = encoder_sizes
        self.decoder_hidden = decoder_hidden
        self.n_freq = n_freq
        self.lr = lr
        self.epochs = epochs
        self.states_per_batch = states_per_batch
        self.queries_per_state = queries_per_state
        self.inflate = inflate
        self.d_max = d_max
        self.seed = seed

    # -- construction --------------------------------------------------------

    @property
    def latent_dim(self) -> int:
        return int(self.encoder_sizes[-1])

    def _init(self, geom: KeyGeometry | None = None):
        if self.n_freq < 1:
            raise ValueError("n_freq must be >= 1")
        rng = np.random.default_rng(self.seed)
        self.geom_ = geom or KeyGeometry()
        self.box_ = query_box(self.geom_, self.inflate)
        self.encoder_ = MLP([N_KEYS, *self.encoder_sizes], rng)
        self.decoder_ = MLP([self.latent_dim + 6 * self.n_freq, *self.decoder_hidden, 1], rng)
        self._rng = rng

    def _check_fitted(self):
        if not hasattr(self, "encoder_"):
            raise CodecStateError("codec is not trained; call fit() or load weights first")

    @property
    def params(self) -> list[np.ndarray]:
        return self.encoder_.params + self.decoder_.params

    # -- forward / backward ------------------------------------------------

    def sample_queries(self, n: int, rng) -> np.ndarray:
        lo, hi = self.box_
        return rng.uniform(lo, hi, size=(n, 3))

    def loss_and_grad(self, states, queries):
        """Mean squared SDF error and gradients for one batch.

        ``states`` is ``(B, 88)`` and ``queries`` is ``(B, Q, 3)``.
        """
        states = _keys(states).astype(np.float64)
        B, Q = queries.shape[:2]
        target = sdf_batch(queries.reshape(-1, 3), np.repeat(states, Q, axis=0), self.geom_, self.d_max)
        z, enc_acts = self.encoder_.forward(states, cache=True)
        pe = positional_encoding(queries.reshape(-1, 3), self.n_freq, self.box_)
        inp = np.concatenate([np.repeat(z, Q, axis=0), pe], axis=1)
        pred, dec_acts = self.decoder_.forward(inp, cache=True)
        diff = pred[:, 0] - target
        loss = float(np.mean(diff**2))
        d_pred = (2.0 * diff / diff.size)[:, None]
        g_dec, d_inp = self.decoder_.backward(dec_acts, d_pred)
        d_z = d_inp[:, : self.latent_dim].reshape(B, Q, -1).sum(axis=1)
        g_enc, _ = self.encoder_.backward(enc_acts, d_z)
        return loss, g_enc + g_dec

    def fit(self, X, y=None, geom: KeyGeometry | None = None):
        X = _keys(X)
        if X.ndim != 2 or not X.any(axis=1).any():
            raise ValueError("training needs at least one state with a pressed key")
        self._init(geom)
        rng = self._rng
        opt = Adam(self.params, self.lr)
        self.loss_curve_ = []
        n = len(X)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for s in range(0, n, self.states_per_batch):
                idx = order[s : s + self.states_per_batch]
                q = self.sample_queries(len(idx) * self.queries_per_state, rng).reshape(
                    len(idx), self.queries_per_state, 3
                )
                loss, grads = self.loss_and_grad(X[idx], q)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"codec loss became non-finite in epoch {epoch}", epoch)
                opt.step(grads)
                total += loss * len(idx)
            self.loss_curve_.append(total / n)
        return self

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        keys = _keys(X).astype(np.float64)
        single = keys.ndim == 1
        z = self.encoder_.forward(np.atleast_2d(keys))
        return z[0] if single else z

    encode = transform

    def predict_sdf(self, states, queries) -> np.ndarray:
        """Decoder output for paired ``(n, 88)`` states and ``(n, 3)`` queries."""
        self._check_fitted()
        z = self.transform(np.atleast_2d(_keys(states)))
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if len(z) == 1 and len(queries) > 1:
            z = np.repeat(z, len(queries), axis=0)
        pe = positional_encoding(queries, self.n_freq, self.box_)
        return self.decoder_.forward(np.concatenate([z, pe], axis=1))[:, 0]

    def rmse(self, states, n_queries: int = 64, seed: int = 12345) -> float:
        """Root-mean-square SDF error on fresh uniform queries."""
        self._check_fitted()
        rng = np.random.default_rng(seed)
        states = np.atleast_2d(_keys(states))
        S = np.repeat(states, n_queries, axis=0)
        Q = self.sample_queries(len(S), rng)
        err = self.predict_sdf(S, Q) - sdf_batch(Q, S, self.geom_, self.d_max)
        return float(np.sqrt(np.mean(err**2)))

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "geometry": self.geom_.to_dict(),
            "box": [self.box_[0].tolist(), self.box_[1].tolist()],
            "encoder": self.encoder_.to_dict(),
            "decoder": self.decoder_.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "GoalAutoencoder":
        p = dict(d["params"])
        p["encoder_sizes"] = tuple(p["encoder_sizes"])
        p["decoder_hidden"] = tuple(p["decoder_hidden"])
        m = cls(**p)
        m.geom_ = KeyGeometry.from_dict(d["geometry"])
        m.box_ = (np.array(d["box"][0]), np.array(d["box"][1]))
        m.encoder_ = MLP.from_dict(d["encoder"])
        m.decoder_ = MLP.from_dict(d["decoder"])
        return m

    @classmethod
    def from_json(cls, text: str) -> "GoalAutoencoder":
        return cls.from_dict(json.loads(text))

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, l in enumerate(getattr(self, "loss_curve_", [])):
            w.writerow([i, repr(float(l))])
        return buf.getvalue()
