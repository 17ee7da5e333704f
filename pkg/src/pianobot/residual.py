"""Residual policies around the IK nominal and a cross-entropy trainer.

The applied control is ``u_t = clamp(nominal_t + r_t)`` with
``r_t = bound * clip(G phi(t) + W c(t), -1, 1)``:

* ``phi(t)`` are Gaussian bumps over the song phase, shared by all joints of
  one group. Each hand has eight groups: the x, y and z forearm slides and
  one flexion group per finger (MCP, PIP and DIP move together).
* ``c(t)`` holds two contact flags per finger, read from the demonstration:
  the finger presses at frame ``t`` and at frame ``t + 1``. They drive the
  finger's flexion group through two weights per hand.

Abduction joints and the pedal receive no residual.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from ._validation import check_random_state
from .env import EnvConfig, EpisodeLog, PianoEnv, simulate, simulate_arrays
from .kinematics import JOINTS_PER_HAND, N_ACTION, N_JOINTS, N_TIPS, HandModelSpec, clamp
from .keyboard import KeyGeometry
from .metrics import Metrics

logger = logging.getLogger(__name__)

GROUPS_PER_HAND = 8
N_GROUPS = 2 * GROUPS_PER_HAND
N_CONTACT = 2


class CemDiagnosticsError(RuntimeError):
    def __init__(self, message: str, sample_index: int, theta: np.ndarray):
        super().__init__(message)
        self.sample_index = sample_index
        self.theta = theta


def joint_groups() -> np.ndarray:
    """Group index of each of the 46 hand joints, -1 for abduction."""
    grp = np.full(N_JOINTS, -1, dtype=int)
    for h in range(2):
        off, goff = h * JOINTS_PER_HAND, h * GROUPS_PER_HAND
        grp[off : off + 3] = goff + np.arange(3)
        for f in range(5):
            base = off + 3 + 4 * f
            grp[base + 1 : base + 4] = goff + 3 + f
    return grp


def joint_fingers() -> np.ndarray:
    """Finger index (0..9) of each flexion joint, -1 for the rest."""
    fid = np.full(N_JOINTS, -1, dtype=int)
    for h in range(2):
        for f in range(5):
            base = h * JOINTS_PER_HAND + 3 + 4 * f
            fid[base + 1 : base + 4] = 5 * h + f
    return fid


def default_bounds(slide: float = 0.01, rotary: float = 0.05) -> np.ndarray:
    b = np.full(N_JOINTS, rotary)
    for h in range(2):
        b[h * JOINTS_PER_HAND : h * JOINTS_PER_HAND + 3] = slide
    return b


def phase_features(T: int, n_phase: int) -> np.ndarray:
    """``(T, n_phase)`` Gaussian bumps evenly spread over the song."""
    if n_phase < 1:
        raise ValueError("n_phase must be >= 1")
    s = np.arange(T) / max(T - 1, 1)
    if n_phase == 1:
        return np.ones((T, 1))
    centers = np.linspace(0.0, 1.0, n_phase)
    width = 1.0 / (n_phase - 1)
    return np.exp(-0.5 * ((s[:, None] - centers[None, :]) / width) ** 2)


def contact_features(demo_tips: np.ndarray, press_height: float) -> np.ndarray:
    """``(T, 10, 2)`` flags: finger presses now, finger presses next frame."""
    pressing = (np.asarray(demo_tips)[:, :, 2] < press_height).astype(np.float64)
    nxt = np.vstack([pressing[1:], np.zeros((1, N_TIPS))])
    return np.stack([pressing, nxt], axis=-1)


@dataclass
class ResidualPolicy:
    """Open-loop residual over a song; ``theta`` is ``[G (16 x n_phase), W (2 x 2)]``."""

    n_phase: int = 8
    theta: np.ndarray = None
    bounds: np.ndarray = field(default_factory=default_bounds)
    press_height: float = 0.01  # demo tips below this are pressing

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros(self.n_params)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.theta.shape != (self.n_params,):
            raise ValueError(f"theta must have {self.n_params} entries")
        if self.bounds.shape != (N_JOINTS,) or np.any(self.bounds < 0):
            raise ValueError("bounds must be 46 non-negative numbers")

    @property
    def n_params(self) -> int:
        return N_GROUPS * self.n_phase + 2 * N_CONTACT

    def with_theta(self, theta) -> "ResidualPolicy":
        return ResidualPolicy(self.n_phase, np.array(theta, dtype=np.float64), self.bounds.copy(),
                              self.press_height)

    def residuals(self, demo_tips) -> np.ndarray:
        """``(T, 46)`` residuals for a song with the given demonstration."""
        demo_tips = np.asarray(getattr(demo_tips, "tips", demo_tips), dtype=np.float64)
        T = len(demo_tips)
        G = self.theta[: N_GROUPS * self.n_phase].reshape(N_GROUPS, self.n_phase)
        W = self.theta[N_GROUPS * self.n_phase :].reshape(2, N_CONTACT)
        grp, fid = joint_groups(), joint_fingers()
        per_group = phase_features(T, self.n_phase) @ G.T  # (T, 16)
        u = np.where(grp >= 0, per_group[:, np.maximum(grp, 0)], 0.0)
        c = contact_features(demo_tips, self.press_height)  # (T, 10, 2)
        flex = fid >= 0
        hand = fid[flex] // 5
        u[:, flex] += np.einsum("tjc,jc->tj", c[:, fid[flex], :], W[hand])
        return self.bounds * np.clip(u, -1.0, 1.0)

    def actions(self, nominal, demo_tips, spec: HandModelSpec) -> np.ndarray:
        nominal = np.asarray(nominal, dtype=np.float64)
        u = nominal.copy()
        u[:, :N_JOINTS] += self.residuals(demo_tips)
        return clamp(spec, u)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "featurizer": {
                "n_phase": self.n_phase,
                "groups": joint_groups().tolist(),
                "contact_features": N_CONTACT,
                "press_height": self.press_height,
            },
            "bounds": self.bounds.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualPolicy":
        f = d["featurizer"]
        return cls(int(f["n_phase"]), np.array(d["theta"]), np.array(d["bounds"]),
                   float(f.get("press_height", 0.01)))

    @classmethod
    def from_json(cls, text: str) -> "ResidualPolicy":
        return cls.from_dict(json.loads(text))


def _check_lengths(song, demo, nominal):
    demo = np.asarray(getattr(demo, "tips", demo))
    if not len(song) == len(demo) == len(nominal):
        raise ValueError(
            f"song ({len(song)}), demo ({len(demo)}) and nominal ({len(nominal)}) lengths differ"
        )


def rollout(env: PianoEnv, song, demo, nominal, policy: ResidualPolicy) -> EpisodeLog:
    """Execute ``clamp(nominal + residual)`` for the whole song."""
    _check_lengths(song, demo, nominal)
    return simulate(env, song, demo, nominal, policy.actions(nominal, demo, env.spec))


def episode_return(env: PianoEnv, song, demo, nominal, policy: ResidualPolicy) -> float:
    _check_lengths(song, demo, nominal)
    return simulate_arrays(env, song, demo, nominal, policy.actions(nominal, demo, env.spec)).total_return


def evaluate_policy(env: PianoEnv, song, demo, nominal, policy: ResidualPolicy) -> Metrics:
    return rollout(env, song, demo, nominal, policy).metrics(env.cfg.press_threshold)


@dataclass
class CemConfig:
    population: int = 64
    elite_frac: float = 0.125
    iterations: int = 50
    init_std: float = 0.5
    std_floor: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.elite_frac < 1:
            raise ValueError("elite_frac must lie strictly between 0 and 1")
        if self.population < 4:
            raise ValueError("population must be >= 4")
        if self.iterations < 0 or self.init_std < 0 or self.std_floor < 0:
            raise ValueError("iterations and standard deviations must be non-negative")

    @property
    def n_elite(self) -> int:
        return max(1, int(round(self.population * self.elite_frac)))


@dataclass
class TrainingCurve:
    elite_mean: list[float] = field(default_factory=list)
    best: list[float] = field(default_factory=list)
    mean_return: list[float] = field(default_factory=list)  # return of the sampling mean

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "elite_mean_return", "best_return", "mean_policy_return"])
        for i, row in enumerate(zip(self.elite_mean, self.best, self.mean_return)):
            w.writerow([i] + [repr(float(v)) for v in row])
        return buf.getvalue()


def _evaluate_chunk(spec, geom, env_cfg, song, demo, nominal, template, thetas):
    env = PianoEnv(spec, geom, env_cfg)
    return [episode_return(env, song, demo, nominal, template.with_theta(th)) for th in thetas]


def cem_train(
    spec: HandModelSpec,
    song,
    demo,
    nominal,
    cfg: CemConfig | None = None,
    geom: KeyGeometry | None = None,
    env_cfg: EnvConfig | None = None,
    policy: ResidualPolicy | None = None,
    n_jobs: int = 1,
) -> tuple[ResidualPolicy, TrainingCurve]:
    """Cross-entropy search over the policy parameters.

    Candidates are drawn in the parent process from a seeded generator; the
    first candidate of every iteration is the current mean. Workers build
    their own environments, so results do not depend on ``n_jobs``.
    """
    cfg = cfg or CemConfig()
    geom = geom or KeyGeometry()
    env_cfg = env_cfg or EnvConfig()
    template = policy or ResidualPolicy()
    demo = np.asarray(getattr(demo, "tips", demo), dtype=np.float64)
    nominal = np.asarray(nominal, dtype=np.float64)
    _check_lengths(song, demo, nominal)
    rng = check_random_state(cfg.seed)
    dim = template.n_params
    mean = template.theta.copy()
    std = np.full(dim, cfg.init_std)
    best_theta, best_ret = mean.copy(), -np.inf
    curve = TrainingCurve()
    chunks = max(1, n_jobs if n_jobs > 0 else 1)
    pool = Parallel(n_jobs=n_jobs) if n_jobs != 1 else None

    for it in range(cfg.iterations):
        samples = mean + std * rng.standard_normal((cfg.population, dim))
        samples[0] = mean
        if pool is None:
            rets = _evaluate_chunk(spec, geom, env_cfg, song, demo, nominal, template, samples)
        else:
            parts = np.array_split(samples, chunks)
            res = pool(
                delayed(_evaluate_chunk)(spec, geom, env_cfg, song, demo, nominal, template, p)
                for p in parts
            )
            rets = [r for part in res for r in part]
        rets = np.asarray(rets)
        bad = np.flatnonzero(~np.isfinite(rets))
        if len(bad):
            i = int(bad[0])
            raise CemDiagnosticsError(
                f"iteration {it}: non-finite return for sample {i}", i, samples[i].copy()
            )
        # stable sort keeps the lower index on ties
        order = np.argsort(-rets, kind="stable")
        elite = samples[order[: cfg.n_elite]]
        if rets[order[0]] > best_ret:
            best_ret, best_theta = float(rets[order[0]]), samples[order[0]].copy()
        curve.elite_mean.append(float(rets[order[: cfg.n_elite]].mean()))
        curve.best.append(best_ret)
        curve.mean_return.append(float(rets[0]))
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), cfg.std_floor)
        logger.debug("cem iteration %d: best %.4f elite %.4f", it, best_ret, curve.elite_mean[-1])

    if cfg.iterations == 0:
        best_theta = mean
    return template.with_theta(best_theta), curve


class CEMResidualTrainer(BaseEstimator):
    """Scikit-learn style wrapper: ``fit`` trains on one song, ``predict``
    returns the executed actions."""

    def __init__(self, population=64, elite_frac=0.125, iterations=50, init_std=0.5,
                 std_floor=0.02, n_phase=8, seed=0, n_jobs=1, spec=None):
        self.population = population
        self.elite_frac = elite_frac
        self.iterations = iterations
        self.init_std = init_std
        self.std_floor = std_floor
        self.n_phase = n_phase
        self.seed = seed
        self.n_jobs = n_jobs
        self.spec = spec

    def fit(self, song, demo, nominal, geom=None, env_cfg=None):
        from .kinematics import default_spec

        self.spec_ = self.spec or default_spec()
        cfg = CemConfig(self.population, self.elite_frac, self.iterations, self.init_std,
                        self.std_floor, self.seed)
        self.policy_, self.curve_ = cem_train(
            self.spec_, song, demo, nominal, cfg, geom, env_cfg,
            ResidualPolicy(self.n_phase), n_jobs=self.n_jobs,
        )
        return self

    def predict(self, demo, nominal):
        return self.policy_.actions(nominal, demo, self.spec_)


def cem_config_dict(cfg: CemConfig) -> dict:
    return asdict(cfg)
