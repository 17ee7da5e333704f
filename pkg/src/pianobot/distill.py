"""Distillation of song-specific experts into a two-stage policy.

The high-level policy maps ten future goal codes plus the current fingertips
to fingertip targets for the next four frames. The low-level policy maps
those targets, the four matching goal codes and proprioception (joint
positions, velocities and key positions) to four frames of joint targets,
either directly or as residuals on top of IK tracking of the targets.
Execution re-plans every four frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .codec import GoalAutoencoder
from .env import EpisodeLog, PianoEnv, record_step
from .ik import IkParams, ik_step
from .kinematics import N_ACTION, N_JOINTS, N_TIPS, HandModelSpec, clamp, forward_kinematics
from .keyboard import KeyGeometry
from .metrics import Metrics
from .nn import MLP, Standardizer, fit_regressor
from .residual import ResidualPolicy, rollout
from .retarget import _align_frame
from .score import N_KEYS, PianoStateTrajectory

CHUNK = 4
GOAL_HORIZON = 10


# --------------------------------------------------------------------------
# dataset


@dataclass
class SongRecord:
    """Time-aligned trajectories of one expert rollout.

    Row ``t`` of every array refers to control frame ``t``: the state the
    expert saw before acting, the action it sent, the demonstrator
    fingertips and the goal of that frame.
    """

    name: str
    q: np.ndarray  # (T, 47) state before the action
    qdot: np.ndarray  # (T, 46)
    key_positions: np.ndarray  # (T, 88)
    actions: np.ndarray | None  # (T, 47) or None for songs without expert labels
    tips: np.ndarray  # (T, 10, 3) demonstrator fingertips
    goals: np.ndarray  # (T, 88)
    nominal: np.ndarray  # (T, 47) IK solution for the demonstrator fingertips

    def __post_init__(self):
        T = len(self.goals)
        arrays = {"q": self.q, "qdot": self.qdot, "key_positions": self.key_positions,
                  "tips": self.tips, "nominal": self.nominal}
        if self.actions is not None:
            arrays["actions"] = self.actions
        bad = {k: len(v) for k, v in arrays.items() if len(v) != T}
        if bad:
            raise ValueError(f"song {self.name}: lengths {bad} differ from {T} goal frames")

    def __len__(self) -> int:
        return len(self.goals)

    @property
    def has_actions(self) -> bool:
        return self.actions is not None

    def to_jsonl(self) -> str:
        lines = []
        for t in range(len(self)):
            row = {
                "t": t,
                "q": self.q[t].tolist(),
                "qdot": self.qdot[t].tolist(),
                "k_s": self.key_positions[t].tolist(),
                "action": None if self.actions is None else self.actions[t].tolist(),
                "tips": self.tips[t].tolist(),
                "goal": np.flatnonzero(self.goals[t]).tolist(),
                "nominal": self.nominal[t].tolist(),
            }
            lines.append(json.dumps(row, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, name: str, text: str) -> "SongRecord":
        rows = [json.loads(l) for l in text.splitlines() if l.strip()]
        goals = np.zeros((len(rows), N_KEYS), dtype=np.uint8)
        for i, r in enumerate(rows):
            goals[i, r["goal"]] = 1
        has = rows[0]["action"] is not None
        return cls(
            name,
            np.array([r["q"] for r in rows]),
            np.array([r["qdot"] for r in rows]),
            np.array([r["k_s"] for r in rows]),
            np.array([r["action"] for r in rows]) if has else None,
            np.array([r["tips"] for r in rows]),
            goals,
            np.array([r["nominal"] for r in rows]),
        )


@dataclass
class DistillDataset:
    songs: list[SongRecord] = field(default_factory=list)

    def __post_init__(self):
        names = [s.name for s in self.songs]
        if len(set(names)) != len(names):
            raise ValueError("song names must be unique")

    def __len__(self) -> int:
        return len(self.songs)

    @property
    def n_frames(self) -> int:
        return sum(len(s) for s in self.songs)

    def stats(self) -> dict:
        return {
            "songs": len(self.songs),
            "frames": self.n_frames,
            "songs_with_actions": sum(s.has_actions for s in self.songs),
        }

    def subset(self, names) -> "DistillDataset":
        by = {s.name: s for s in self.songs}
        missing = [n for n in names if n not in by]
        if missing:
            raise KeyError(f"songs not in dataset: {missing}")
        return DistillDataset([by[n] for n in names])

    def save(self, path) -> None:
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"songs": []}
        for s in self.songs:
            fname = f"{s.name}.jsonl"
            (out / fname).write_text(s.to_jsonl())
            manifest["songs"].append({"name": s.name, "file": fname, "frames": len(s),
                                      "has_actions": s.has_actions})
        manifest["stats"] = self.stats()
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DistillDataset":
        src = Path(path)
        manifest = json.loads((src / "manifest.json").read_text())
        return cls([SongRecord.from_jsonl(e["name"], (src / e["file"]).read_text())
                    for e in manifest["songs"]])


@dataclass
class Expert:
    name: str
    song: PianoStateTrajectory
    demo: np.ndarray  # (T, 10, 3)
    nominal: np.ndarray  # (T, 47)
    policy: ResidualPolicy | None  # None: no expert actions for this song


def _record(expert: Expert, spec, geom, env_cfg) -> SongRecord:
    demo = np.asarray(getattr(expert.demo, "tips", expert.demo), dtype=np.float64)
    if not len(expert.song) == len(demo) == len(expert.nominal):
        raise ValueError(f"expert {expert.name}: song, demo and nominal lengths differ")
    if expert.policy is None:
        T = len(expert.song)
        return SongRecord(expert.name, np.tile(expert.nominal[0], (T, 1)), np.zeros((T, N_JOINTS)),
                          np.zeros((T, N_KEYS)), None, demo, expert.song.keys.copy(),
                          np.asarray(expert.nominal, dtype=np.float64))
    env = PianoEnv(spec, geom, env_cfg)
    log = rollout(env, expert.song, demo, expert.nominal, expert.policy)
    return SongRecord(
        expert.name,
        np.array(log.q_before),
        np.array(log.qdot_before),
        np.array(log.keys_before),
        np.array(log.action),
        demo,
        expert.song.keys.copy(),
        np.asarray(expert.nominal, dtype=np.float64),
    )


def build_dataset(experts, spec: HandModelSpec, geom: KeyGeometry | None = None, env_cfg=None,
                  n_jobs: int = 1) -> DistillDataset:
    """Roll out every expert on its song and collect aligned trajectories."""
    geom = geom or KeyGeometry()
    if not experts:
        raise ValueError("need at least one expert")
    records = Parallel(n_jobs=n_jobs)(delayed(_record)(e, spec, geom, env_cfg) for e in experts)
    return DistillDataset(list(records))


# --------------------------------------------------------------------------
# feature assembly


def latent_sequence(codec: GoalAutoencoder, goals: np.ndarray, pad: int) -> np.ndarray:
    """Codes for every frame followed by ``pad`` codes of the empty state."""
    padded = np.vstack([goals, np.zeros((pad, N_KEYS), dtype=goals.dtype)])
    return codec.transform(padded)


def _window(arr: np.ndarray, t: int, n: int) -> np.ndarray:
    """``arr[t : t + n]`` with the last row repeated past the end."""
    idx = np.minimum(np.arange(t, t + n), len(arr) - 1)
    return arr[idx]


def high_level_input(latents, t, cur_tips) -> np.ndarray:
    return np.concatenate([latents[t : t + GOAL_HORIZON].ravel(), np.asarray(cur_tips).ravel()])


def low_level_input(tips4, latents, t, q, qdot, k_s) -> np.ndarray:
    return np.concatenate([
        np.asarray(tips4).ravel(),
        latents[t : t + CHUNK].ravel(),
        np.asarray(q)[:N_JOINTS],
        np.asarray(qdot),
        np.asarray(k_s),
    ])


def postprocess_high_level(pred, goals, geom: KeyGeometry, search_keys: int = 2) -> np.ndarray:
    """Snap predicted fingertips onto goal keys, y only, one frame at a time.

    ``pred`` is ``(n, 10, 3)`` (or a single ``(10, 3)`` frame) and ``goals``
    the matching ``(n, 88)`` goal frames.
    """
    pred = np.array(pred, dtype=np.float64)
    single = pred.ndim == 2
    if single:
        pred, goals = pred[None], np.asarray(goals)[None]
    for i in range(len(pred)):
        keys = np.flatnonzero(goals[i])
        if len(keys):
            y, _, _ = _align_frame(pred[i, :, :2], keys, geom, search_keys)
            pred[i, :, 1] = y
    return pred[0] if single else pred


# --------------------------------------------------------------------------
# policies


class _Regressor:
    """MLP with standardized inputs and outputs."""

    def __init__(self, hidden=(256, 256), lr=1e-3, epochs=1000, batch_size=64, seed=0):
        self.hidden = tuple(hidden)
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _fit_xy(self, X, Y, input_noise=None):
        rng = np.random.default_rng(self.seed)
        self.x_scale_ = Standardizer().fit(X)
        self.y_scale_ = Standardizer().fit(Y)
        self.net_ = MLP([X.shape[1], *self.hidden, Y.shape[1]], rng)
        self.loss_curve_ = fit_regressor(
            self.net_, self.x_scale_.transform(X), self.y_scale_.transform(Y), self.epochs,
            self.lr, self.batch_size, rng, input_noise,
        )
        return self

    def _predict(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.y_scale_.inverse_transform(self.net_.forward(self.x_scale_.transform(X)))

    def _state(self) -> dict:
        return {
            "hidden": list(self.hidden), "lr": self.lr, "epochs": self.epochs,
            "batch_size": self.batch_size, "seed": self.seed,
            "x_scale": self.x_scale_.to_dict(), "y_scale": self.y_scale_.to_dict(),
            "net": self.net_.to_dict(), "loss_curve": list(self.loss_curve_),
        }

    def _load_state(self, d: dict):
        self.x_scale_ = Standardizer.from_dict(d["x_scale"])
        self.y_scale_ = Standardizer.from_dict(d["y_scale"])
        self.net_ = MLP.from_dict(d["net"])
        self.loss_curve_ = d.get("loss_curve", [])
        return self


class HighLevelPolicy(_Regressor):
    """Goal codes over ten frames + current fingertips -> fingertips over four frames."""

    def __init__(self, hidden=(256, 256), lr=1e-3, epochs=1000, batch_size=64, seed=0, tip_noise=1.0):
        super().__init__(hidden, lr, epochs, batch_size, seed)
        self.tip_noise = tip_noise

    @staticmethod
    def samples(dataset: DistillDataset, codec: GoalAutoencoder, spec: HandModelSpec):
        X, Y = [], []
        for s in dataset.songs:
            lat = latent_sequence(codec, s.goals, GOAL_HORIZON)
            cur = forward_kinematics(spec, s.q)
            for t in range(len(s)):
                X.append(high_level_input(lat, t, cur[t]))
                Y.append(_window(s.tips, t, CHUNK).ravel())
        return np.array(X), np.array(Y)

    def fit(self, dataset: DistillDataset, codec: GoalAutoencoder, spec: HandModelSpec):
        X, Y = self.samples(dataset, codec, spec)
        n_tip = N_TIPS * 3
        noise = self.tip_noise

        def perturb(xb, rng):
            # unit-variance noise on the standardized current fingertips
            if noise == 0:
                return xb
            xb = xb.copy()
            xb[:, -n_tip:] += noise * rng.standard_normal((len(xb), n_tip))
            return xb

        return self._fit_xy(X, Y, perturb)

    def predict(self, X) -> np.ndarray:
        return self._predict(X).reshape(-1, CHUNK, N_TIPS, 3)

    def to_dict(self) -> dict:
        return {"kind": "high_level", "tip_noise": self.tip_noise, **self._state()}

    @classmethod
    def from_dict(cls, d: dict) -> "HighLevelPolicy":
        m = cls(tuple(d["hidden"]), d["lr"], d["epochs"], d["batch_size"], d["seed"], d["tip_noise"])
        return m._load_state(d)


class LowLevelPolicy(_Regressor):
    """Fingertips + goal codes over four frames + proprioception -> four
    frames of joint targets (``direct``) or IK residuals (``residual``)."""

    def __init__(self, mode="residual", hidden=(256, 256), lr=1e-3, epochs=1000, batch_size=64, seed=0):
        if mode not in ("direct", "residual"):
            raise ValueError("mode must be 'direct' or 'residual'")
        super().__init__(hidden, lr, epochs, batch_size, seed)
        self.mode = mode

    def samples(self, dataset: DistillDataset, codec: GoalAutoencoder):
        X, Y = [], []
        for s in dataset.songs:
            if not s.has_actions:
                continue
            lat = latent_sequence(codec, s.goals, GOAL_HORIZON)
            target = s.actions - s.nominal if self.mode == "residual" else s.actions
            for t in range(len(s)):
                X.append(low_level_input(_window(s.tips, t, CHUNK), lat, t, s.q[t], s.qdot[t],
                                         s.key_positions[t]))
                Y.append(_window(target, t, CHUNK).ravel())
        if not X:
            raise ValueError("no songs with expert actions in the dataset")
        return np.array(X), np.array(Y)

    def fit(self, dataset: DistillDataset, codec: GoalAutoencoder):
        X, Y = self.samples(dataset, codec)
        return self._fit_xy(X, Y)

    def predict(self, X) -> np.ndarray:
        return self._predict(X).reshape(-1, CHUNK, N_ACTION)

    def zero(self, n_in: int) -> "LowLevelPolicy":
        """Set every output to zero (useful to isolate the IK path)."""
        self.x_scale_ = Standardizer(np.zeros(n_in), np.ones(n_in))
        self.y_scale_ = Standardizer(np.zeros(CHUNK * N_ACTION), np.ones(CHUNK * N_ACTION))
        self.net_ = MLP([n_in, 1, CHUNK * N_ACTION], 0)
        for W, b in zip(self.net_.W, self.net_.b):
            W[...] = 0.0
            b[...] = 0.0
        self.loss_curve_ = []
        return self

    def to_dict(self) -> dict:
        return {"kind": "low_level", "mode": self.mode, **self._state()}

    @classmethod
    def from_dict(cls, d: dict) -> "LowLevelPolicy":
        m = cls(d["mode"], tuple(d["hidden"]), d["lr"], d["epochs"], d["batch_size"], d["seed"])
        return m._load_state(d)


def save_policy(policy, path) -> None:
    Path(path).write_text(json.dumps(policy.to_dict()))


def load_policy(path):
    d = json.loads(Path(path).read_text())
    return (HighLevelPolicy if d["kind"] == "high_level" else LowLevelPolicy).from_dict(d)


# --------------------------------------------------------------------------
# execution


@dataclass
class ExecutionInfo:
    invocations: int = 0
    planned_tips: list = field(default_factory=list)  # (4, 10, 3) per invocation


def chunked_execute(
    env: PianoEnv,
    codec: GoalAutoencoder,
    hl: HighLevelPolicy | None,
    ll: LowLevelPolicy | None,
    song: PianoStateTrajectory,
    demo,
    nominal,
    ik_params: IkParams | None = None,
    oracle_high_level: bool = False,
    oracle_actions=None,
    postprocess: bool = True,
) -> tuple[EpisodeLog, Metrics, ExecutionInfo]:
    """Run the two-stage policy in chunks of four frames.

    ``demo`` and ``nominal`` set up the environment (mimic reward and start
    pose). With ``oracle_high_level`` the demonstrator fingertips replace the
    high-level prediction; ``oracle_actions`` bypasses the low-level policy.
    """
    demo = np.asarray(getattr(demo, "tips", demo), dtype=np.float64)
    env.reset(song, demo, nominal)
    ik_params = ik_params or IkParams()
    spec, geom = env.spec, env.geom
    T = len(song)
    lat = latent_sequence(codec, song.keys, GOAL_HORIZON)
    goals_padded = np.vstack([song.keys, np.zeros((CHUNK, N_KEYS), dtype=song.keys.dtype)])
    log, info = EpisodeLog(), ExecutionInfo()
    q_ik = env.q.copy()
    for t in range(0, T, CHUNK):
        n = min(CHUNK, T - t)
        info.invocations += 1
        if oracle_high_level:
            tips4 = _window(demo, t, CHUNK)
        else:
            cur = forward_kinematics(spec, env.q)
            tips4 = hl.predict(high_level_input(lat, t, cur))[0]
            if postprocess:
                tips4 = postprocess_high_level(tips4, goals_padded[t : t + CHUNK], geom)
        info.planned_tips.append(tips4)
        if oracle_actions is not None:
            acts = np.asarray(oracle_actions)[t : t + n]
        else:
            x = low_level_input(tips4, lat, t, env.q, env.qdot, env.k_s)
            out = ll.predict(x)[0]
            if ll.mode == "residual":
                base = np.empty((CHUNK, N_ACTION))
                for i in range(CHUNK):
                    for _ in range(ik_params.max_inner_iters):
                        _, q_ik, _ = ik_step(spec, q_ik, tips4[i], ik_params)
                    base[i] = q_ik
                out = base + out
            acts = clamp(spec, out[:n])
        for a in acts:
            record_step(env, log, a)
    return log, log.metrics(env.cfg.press_threshold), info


def expected_invocations(T: int) -> int:
    return math.ceil(T / CHUNK)


def read_split(path) -> dict:
    d = json.loads(Path(path).read_text())
    if not isinstance(d.get("train"), list) or not isinstance(d.get("test"), list):
        raise ValueError("split file needs 'train' and 'test' lists of song ids")
    return d
