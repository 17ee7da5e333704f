"""Geometric piano environment.

Joints follow their targets with first-order dynamics inside a substep loop;
keys are depressed by fingertips that sink below the key surface. Rewards
follow the key-press / fingertip-mimic split with weights 2/3 and 1/3.

Time indexing: the observation handed out before step ``t`` carries the goal
frames ``t .. t+L-1``, the demonstrator fingertips of frame ``t`` and the
nominal action of frame ``t``; the action of step ``t`` is scored against
song frame ``t`` once its substeps have run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .kinematics import N_ACTION, N_JOINTS, N_TIPS, PEDAL, HandModelSpec, clamp, forward_kinematics
from .keyboard import KeyGeometry
from .metrics import Metrics, compute_metrics
from .score import N_KEYS, PianoStateTrajectory, frames_from


class EnvStateError(RuntimeError):
    pass


@dataclass
class EnvConfig:
    control_hz: float = 20.0
    substep_hz: float = 500.0
    key_travel: float = 0.008
    press_threshold: float = 0.5
    tau_track: float = 0.025
    sigma_g: float = 0.01
    key_weight: float = 2 / 3
    mimic_weight: float = 1 / 3
    lookahead: int = 10

    def __post_init__(self):
        ratio = self.substep_hz / self.control_hz
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("substep_hz must be a positive multiple of control_hz")
        if abs(self.key_weight + self.mimic_weight - 1.0) > 1e-12:
            raise ValueError("reward weights must sum to 1")
        if self.tau_track <= 0 or self.sigma_g <= 0 or self.key_travel <= 0:
            raise ValueError("tau_track, sigma_g and key_travel must be positive")

    @property
    def n_substeps(self) -> int:
        return int(round(self.substep_hz / self.control_hz))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def g(d, sigma: float):
    """Distance-to-reward map onto [0, 1]: ``1 - tanh(d / sigma)``."""
    return 1.0 - np.tanh(np.asarray(d, dtype=np.float64) / sigma)


def key_press_terms(k_s, goal, cfg: EnvConfig) -> np.ndarray:
    """Key-press reward for stacked frames: ``k_s`` and ``goal`` are ``(..., 88)``."""
    k_s = np.asarray(k_s, dtype=np.float64)
    goal = np.asarray(goal).astype(bool)
    if k_s.shape != goal.shape:
        raise ValueError("key state and goal shapes differ")
    d = np.sqrt(np.sum(np.where(goal, (k_s - 1.0) ** 2, 0.0), axis=-1))
    fp = np.any(~goal & (k_s >= cfg.press_threshold), axis=-1)
    return 0.5 * g(d, cfg.sigma_g) + 0.5 * np.where(fp, 0.0, 1.0)


def mimic_terms(robot_tips, demo_tips, cfg: EnvConfig) -> np.ndarray:
    """Mimic reward for stacked frames of ``(..., 10, 3)`` fingertips."""
    r = np.asarray(robot_tips, dtype=np.float64)
    d = np.asarray(demo_tips, dtype=np.float64)
    if r.shape[-2:] != (N_TIPS, 3) or r.shape != d.shape:
        raise ValueError("fingertips must have shape (..., 10, 3)")
    return g(np.sqrt(np.sum((r - d) ** 2, axis=(-2, -1))), cfg.sigma_g)


def key_press_reward(k_s, goal, cfg: EnvConfig) -> float:
    """``0.5 g(||k_s - k_g||) + 0.5 (1 - 1[false positive])``.

    The distance runs over goal keys only; any non-goal key at or above the
    press threshold is a false positive.
    """
    goal = np.asarray(getattr(goal, "keys", goal))
    if np.shape(k_s) != (N_KEYS,) or goal.shape != (N_KEYS,):
        raise ValueError(f"key state and goal must both have {N_KEYS} entries")
    return float(key_press_terms(k_s, goal, cfg))


def mimic_reward(robot_tips, demo_tips, cfg: EnvConfig) -> float:
    """``g`` of the stacked fingertip distance."""
    if np.shape(robot_tips) != (N_TIPS, 3) or np.shape(demo_tips) != (N_TIPS, 3):
        raise ValueError("fingertips must have shape (10, 3)")
    return float(mimic_terms(robot_tips, demo_tips, cfg))


@dataclass(frozen=True)
class RewardBreakdown:
    key_press: float
    mimic: float
    total: float


@dataclass
class Observation:
    q: np.ndarray  # (46,)
    qdot: np.ndarray  # (46,)
    key_positions: np.ndarray  # (88,)
    goal: np.ndarray  # (L, 88)
    demo_tips: np.ndarray  # (10, 3)
    prior: np.ndarray  # (47,) nominal action
    pedal: float
    t: int

    def vector(self) -> np.ndarray:
        """Flat layout: q, qdot, key positions, goal (row-major), demo tips
        (row-major), prior, pedal."""
        return np.concatenate(
            [
                self.q,
                self.qdot,
                self.key_positions,
                self.goal.reshape(-1).astype(np.float64),
                self.demo_tips.reshape(-1),
                self.prior,
                [self.pedal],
            ]
        )

    @staticmethod
    def size(L: int) -> int:
        return N_JOINTS * 2 + N_KEYS + L * N_KEYS + N_TIPS * 3 + N_ACTION + 1


@dataclass
class EpisodeLog:
    q: list = field(default_factory=list)  # joint state after each step
    qdot: list = field(default_factory=list)
    action: list = field(default_factory=list)
    tips: list = field(default_factory=list)
    key_positions: list = field(default_factory=list)
    goal: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    # state before each step (what a policy saw)
    q_before: list = field(default_factory=list)
    qdot_before: list = field(default_factory=list)
    keys_before: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.action)

    @property
    def total_return(self) -> float:
        return float(sum(r.total for r in self.rewards))

    @property
    def key_press_sum(self) -> float:
        return float(sum(r.key_press for r in self.rewards))

    @property
    def mimic_sum(self) -> float:
        return float(sum(r.mimic for r in self.rewards))

    def pressed(self, threshold: float) -> np.ndarray:
        return (np.asarray(self.key_positions) >= threshold).astype(np.uint8)

    def metrics(self, threshold: float = 0.5) -> Metrics:
        return compute_metrics(self.pressed(threshold), np.asarray(self.goal))

    def to_jsonl(self) -> str:
        lines = []
        for t in range(len(self)):
            r = self.rewards[t]
            lines.append(
                json.dumps(
                    {
                        "t": t,
                        "q": np.round(self.q[t], 12).tolist(),
                        "action": np.round(self.action[t], 12).tolist(),
                        "tips": np.round(self.tips[t], 12).tolist(),
                        "k_s": np.round(self.key_positions[t], 12).tolist(),
                        "goal": np.flatnonzero(self.goal[t]).tolist(),
                        "reward": {"key_press": r.key_press, "mimic": r.mimic, "total": r.total},
                    },
                    separators=(",", ":"),
                )
            )
        return "\n".join(lines) + "\n"


def key_depression(geom: KeyGeometry, cfg: EnvConfig, tips) -> np.ndarray:
    """Deepest penetration per key over all tips, as a fraction of travel."""
    tips = np.asarray(tips, dtype=np.float64)
    lead = tips.shape[:-2]
    flat = tips.reshape(-1, N_TIPS, 3)
    idx = geom.key_under(flat[..., 0], flat[..., 1])
    depth = np.clip((geom.surface_z - flat[..., 2]) / cfg.key_travel, 0.0, 1.0)
    ks = np.zeros((len(flat), N_KEYS))
    hit = idx >= 0
    rows = np.broadcast_to(np.arange(len(flat))[:, None], idx.shape)
    np.maximum.at(ks, (rows[hit], idx[hit]), depth[hit])
    return ks.reshape(lead + (N_KEYS,))


def track(q, target, cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Run the substep loop ``q += (target - q) * alpha`` in closed form.

    Every iterate is a convex combination of two in-limit points, so the
    per-substep clamp never binds and ``n`` substeps collapse to
    ``target + (q - target) * (1 - alpha)^n``. Returns the final joints and
    the velocity over the last substep.
    """
    alpha = min(1.0, (1.0 / cfg.substep_hz) / cfg.tau_track)
    n = cfg.n_substeps
    gap = q - target
    q_new = target + gap * (1.0 - alpha) ** n
    qdot = -gap * (1.0 - alpha) ** (n - 1) * alpha * cfg.substep_hz
    return q_new, qdot


class PianoEnv:
    """Single-threaded environment instance; owns its state."""

    def __init__(self, spec: HandModelSpec, geom: KeyGeometry | None = None, cfg: EnvConfig | None = None):
        self.spec = spec
        self.geom = geom or KeyGeometry()
        self.cfg = cfg or EnvConfig()
        self.info: dict = {}
        self._ready = False
        self._done = False

    # -- geometry ----------------------------------------------------------

    def key_positions(self, tips: np.ndarray) -> np.ndarray:
        """Normalized depression of every key, ``(..., 88)`` for ``(..., 10, 3)`` tips."""
        return key_depression(self.geom, self.cfg, tips)

    # -- episode -----------------------------------------------------------

    def reset(self, song: PianoStateTrajectory, demo, nominal) -> Observation:
        demo = np.asarray(getattr(demo, "tips", demo), dtype=np.float64)
        nominal = np.asarray(nominal, dtype=np.float64)
        if not (len(song) == len(demo) == len(nominal)):
            raise ValueError(
                f"song ({len(song)}), demo ({len(demo)}) and nominal ({len(nominal)}) lengths differ"
            )
        if nominal.shape[1] != N_ACTION:
            raise ValueError(f"nominal actions must have {N_ACTION} entries")
        self.song, self.demo, self.nominal = song, demo, nominal
        q0 = clamp(self.spec, nominal[0])
        self.info = {"clamped_initial": bool(np.any(np.abs(q0[:N_JOINTS] - nominal[0, :N_JOINTS]) > 0))}
        self.q = q0
        self.qdot = np.zeros(N_JOINTS)
        self.k_s = np.zeros(N_KEYS)
        self.t = 0
        self._ready, self._done = True, False
        return self.observation()

    def observation(self) -> Observation:
        t = min(self.t, len(self.song) - 1)
        return Observation(
            q=self.q[:N_JOINTS].copy(),
            qdot=self.qdot.copy(),
            key_positions=self.k_s.copy(),
            goal=frames_from(self.song, self.t, self.cfg.lookahead).keys,
            demo_tips=self.demo[t].copy(),
            prior=self.nominal[t].copy(),
            pedal=float(self.q[PEDAL]),
            t=self.t,
        )

    def step(self, action) -> tuple[Observation, RewardBreakdown, bool]:
        if not self._ready:
            raise EnvStateError("call reset() before step()")
        if self._done:
            raise EnvStateError("episode is done; call reset()")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (N_ACTION,):
            raise ValueError(f"action must have {N_ACTION} entries")
        target = clamp(self.spec, action)
        q, self.qdot = track(self.q[:N_JOINTS], target[:N_JOINTS], self.cfg)
        self.q = np.concatenate([q, [target[PEDAL]]])
        tips = forward_kinematics(self.spec, self.q)
        self.k_s = self.key_positions(tips)

        goal = self.song.keys[self.t]
        kp = float(key_press_terms(self.k_s, goal, self.cfg))
        mm = float(mimic_terms(tips, self.demo[self.t], self.cfg))
        reward = RewardBreakdown(kp, mm, self.cfg.key_weight * kp + self.cfg.mimic_weight * mm)
        self.last_tips = tips
        self.t += 1
        self._done = self.t >= len(self.song)
        return self.observation(), reward, self._done

    @property
    def done(self) -> bool:
        return self._done


def run_actions(env: PianoEnv, song, demo, nominal, actions) -> EpisodeLog:
    """Reset and execute a fixed action sequence, logging every frame."""
    env.reset(song, demo, nominal)
    log = EpisodeLog()
    for a in actions:
        record_step(env, log, a)
        if env.done:
            break
    return log


def record_step(env: PianoEnv, log: EpisodeLog, action) -> bool:
    log.q_before.append(env.q.copy())
    log.qdot_before.append(env.qdot.copy())
    log.keys_before.append(env.k_s.copy())
    goal = env.song.keys[env.t].copy()
    _, r, done = env.step(action)
    log.q.append(env.q.copy())
    log.qdot.append(env.qdot.copy())
    log.action.append(np.asarray(action, dtype=np.float64).copy())
    log.tips.append(env.last_tips.copy())
    log.key_positions.append(env.k_s.copy())
    log.goal.append(goal)
    log.rewards.append(r)
    return done


@dataclass
class Trace:
    """Array form of an episode produced by :func:`simulate_arrays`."""

    q0: np.ndarray  # (47,) state after reset
    actions: np.ndarray  # (T, 47) as commanded
    q: np.ndarray  # (T, 47)
    qdot: np.ndarray  # (T, 46)
    tips: np.ndarray  # (T, 10, 3)
    key_positions: np.ndarray  # (T, 88)
    key_press: np.ndarray  # (T,)
    mimic: np.ndarray  # (T,)
    total: np.ndarray  # (T,)

    @property
    def total_return(self) -> float:
        return float(self.total.sum())


def simulate_arrays(env: PianoEnv, song, demo, nominal, actions) -> Trace:
    """Batched equivalent of :func:`run_actions` for a fixed action sequence.

    Joint tracking stays sequential; kinematics, key depression and rewards
    are evaluated for all frames at once.
    """
    env.reset(song, demo, nominal)
    raw = np.asarray(actions, dtype=np.float64)
    T = len(song)
    if raw.shape != (T, N_ACTION):
        raise ValueError(f"actions must have shape ({T}, {N_ACTION})")
    actions = clamp(env.spec, raw)
    q = np.empty((T, N_ACTION))
    qdot = np.empty((T, N_JOINTS))
    cur = env.q[:N_JOINTS]
    for t in range(T):
        cur, qdot[t] = track(cur, actions[t, :N_JOINTS], env.cfg)
        q[t, :N_JOINTS] = cur
    q[:, PEDAL] = actions[:, PEDAL]
    tips = forward_kinematics(env.spec, q)
    ks = env.key_positions(tips)
    kp = key_press_terms(ks, song.keys, env.cfg)
    mm = mimic_terms(tips, env.demo, env.cfg)
    total = env.cfg.key_weight * kp + env.cfg.mimic_weight * mm
    trace = Trace(env.q.copy(), raw, q, qdot, tips, ks, kp, mm, total)
    env.t, env.q, env.qdot, env.k_s = T, q[-1].copy(), qdot[-1].copy(), ks[-1].copy()
    env.last_tips = tips[-1]
    env._done = True
    return trace


def simulate(env: PianoEnv, song, demo, nominal, actions) -> EpisodeLog:
    """:func:`simulate_arrays` packaged as an :class:`EpisodeLog`."""
    tr = simulate_arrays(env, song, demo, nominal, actions)
    T = len(tr.q)
    log = EpisodeLog()
    q_prev = np.vstack([tr.q0[None], tr.q[:-1]])
    qdot_prev = np.vstack([np.zeros((1, N_JOINTS)), tr.qdot[:-1]])
    ks_prev = np.vstack([np.zeros((1, N_KEYS)), tr.key_positions[:-1]])
    for t in range(T):
        log.q_before.append(q_prev[t])
        log.qdot_before.append(qdot_prev[t])
        log.keys_before.append(ks_prev[t])
        log.q.append(tr.q[t])
        log.qdot.append(tr.qdot[t])
        log.action.append(tr.actions[t].copy())
        log.tips.append(tr.tips[t])
        log.key_positions.append(tr.key_positions[t])
        log.goal.append(song.keys[t].copy())
        log.rewards.append(RewardBreakdown(float(tr.key_press[t]), float(tr.mimic[t]), float(tr.total[t])))
    return log
