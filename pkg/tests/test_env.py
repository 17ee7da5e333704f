import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pianobot.env import (
    EnvConfig,
    EnvStateError,
    Observation,
    PianoEnv,
    key_depression,
    key_press_reward,
    mimic_reward,
    run_actions,
    simulate,
    track,
)
from pianobot.ik import IkParams, solve_ik
from pianobot.keyboard import KeyGeometry
from pianobot.kinematics import N_ACTION, N_JOINTS, default_spec, forward_kinematics, random_configuration
from pianobot.score import N_KEYS, PianoStateTrajectory

SPEC = default_spec()
GEOM = KeyGeometry()
CFG = EnvConfig()


def g_ref(d, sigma=0.01):
    return 1.0 - math.tanh(d / sigma)


def _song(T, keys=()):
    k = np.zeros((T, N_KEYS), dtype=np.uint8)
    for t, key in keys:
        k[t, key] = 1
    return PianoStateTrajectory(k, np.zeros(T))


def _pose_with(tip_targets):
    q, _ = solve_ik(SPEC, np.zeros(N_ACTION), tip_targets, IkParams(), iters=400)
    return q


def _hover_targets():
    t = forward_kinematics(SPEC, np.zeros(N_ACTION)).copy()
    t[:, 0] = 0.04
    t[:, 2] = 2 * GEOM.h_key
    return t


# ------------------------------------------------------------------ rewards


def test_key_press_all_goal_keys_fully_pressed():
    goal = np.zeros(N_KEYS)
    goal[[10, 40, 41]] = 1
    assert abs(key_press_reward(goal.copy(), goal, CFG) - 1.0) <= 1e-12


def test_key_press_spurious_key():
    goal = np.zeros(N_KEYS)
    goal[[10, 40]] = 1
    ks = goal.copy()
    ks[70] = 1.0
    assert abs(key_press_reward(ks, goal, CFG) - 0.5) <= 1e-12


@pytest.mark.parametrize("n_goal", [1, 3])
def test_key_press_partial_depression(n_goal):
    goal = np.zeros(N_KEYS)
    goal[20 : 20 + n_goal] = 1
    ks = 0.3 * goal
    d = abs(0.3 - 1.0) * math.sqrt(n_goal)
    assert abs(key_press_reward(ks, goal, CFG) - (0.5 * g_ref(d) + 0.5)) <= 1e-12


def test_mimic_identical_tips():
    tips = np.random.default_rng(0).normal(size=(10, 3))
    assert abs(mimic_reward(tips, tips, CFG) - 1.0) <= 1e-12


def test_mimic_one_tip_offset_by_sigma():
    tips = np.random.default_rng(1).normal(size=(10, 3))
    moved = tips.copy()
    moved[4] += np.array([3.0, 4.0, 0.0]) / 5 * CFG.sigma_g
    assert abs(mimic_reward(moved, tips, CFG) - (1 - math.tanh(1))) <= 1e-12
    assert round(1 - math.tanh(1), 4) == 0.2384


def test_mimic_large_offset():
    tips = np.zeros((10, 3))
    far = tips + [5 * CFG.sigma_g, 0, 0]
    assert mimic_reward(far, tips, CFG) < 0.01


def test_vacuous_goal_scores_one():
    assert key_press_reward(np.zeros(N_KEYS), np.zeros(N_KEYS), CFG) == 1.0


def test_reward_shape_checks():
    with pytest.raises(ValueError):
        key_press_reward(np.zeros(87), np.zeros(N_KEYS), CFG)
    with pytest.raises(ValueError):
        mimic_reward(np.zeros((9, 3)), np.zeros((9, 3)), CFG)


# ------------------------------------------------------------------ stepping


def test_single_tip_at_press_plane_presses_its_key_only():
    key = 43  # a white key under the right hand
    targets = _hover_targets()
    targets[6] = [0.04, GEOM.center_y[key], 0.0]
    q = _pose_with(targets)
    assert np.abs(forward_kinematics(SPEC, q) - targets).max() < 1e-4
    song = _song(3, [(t, key) for t in range(3)])
    demo = np.repeat(targets[None], 3, axis=0)
    nominal = np.repeat(q[None], 3, axis=0)
    log = run_actions(PianoEnv(SPEC, GEOM, CFG), song, demo, nominal, nominal)
    pressed = log.pressed(CFG.press_threshold)
    assert pressed[:, key].all()
    assert pressed.sum() == 3
    m = log.metrics()
    assert m.precision == 1.0 and m.recall == 1.0


def test_hovering_tips_press_nothing():
    targets = _hover_targets()
    q = _pose_with(targets)
    goal_keys = [30, 44]
    song = _song(2, [(t, k) for t in range(2) for k in goal_keys])
    demo = np.repeat(targets[None], 2, axis=0)
    nominal = np.repeat(q[None], 2, axis=0)
    log = run_actions(PianoEnv(SPEC, GEOM, CFG), song, demo, nominal, nominal)
    assert not log.pressed(CFG.press_threshold).any()
    expected = 0.5 * g_ref(math.sqrt(len(goal_keys))) + 0.5
    for r in log.rewards:
        assert abs(r.key_press - expected) <= 1e-12


def test_reset_state_and_determinism():
    env = PianoEnv(SPEC, GEOM, CFG)
    rng = np.random.default_rng(2)
    nominal = np.array([random_configuration(SPEC, rng) for _ in range(5)])
    demo = rng.normal(size=(5, 10, 3))
    song = _song(5, [(1, 3)])
    a = env.reset(song, demo, nominal)
    b = env.reset(song, demo, nominal)
    assert a.t == 0 and not a.key_positions.any()
    np.testing.assert_array_equal(a.vector(), b.vector())
    assert len(a.vector()) == Observation.size(CFG.lookahead)
    expected = np.zeros((CFG.lookahead, N_KEYS))
    expected[:5] = song.keys
    np.testing.assert_array_equal(a.goal, expected)
    assert env.info["clamped_initial"] is False


def test_reset_clamps_out_of_range_nominal():
    nominal = np.zeros((2, N_ACTION))
    nominal[0, 0] = 5.0
    env = PianoEnv(SPEC, GEOM, CFG)
    obs = env.reset(_song(2), np.zeros((2, 10, 3)), nominal)
    assert env.info["clamped_initial"] is True
    assert obs.q[0] == SPEC.upper[0]


def test_reset_length_mismatch():
    with pytest.raises(ValueError, match="lengths differ"):
        PianoEnv(SPEC).reset(_song(3), np.zeros((2, 10, 3)), np.zeros((3, N_ACTION)))


def test_step_errors_and_episode_length():
    env = PianoEnv(SPEC, GEOM, CFG)
    with pytest.raises(EnvStateError):
        env.step(np.zeros(N_ACTION))
    T = 7
    env.reset(_song(T), np.zeros((T, 10, 3)), np.zeros((T, N_ACTION)))
    steps, done = 0, False
    while not done:
        _, _, done = env.step(np.zeros(N_ACTION))
        steps += 1
    assert steps == T
    with pytest.raises(EnvStateError):
        env.step(np.zeros(N_ACTION))


def test_batched_simulation_equals_stepping():
    rng = np.random.default_rng(3)
    T = 12
    actions = np.array([random_configuration(SPEC, rng) for _ in range(T)])
    actions[:, :3] = 0.0
    actions[:, 23:26] = 0.0
    song = _song(T, [(t, int(rng.integers(0, N_KEYS))) for t in range(T)])
    demo = rng.normal(0, 0.05, (T, 10, 3))
    env = PianoEnv(SPEC, GEOM, CFG)
    a = run_actions(env, song, demo, actions, actions)
    b = simulate(env, song, demo, actions, actions)
    assert a.to_jsonl() == b.to_jsonl()
    for name in ("q_before", "qdot_before", "keys_before"):
        np.testing.assert_array_equal(np.array(getattr(a, name)), np.array(getattr(b, name)))


def test_track_matches_explicit_substep_loop():
    rng = np.random.default_rng(4)
    q = rng.uniform(-1, 1, N_JOINTS)
    target = rng.uniform(-1, 1, N_JOINTS)
    cur = q.copy()
    alpha = (1 / CFG.substep_hz) / CFG.tau_track
    for _ in range(CFG.n_substeps):
        prev = cur.copy()
        cur = cur + (target - cur) * alpha
    q_new, qdot = track(q, target, CFG)
    np.testing.assert_allclose(q_new, cur, atol=1e-14)
    np.testing.assert_allclose(qdot, (cur - prev) * CFG.substep_hz, atol=1e-11)


def test_black_key_occludes_white_neighbour():
    black = 42
    assert GEOM.is_black[black]
    tips = np.full((10, 3), 1.0)
    tips[0] = [0.1, GEOM.center_y[black], GEOM.surface_z - CFG.key_travel]
    ks = key_depression(GEOM, CFG, tips)
    assert ks[black] == 1.0 and ks.sum() == 1.0
    tips[0] = [0.02, GEOM.center_y[black], GEOM.surface_z - CFG.key_travel / 2]
    ks = key_depression(GEOM, CFG, tips)
    assert ks.sum() == 0.5 and ks[black] == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(substep_hz=510)
    with pytest.raises(ValueError):
        EnvConfig(key_weight=0.5, mimic_weight=0.6)
    assert EnvConfig().n_substeps == 25


action_seqs = st.integers(0, 2**32 - 1).map(
    lambda s: np.array([random_configuration(SPEC, np.random.default_rng(s + i)) for i in range(6)])
)


@settings(max_examples=30, deadline=None)
@given(action_seqs, st.integers(0, 2**32 - 1))
def test_rewards_stay_in_unit_interval(actions, seed):
    rng = np.random.default_rng(seed)
    song = PianoStateTrajectory(rng.integers(0, 2, (6, N_KEYS)) * (rng.random((6, N_KEYS)) < 0.05), np.zeros(6))
    demo = forward_kinematics(SPEC, actions) + rng.normal(0, 0.01, (6, 10, 3))
    log = simulate(PianoEnv(SPEC, GEOM, CFG), song, demo, actions, actions)
    for r in log.rewards:
        assert 0.0 <= r.key_press <= 1.0
        assert 0.0 <= r.mimic <= 1.0
        assert 0.0 <= r.total <= 1.0
    ks = np.array(log.key_positions)
    assert ks.min() >= 0.0 and ks.max() <= 1.0


@settings(max_examples=30, deadline=None)
@given(action_seqs, st.sampled_from([0.05, 0.025, 0.01, 0.004]))
def test_halving_tau_never_hurts_tracking(actions, tau):
    T = len(actions)
    song, demo = _song(T), np.zeros((T, 10, 3))
    errs = []
    for cfg in (EnvConfig(tau_track=tau), EnvConfig(tau_track=tau / 2)):
        log = simulate(PianoEnv(SPEC, GEOM, cfg), song, demo, actions, actions)
        errs.append(np.abs(np.array(log.q)[:, :N_JOINTS] - actions[:, :N_JOINTS]).max(axis=1))
    assert np.all(errs[1] <= errs[0] + 1e-15)


@settings(max_examples=15, deadline=None)
@given(action_seqs)
def test_identical_inputs_give_identical_logs(actions):
    T = len(actions)
    song = _song(T, [(1, 40)])
    demo = forward_kinematics(SPEC, actions)
    a = run_actions(PianoEnv(SPEC), song, demo, actions, actions)
    b = run_actions(PianoEnv(SPEC), song, demo, actions, actions)
    assert a.to_jsonl() == b.to_jsonl()
