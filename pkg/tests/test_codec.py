import math

import numpy as np
import pytest
from _oracles import central_diff, sdf_bruteforce
from hypothesis import given, settings
from hypothesis import strategies as st

from pianobot.codec import (
    D_MAX,
    CodecStateError,
    GoalAutoencoder,
    positional_encoding,
    query_box,
    sdf,
    sdf_batch,
)
from pianobot.keyboard import KeyGeometry
from pianobot.nn import TrainingDivergedError
from pianobot.score import N_KEYS

GEOM = KeyGeometry()
BOX = query_box(GEOM)


def _state(*keys):
    s = np.zeros(N_KEYS, dtype=np.uint8)
    s[list(keys)] = 1
    return s


def _states(rng, n, p=0.05):
    s = (rng.random((n, N_KEYS)) < p).astype(np.uint8)
    s[np.arange(n), rng.integers(0, N_KEYS, n)] = 1
    return s


# ------------------------------------------------------------------ sdf


def test_single_key_distance_is_euclidean():
    x = np.array([0.1, 0.2, 0.03])
    c = GEOM.key_centers[39]
    assert sdf(x, _state(39), GEOM) == pytest.approx(math.dist(x, c), abs=1e-15)


def test_five_key_state_matches_bruteforce():
    rng = np.random.default_rng(0)
    keys = rng.choice(N_KEYS, 5, replace=False)
    state = _state(*keys)
    lo, hi = BOX
    X = rng.uniform(lo, hi, (100, 3))
    expected = [sdf_bruteforce(x, GEOM.key_centers[keys], D_MAX) for x in X]
    got = [sdf(x, state, GEOM) for x in X]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(sdf_batch(X, np.repeat(state[None], 100, 0), GEOM), expected, atol=1e-15)


def test_zero_at_pressed_centre():
    assert sdf(GEOM.key_centers[60], _state(60, 3), GEOM) == 0.0


def test_empty_state_gives_d_max_and_flag():
    d, empty = sdf(np.zeros(3), np.zeros(N_KEYS), GEOM, return_flag=True)
    assert (d, empty) == (D_MAX, True)
    d, empty = sdf(np.zeros(3), _state(5), GEOM, return_flag=True)
    assert not empty and d < D_MAX


def test_sdf_input_checks():
    with pytest.raises(ValueError):
        sdf(np.zeros(2), _state(1))
    with pytest.raises(ValueError):
        sdf(np.zeros(3), np.zeros(87))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sdf_is_one_lipschitz(seed):
    rng = np.random.default_rng(seed)
    state = _states(rng, 1)[0]
    lo, hi = BOX
    a, b = rng.uniform(lo, hi, (2, 3))
    assert abs(sdf(a, state, GEOM) - sdf(b, state, GEOM)) <= np.linalg.norm(a - b) + 1e-12


# ------------------------------------------------------------------ positional encoding


def test_encoding_at_box_centre():
    c = (BOX[0] + BOX[1]) / 2
    enc = positional_encoding(c, 6, BOX).reshape(3, 6, 2)
    np.testing.assert_allclose(enc[..., 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(enc[..., 1], 1.0, atol=1e-12)


def test_encoding_layout_two_frequencies():
    box = (np.zeros(3), np.ones(3))
    x = np.array([0.25, 0.5, 0.9])
    u = [2 * v - 1 for v in x]
    expected = []
    for ud in u:
        for k in range(2):
            expected += [math.sin(2**k * math.pi * ud), math.cos(2**k * math.pi * ud)]
    np.testing.assert_allclose(positional_encoding(x, 2, box), expected, atol=1e-15)
    assert positional_encoding(np.zeros((4, 5, 3)), 2, box).shape == (4, 5, 12)


def test_encoding_injective_on_millimetre_grid():
    # coordinates are encoded independently, so checking each axis suffices
    lo, hi = GEOM.bounding_box()
    for d in range(3):
        vals = np.arange(lo[d], hi[d] + 1e-9, 0.001)
        pts = np.zeros((len(vals), 3))
        pts[:, d] = vals
        enc = positional_encoding(pts, 6, BOX).reshape(len(vals), 3, 12)[:, d]
        dist = np.sqrt(((enc[:, None] - enc[None]) ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        assert dist.min() > 1e-6


def test_encoding_rejects_bad_input():
    with pytest.raises(ValueError):
        positional_encoding(np.zeros(3), 0)
    with pytest.raises(ValueError):
        positional_encoding(np.zeros(2))


# ------------------------------------------------------------------ autoencoder


@pytest.fixture(scope="module")
def small_codec():
    rng = np.random.default_rng(1)
    X = _states(rng, 32)
    return GoalAutoencoder(epochs=40, seed=2).fit(X), X


def test_analytic_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    X = _states(rng, 4)
    m = GoalAutoencoder(epochs=0, seed=4).fit(X)
    Q = m.sample_queries(4 * 16, rng).reshape(4, 16, 3)
    _, grads = m.loss_and_grad(X, Q)
    params = m.params
    sizes = [p.size for p in params]
    flat_idx = rng.choice(sum(sizes), 20, replace=False)
    offsets = np.cumsum([0] + sizes)
    for fi in flat_idx:
        pi = int(np.searchsorted(offsets, fi, side="right") - 1)
        j = fi - offsets[pi]
        p = params[pi].reshape(-1)
        orig = p[j]

        def f(v):
            p[j] = v[0]
            out = m.loss_and_grad(X, Q)[0]
            p[j] = orig
            return np.array(out)

        fd = float(central_diff(f, np.array([orig]))[0])
        an = float(grads[pi].reshape(-1)[j])
        assert abs(an - fd) <= 1e-5 * max(abs(an), abs(fd), 1e-8), (pi, j, an, fd)


def test_zero_learning_rate_leaves_model_unchanged():
    rng = np.random.default_rng(5)
    X = _states(rng, 8)
    init = GoalAutoencoder(epochs=0, seed=6).fit(X)
    m = GoalAutoencoder(epochs=5, lr=0.0, seed=6).fit(X)
    for a, b in zip(init.params, m.params):
        np.testing.assert_array_equal(a, b)
    # queries are resampled every epoch, so compare on a fixed batch
    Q = init.sample_queries(8 * 16, np.random.default_rng(0)).reshape(8, 16, 3)
    assert init.loss_and_grad(X, Q)[0] == m.loss_and_grad(X, Q)[0]


def test_training_reduces_loss(small_codec):
    m, _ = small_codec
    assert m.loss_curve_[-1] < m.loss_curve_[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    X = _states(np.random.default_rng(7), 8)
    with pytest.raises(TrainingDivergedError) as err:
        GoalAutoencoder(epochs=20, lr=1e300, seed=0).fit(X)
    assert err.value.epoch >= 0


def test_untrained_codec_refuses_to_encode():
    with pytest.raises(CodecStateError):
        GoalAutoencoder().transform(_state(4))


def test_fit_needs_a_pressed_key():
    with pytest.raises(ValueError):
        GoalAutoencoder(epochs=1).fit(np.zeros((4, N_KEYS)))


def test_encoding_is_deterministic_and_finite_on_empty(small_codec):
    m, _ = small_codec
    s = _state(40, 44)
    assert m.transform(s).tobytes() == m.transform(s).tobytes()
    assert m.transform(s).shape == (16,)
    assert np.all(np.isfinite(m.transform(np.zeros(N_KEYS))))


def test_training_is_deterministic(small_codec):
    m, X = small_codec
    again = GoalAutoencoder(epochs=40, seed=2).fit(X)
    assert again.to_json() == m.to_json()
    assert again.loss_csv() == m.loss_csv()


def test_json_round_trip(small_codec):
    m, X = small_codec
    back = GoalAutoencoder.from_json(m.to_json())
    np.testing.assert_array_equal(back.transform(X), m.transform(X))
    Q = np.random.default_rng(8).uniform(*BOX, (len(X), 3))
    np.testing.assert_array_equal(back.predict_sdf(X, Q), m.predict_sdf(X, Q))
    assert back.rmse(X) == m.rmse(X)


def test_loss_csv_header(small_codec):
    m, _ = small_codec
    lines = m.loss_csv().splitlines()
    assert lines[0] == "epoch,mean_loss" and len(lines) == 41
