import numpy as np
import pytest
from _oracles import project, random_homography
from hypothesis import given, settings
from hypothesis import strategies as st

from pianobot.keyboard import KeyGeometry
from pianobot.retarget import (
    UNASSIGNED,
    Correspondence,
    DegenerateConfigurationError,
    FingertipTrajectory,
    Homography,
    HomographyEstimator,
    PointAtInfinityError,
    align_fingertips,
    apply_homography,
    assign_z,
    estimate_homography,
    read_correspondences,
    read_fingertip_csv,
    write_correspondences,
)
from pianobot.score import N_KEYS, PianoStateTrajectory

GEOM = KeyGeometry()


def _grid(n=8, rng=None):
    rng = rng or np.random.default_rng(0)
    return rng.uniform(-1, 1, (n, 2))


def _song(*frames):
    keys = np.zeros((len(frames), N_KEYS), dtype=np.uint8)
    for i, ks in enumerate(frames):
        keys[i, list(ks)] = 1
    return PianoStateTrajectory(keys, np.zeros(len(frames)))


def _far_tips(T=1):
    # tips parked far outside the keyboard so only the ones we place matter
    xy = np.zeros((T, 10, 2))
    xy[:, :, 0] = 0.04
    xy[:, :, 1] = 5.0 + np.arange(10)
    return xy


def test_identity_correspondences_give_identity():
    pts = _grid()
    H = estimate_homography(pts, pts)
    np.testing.assert_allclose(H.h, np.eye(3), atol=1e-12)
    assert H.reprojection_error < 1e-9


def test_synthetic_homography_recovered():
    rng = np.random.default_rng(4)
    h = random_homography(rng)
    src = _grid(12, rng)
    H = estimate_homography(src, project(h, src))
    np.testing.assert_allclose(H.h, h / h[2, 2], atol=1e-8)
    grid = _grid(50, rng)
    assert np.abs(apply_homography(H, grid) - project(h, grid)).max() < 1e-8


def test_collinear_points_rejected():
    pts = np.c_[np.arange(4.0), 2 * np.arange(4.0)]
    with pytest.raises(DegenerateConfigurationError):
        estimate_homography(pts, pts)


def test_too_few_points_rejected():
    with pytest.raises(ValueError, match="at least 4"):
        estimate_homography(_grid(3), _grid(3))


def test_correspondence_objects_and_json_round_trip():
    rng = np.random.default_rng(2)
    h = random_homography(rng)
    src = _grid(6, rng)
    corr = [Correspondence(tuple(p), tuple(q)) for p, q in zip(src, project(h, src))]
    back = read_correspondences(write_correspondences(corr))
    np.testing.assert_allclose(estimate_homography(back).h, estimate_homography(corr).h)


def test_apply_identity_and_translation():
    pts = _grid(20)
    np.testing.assert_array_equal(apply_homography(np.eye(3), pts), pts)
    T = np.array([[1, 0, 0.3], [0, 1, -0.7], [0, 0, 1.0]])
    np.testing.assert_allclose(apply_homography(T, pts), pts + [0.3, -0.7], atol=1e-15)


def test_apply_matches_hand_evaluation():
    rng = np.random.default_rng(5)
    h = random_homography(rng)
    g = np.stack(np.meshgrid(np.linspace(-1, 1, 7), np.linspace(-1, 1, 5)), -1).reshape(-1, 2)
    np.testing.assert_allclose(apply_homography(h, g), project(h, g), rtol=1e-13, atol=1e-14)


def test_point_at_infinity():
    h = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0.0]])
    with pytest.raises(PointAtInfinityError):
        apply_homography(h, [[0.0, 1.0]])


def test_estimator_inverse_transform():
    rng = np.random.default_rng(8)
    h = random_homography(rng)
    src = _grid(10, rng)
    est = HomographyEstimator().fit(src, project(h, src))
    np.testing.assert_allclose(est.inverse_transform(est.transform(src)), src, atol=1e-10)


def test_homography_normalization():
    assert Homography(2 * np.eye(3)).h[2, 2] == 1.0
    h = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0.0]])
    h[2, 0] = 1.0
    assert np.linalg.norm(Homography(h).h) == pytest.approx(1.0)


# ----------------------------------------------------------------- alignment


def test_tip_inside_key_snaps_to_centre():
    k = 40
    xy = _far_tips()
    xy[0, 6, 1] = GEOM.center_y[k] + 0.004
    traj = FingertipTrajectory([0.0], xy)
    out, report = align_fingertips(traj, _song([k]), GEOM)
    assert out.tips[0, 6, 1] == GEOM.center_y[k]
    assert out.assignment[0, 6] == k
    assert report.unserved == []
    # x never changes
    np.testing.assert_array_equal(out.tips[..., 0], traj.tips[..., 0])


def test_key_without_nearby_tip_is_unserved():
    traj = FingertipTrajectory([0.0], _far_tips())
    out, report = align_fingertips(traj, _song([40]), GEOM)
    np.testing.assert_array_equal(out.tips[:, :, :2], traj.tips[:, :, :2])
    assert report.unserved == [(0, 40)]
    assert (out.assignment == UNASSIGNED).all()


def test_one_tip_between_two_keys_serves_the_nearer():
    # white keys 39 and 43 (D4 is 41, between them is black 42)
    a, b = 39, 43
    assert not GEOM.is_black[a] and not GEOM.is_black[b]
    xy = _far_tips()
    # tip in the gap closer to b but inside neither interval
    y = GEOM.y_hi[a] + 0.7 * (GEOM.y_lo[b] - GEOM.y_hi[a])
    xy[0, 7, 1] = y
    song = _song([a, b])
    out, report = align_fingertips(FingertipTrajectory([0.0], xy), song, GEOM)
    assert out.assignment[0, 7] == b
    assert out.tips[0, 7, 1] == GEOM.center_y[b]
    assert report.unserved == [(0, a)]


def test_tie_goes_to_lower_key_index():
    # a tip equidistant from two white keys two positions apart
    a, b = 39, 43
    mid = (GEOM.center_y[a] + GEOM.center_y[b]) / 2
    xy = _far_tips()
    xy[0, 7, 1] = mid
    song = _song([a, b])
    # the tip sits inside the black key 41 region, not inside a or b
    out, _ = align_fingertips(FingertipTrajectory([0.0], xy), song, GEOM)
    assert out.assignment[0, 7] == a


def test_assign_z_heights():
    xy = _far_tips(2)
    xy[0, 3, 1] = GEOM.center_y[50]
    out, _ = align_fingertips(FingertipTrajectory([0.0, 0.05], xy), _song([50], []), GEOM)
    z = assign_z(out, GEOM).tips[..., 2]
    assert z[0, 3] == 0.0
    assert np.all(np.delete(z[0], 3) == 2 * GEOM.h_key)
    assert np.all(z[1] == 2 * GEOM.h_key)
    assert 2 * KeyGeometry(h_key=0.01).h_key == 0.02


def test_fingertip_csv_accepts_plane_rows():
    text = "t,finger,x,y\n" + "".join(f"0.0,{f},0.05,{0.01 * f}\n" for f in range(10))
    traj = read_fingertip_csv(text)
    assert traj.tips.shape == (1, 10, 3)
    assert traj.tips[0, 4, 1] == pytest.approx(0.04)


frames = st.lists(
    st.tuples(
        st.lists(st.floats(-0.6, 0.6), min_size=10, max_size=10),
        st.sets(st.integers(0, N_KEYS - 1), max_size=5),
    ),
    min_size=1,
    max_size=4,
)


def _from_frames(fr):
    T = len(fr)
    xy = np.zeros((T, 10, 2))
    xy[:, :, 0] = 0.04
    xy[:, :, 1] = [ys for ys, _ in fr]
    return FingertipTrajectory(np.arange(T) * 0.05, xy), _song(*[ks for _, ks in fr])


@settings(max_examples=80, deadline=None)
@given(frames)
def test_alignment_is_idempotent(fr):
    traj, song = _from_frames(fr)
    once, _ = align_fingertips(traj, song, GEOM)
    twice, _ = align_fingertips(once, song, GEOM)
    np.testing.assert_array_equal(once.tips, twice.tips)


@settings(max_examples=80, deadline=None)
@given(frames)
def test_snapped_tips_sit_on_centres_and_assignments_are_injective(fr):
    traj, song = _from_frames(fr)
    out, _ = align_fingertips(traj, song, GEOM)
    for i in range(len(out)):
        a = out.assignment[i]
        used = a[a >= 0]
        assert len(set(used.tolist())) == len(used)
        for f in np.flatnonzero(a >= 0):
            assert out.tips[i, f, 1] == GEOM.center_y[a[f]]
            assert song.keys[i, a[f]] == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 20))
def test_recovery_holds_for_random_instances(seed, n):
    rng = np.random.default_rng(seed)
    h = random_homography(rng)
    src = rng.uniform(-1, 1, (n, 2))
    H = estimate_homography(src, project(h, src))
    assert np.abs(H.h - h / h[2, 2]).max() < 1e-8
