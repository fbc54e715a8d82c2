import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srptsim.estimation import compose, relative_pose
from srptsim.operator import (K1_GRID, DriverConfig, LookaheadConfig, ReferenceGenerator,
                              lookahead_distance, lookahead_driver_steer, make_reference_pose,
                              steer_actuator_rate, tune_k1)
from srptsim.scenario import build_track
from srptsim.vehicle import STEER_RATE_MAX, make_state

TRACK = build_track()


def test_lookahead_distance_examples():
    assert lookahead_distance(0.0, 0.3) == 1.3
    assert lookahead_distance(6.11, 0.3) == pytest.approx(7.943)
    assert lookahead_distance(1.0, 0.26) == pytest.approx(1.56)
    with pytest.raises(ValueError):
        lookahead_distance(-1.0, 0.2)
    with pytest.raises(ValueError):
        LookaheadConfig(horizon=0.0)


@given(st.floats(0, 40), st.floats(0, 1))
def test_lookahead_never_below_front_axle(vx, tau):
    assert lookahead_distance(vx, tau) >= LookaheadConfig().l_front


def test_reference_on_centerline_is_track_pose_ahead():
    x = make_state(x=5.0, Vx=6.11)
    pose = make_reference_pose(x, x, TRACK, 0.3)
    assert np.allclose(pose, TRACK.pose_at(5.0 + 7.943), atol=1e-9)


def test_estimate_offset_moves_reference_rigidly():
    actual = make_state(x=5.0, Vx=6.11)
    est = make_state(x=6.0, Vx=6.11)
    pose = make_reference_pose(est, actual, TRACK, 0.3)
    target = TRACK.pose_at(12.943)
    assert np.allclose(pose, (target[0] + 1.0, target[1], target[2]), atol=1e-9)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-0.3, 0.3), st.floats(20, 400))
def test_estimate_drift_propagates_into_reference(ex, ey, epsi, s):
    x, y, psi = TRACK.pose_at(s)
    actual = make_state(x=x + 0.3, y=y - 0.2, heading=psi + 0.05, Vx=6.0)
    est_pose = compose((actual[6], actual[7], actual[2]), (ex, ey, epsi))
    est = make_state(x=est_pose.x, y=est_pose.y, heading=est_pose.psi, Vx=6.0)
    pose = make_reference_pose(est, actual, TRACK, 0.25)
    clean = make_reference_pose(actual, actual, TRACK, 0.25)
    a = (actual[6], actual[7], actual[2])
    expected = compose(est_pose, relative_pose(a, clean))
    assert np.allclose(pose[:2], expected[:2], atol=1e-9)
    assert math.sin(pose[2] - expected[2]) == pytest.approx(0.0, abs=1e-9)


def test_offset_vehicle_gets_reference_on_centerline():
    x = make_state(x=5.0, y=0.5, Vx=6.11)
    pose = make_reference_pose(x, x, TRACK, 0.3)
    assert pose.y == pytest.approx(0.0, abs=1e-9)


def test_lookahead_past_track_end_clamps():
    end = TRACK.total_length
    x, y, psi = TRACK.pose_at(end - 1.0)
    state = make_state(x=x, y=y, heading=psi, Vx=6.0)
    pose = make_reference_pose(state, state, TRACK, 0.3)
    assert np.allclose(pose, TRACK.pose_at(end), atol=1e-9)


def test_generator_uses_prior_then_measured_age():
    gen = ReferenceGenerator(TRACK, uplink=0.06, tau_prior=0.2635)
    x = make_state(x=5.0, Vx=6.0)
    first = gen(0.033, math.nan, x, x)
    assert first.pose.x == pytest.approx(5.0 + 6.0 * 0.2635 + 6.0)
    assert first.created_at == 0.033
    later = gen(1.0, 0.8, x, x)
    assert later.pose.x == pytest.approx(5.0 + 6.0 * 0.26 + 6.0)
    assert later.origin_time == 0.8


def test_driver_examples():
    cfg = DriverConfig()
    assert (cfg.k1, cfg.k2) == (0.213, 0.90)
    assert lookahead_driver_steer((5.0, 0.0, 0.0), 6.11, TRACK) == 0.0
    assert lookahead_driver_steer((5.0, 0.1, 0.0), 6.11, TRACK) == pytest.approx(-0.0213)
    psi = 0.01
    got = lookahead_driver_steer((5.0, 0.0, psi), 6.11, TRACK)
    assert got == pytest.approx(-0.213 * 5.499 * math.sin(psi))
    with pytest.raises(ValueError):
        DriverConfig(k1=0.0)


@given(st.floats(-3, 3), st.floats(-0.2, 0.2), st.floats(0.5, 9))
def test_driver_steers_against_offset_on_straight(y, psi, vx):
    pose = (2.0, y, psi)
    ahead_y = y + 0.9 * vx * math.sin(psi)
    d = lookahead_driver_steer(pose, vx, TRACK)
    if abs(ahead_y) < 1e-12:
        assert abs(d) < 1e-12
    else:
        assert np.sign(d) == -np.sign(ahead_y)


def test_steer_actuator_rate():
    assert steer_actuator_rate(0.1, 0.0, 0.001) == STEER_RATE_MAX
    assert steer_actuator_rate(-0.1, 0.0, 0.001) == -STEER_RATE_MAX
    assert steer_actuator_rate(0.0001, 0.0, 0.001) == pytest.approx(0.1)


def test_k1_grid():
    assert len(K1_GRID) == 66
    assert K1_GRID[0] == 0.17 and K1_GRID[-1] == 0.30
    assert np.allclose(np.diff(K1_GRID), 0.002)


def test_tune_k1_lexicographic_and_skips_divergence():
    def score(k1):
        if k1 > 0.28:
            return math.inf, math.inf
        return round(abs(k1 - 0.25), 3), -k1

    best, table = tune_k1(score)
    assert len(table) == 66
    assert best == pytest.approx(0.25)
    ties = tune_k1(lambda k1: (1.0, abs(k1 - 0.2)))[0]
    assert ties == pytest.approx(0.2)
    with pytest.raises(RuntimeError):
        tune_k1(lambda k1: (math.nan, math.nan))
