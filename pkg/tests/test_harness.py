import math
from dataclasses import replace

import numpy as np
import pytest

from srptsim.harness import (CORRIDOR, METRIC_COLUMNS, TRACE_COLUMNS, ExperimentSpec, RunLog,
                             SimConfig, compare_modes, divergence_window, export_artifacts,
                             grid_specs, region_metrics, run_experiment, steer_reversals,
                             write_metrics_csv)
from srptsim.scenario import build_track
from srptsim.vehicle import BETA, NX, STEER_RATE_MAX, VX, X, Y

TRACK = build_track()
SHORT = replace(SimConfig(), max_time=2.0)


@pytest.fixture(scope="module")
def short_runs():
    return {mode: run_experiment(ExperimentSpec(mode, "iii", True, 3), SHORT, TRACK)
            for mode in ("srpt-true", "srpt-ekf", "driver")}


def test_spec_forcing_and_names():
    assert ExperimentSpec("srpt-true", "v").noise_set == "i"
    assert ExperimentSpec("driver", "v").noise_set == "-"
    assert ExperimentSpec("srpt-ekf", "iv", False, 2).name == "srpt-ekf_iv_nodelay_seed2"
    assert ExperimentSpec("driver", "ii", True, 0).name == "driver_none_delay_seed0"
    with pytest.raises(ValueError):
        ExperimentSpec("joystick")
    with pytest.raises(ValueError):
        ExperimentSpec("srpt-ekf", "i")
    with pytest.raises(ValueError):
        ExperimentSpec(v_ref=0.0)


def test_grid_has_fourteen_runs():
    specs = grid_specs(5)
    assert len(specs) == 14 and len({s.name for s in specs}) == 14
    assert sum(s.delay for s in specs) == 7
    assert {s.seed for s in specs} == {5}
    assert sorted({s.noise_set for s in specs if s.mode == "srpt-ekf"}) == ["ii", "iii", "iv",
                                                                            "v", "vi"]


def test_short_run_logs_at_sensor_rate(short_runs):
    log = short_runs["srpt-ekf"]
    assert len(log) == 200
    assert np.allclose(np.diff(log.t), 0.01)
    assert not log.diverged and not log.completed
    assert log.truth.shape == (200, NX) and log.u.shape == (200, 2)


def test_short_runs_are_deterministic(short_runs):
    again = run_experiment(ExperimentSpec("srpt-ekf", "iii", True, 3), SHORT, TRACK)
    first = short_runs["srpt-ekf"]
    for name in ("truth", "est", "u", "z", "dy"):
        assert np.array_equal(getattr(first, name), getattr(again, name), equal_nan=True)


def test_delay_draws_match_across_modes(short_runs):
    traces = [np.array(short_runs[m].downlink_trace)[:, :2] for m in ("srpt-true", "srpt-ekf",
                                                                       "driver")]
    n = min(len(t) for t in traces)
    assert n > 100
    assert np.array_equal(traces[0][:n], traces[1][:n])
    assert np.array_equal(traces[0][:n], traces[2][:n])


def test_link_delays_and_order(short_runs):
    log = short_runs["srpt-ekf"]
    down = np.array(log.downlink_trace)
    age = down[:, 1] - down[:, 0]
    assert age.min() >= 0.16897 - 1e-9 and age.max() <= 0.3 + 1e-9
    up = np.array(log.uplink_trace)
    assert np.allclose(up[:, 1] - up[:, 0], 0.06)
    delivered = down[down[:, 2] == 0, 0]
    assert np.all(np.diff(delivered) > 0)


def test_no_delay_is_immediate():
    log = run_experiment(ExperimentSpec("srpt-true", "i", False, 0), replace(SHORT, max_time=0.5),
                         TRACK)
    assert np.all(np.array(log.downlink_trace)[:, 1] == np.array(log.downlink_trace)[:, 0])


def test_ekf_updates_leave_pose_untouched(short_runs):
    assert short_runs["srpt-ekf"].pose_corrections == 0.0


def test_true_state_mode_feeds_truth(short_runs):
    log = short_runs["srpt-true"]
    assert np.array_equal(log.est, log.truth)


def test_commands_feasible(short_runs):
    for log in short_runs.values():
        assert log.commands_feasible()


def test_short_runs_stay_near_the_line(short_runs):
    for log in short_runs.values():
        assert np.max(np.abs(log.dy)) < 0.5
        assert np.all(log.truth[:, VX] > 5.0)


def test_run_to_a_stop_arclength():
    cfg = replace(SimConfig(), stop_at=8.0, max_time=5.0)
    log = run_experiment(ExperimentSpec("srpt-true", "i", False, 0), cfg, TRACK)
    assert log.completed and 7.9 < log.s[-1] < 8.2


def _fake_log(dy, steer_rate=None, diverged=False, mode="srpt-ekf", delay=True, seed=0):
    n = len(dy)
    s = np.linspace(0, TRACK.total_length - 1e-6, n)
    truth = np.zeros((n, NX))
    truth[:, VX] = 6.0
    est = truth.copy()
    est[:, BETA] = 0.01
    u = np.zeros((n, 2))
    if steer_rate is not None:
        u[:, 0] = steer_rate
    return RunLog(ExperimentSpec(mode, "ii", delay, seed), np.arange(n) * 0.01, truth, est, u,
                  np.zeros((n, 3)), s, np.asarray(dy, dtype=float), np.zeros((n, 4)),
                  np.zeros((n, 2)), diverged=diverged, completed=not diverged)


def test_steer_reversals():
    m = STEER_RATE_MAX
    assert steer_reversals(np.array([m, m, 0.1, -m, -m, 0.0, m])) == 2
    assert steer_reversals(np.array([0.1, -0.1, 0.1])) == 0
    assert steer_reversals(np.array([])) == 0


def test_region_metrics_on_synthetic_log():
    dy = 0.1 * np.sin(np.linspace(0, 200, 5000))
    m = region_metrics(_fake_log(dy), TRACK)
    assert list(m) == list("ABCDEFGH")
    for r in m.values():
        assert r.valid and r.rms_dy <= r.max_dy <= 0.1 + 1e-12
        assert r.min_speed == 6.0
        assert r.max_beta_error == pytest.approx(0.01)


def test_diverged_log_is_invalid():
    m = region_metrics(_fake_log(np.zeros(100), diverged=True), TRACK)
    assert all(not r.valid and math.isnan(r.max_dy) for r in m.values())
    assert CORRIDOR == 10.0


def test_compare_modes_rejects_mixed_seeds():
    with pytest.raises(ValueError):
        compare_modes([_fake_log(np.zeros(500), seed=0),
                       _fake_log(np.zeros(500), mode="srpt-true", seed=1)], TRACK)


def test_compare_modes_delay_ratio():
    on = _fake_log(0.2 * np.ones(500))
    off = _fake_log(0.1 * np.ones(500), delay=False)
    cmp = compare_modes([on, off], TRACK)
    assert len(cmp.rows) == 16
    assert cmp.delay_ratio[("srpt-ekf", "ii", "A")] == pytest.approx(2.0)


def test_divergence_window_zero_for_perfect_estimate():
    n = 200
    log = _fake_log(np.zeros(n))
    log.truth[:, X] = np.arange(n) * 0.06
    log.est[:, X] = log.truth[:, X]
    d = divergence_window(log)
    assert d.shape == (n - 30, 4) and np.all(d[:, 1:] == 0.0)
    log.est[:, Y] = np.arange(n) * 0.001
    d = divergence_window(log)
    assert np.allclose(d[:, 2], 0.03)


def test_metrics_csv_format(tmp_path):
    rows = compare_modes([_fake_log(0.1 * np.ones(500))], TRACK).rows
    write_metrics_csv(rows, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert lines[1].startswith("A,srpt-ekf,ii,on,0.100000,0.100000,6.000000,0")


def test_export_artifacts(tmp_path, short_runs):
    out = export_artifacts(list(short_runs.values()), tmp_path / "out", TRACK, latency=True)
    assert (out / "metrics.csv").exists()
    traces = sorted((out / "traces").iterdir())
    assert len(traces) == 3
    header = traces[0].read_text().splitlines()[0].split(",")
    assert header == TRACE_COLUMNS
    for name in ("trajectories.svg", "region_errors.svg", "divergence.svg"):
        text = (out / name).read_text()
        assert text.lstrip().startswith("<?xml") and "<svg" in text
    assert len(list((out / "latency").iterdir())) == 6


def test_export_to_unwritable_location(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_artifacts([], blocker / "out", TRACK)
