"""Acceptance criteria, one test each, run against a full 14-run grid."""
import math

import numpy as np
import pytest

from srptsim.estimation import MEAS_STD, POSE_INDICES, tune_process_covariance
from srptsim.harness import (SRPT_MODES, divergence_window, driver_score, export_artifacts,
                             record_tuning_lap, region_metrics, run_grid, tune_driver_gain)
from srptsim.link import DelayModel, sample_downlink_delay
from srptsim.operator import K1_GRID
from srptsim.scenario import SensorRig, build_track, noise_set, sense
from srptsim.vehicle import ACCEL_MAX, ACCEL_MIN, PLANT_AY, STEER_RATE_MAX, make_plant_state

pytestmark = pytest.mark.slow

SEED = 0
V_REF = 22.0 / 3.6
EKF_SETS = ("ii", "iii", "iv", "v", "vi")


@pytest.fixture(scope="session")
def track():
    return build_track()


@pytest.fixture(scope="session")
def grid(track, tmp_path_factory):
    logs = run_grid(SEED, track=track)
    out = export_artifacts(logs, tmp_path_factory.mktemp("grid"), track)
    metrics = {log.spec: region_metrics(log, track) for log in logs}
    return logs, metrics, out


def _find(logs, mode, delay, noise=None):
    for log in logs:
        s = log.spec
        if s.mode == mode and s.delay == delay and (noise is None or s.noise_set == noise):
            return log
    raise KeyError((mode, delay, noise))


def _report(acceptance_report, n, passed, detail):
    acceptance_report[n] = (bool(passed), detail)
    print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
    assert passed, detail


def test_criterion_01_command_feasibility(grid, acceptance_report):
    logs, _, _ = grid
    tol = 1e-9
    worst_rate = max(log.command_bounds[0] for log in logs)
    lowest = min(log.command_bounds[1] for log in logs)
    highest = max(log.command_bounds[2] for log in logs)
    ok = (len(logs) == 14 and all(log.commands_feasible(tol) for log in logs)
          and worst_rate <= STEER_RATE_MAX + tol and lowest >= ACCEL_MIN - tol
          and highest <= ACCEL_MAX + tol)
    _report(acceptance_report, 1, ok,
            f"max |steer rate| {math.degrees(worst_rate):.6f} deg/s, accel in "
            f"[{lowest:.6f}, {highest:.6f}] over {len(logs)} runs")


def test_criterion_02_delay_statistics(acceptance_report):
    model = DelayModel()
    x = sample_downlink_delay(np.random.default_rng(SEED), model, size=100_000)
    med = float(np.median(x))
    ok = x.min() >= 0.16897 and x.max() <= 0.300 and abs(med - 0.2035) <= 0.002
    _report(acceptance_report, 2, ok,
            f"min {x.min():.5f} s, max {x.max():.5f} s, median {med:.5f} s")


def test_criterion_03_pose_unobservable(grid, acceptance_report):
    logs, _, _ = grid
    ekf = [log for log in logs if log.spec.mode == "srpt-ekf"]
    worst = max(log.pose_corrections for log in ekf)
    _report(acceptance_report, 3, len(ekf) == 10 and worst == 0.0,
            f"largest pose change from an update over {len(ekf)} laps: {worst!r}")


def test_criterion_04_divergence_window(grid, acceptance_report):
    logs, _, _ = grid
    parts, ok = [], True
    for ns in EKF_SETS:
        log = _find(logs, "srpt-ekf", True, ns)
        if log.diverged:
            ok = False
            parts.append(f"{ns}: diverged")
            continue
        d = divergence_window(log, 0.3)
        pos = float(np.max(np.hypot(d[:, 1], d[:, 2])))
        head = math.degrees(float(np.max(np.abs(d[:, 3]))))
        ok &= pos <= 0.25 and head <= 1.0
        parts.append(f"{ns}: {pos:.3f} m/{head:.3f} deg")
    _report(acceptance_report, 4, ok, "; ".join(parts))


def test_criterion_05_sideslip_estimate(grid, acceptance_report):
    _, metrics, _ = grid
    worst_ef, worst_other, where = 0.0, 0.0, ""
    ok = True
    for spec, m in metrics.items():
        if spec.mode != "srpt-ekf":
            continue
        for label, r in m.items():
            if not r.valid:
                ok = False
                continue
            err = math.degrees(r.max_beta_error)
            if label in "EF":
                worst_ef = max(worst_ef, err)
            elif err > worst_other:
                worst_other, where = err, f"{spec.name} {label}"
    ok &= worst_ef <= 2.5 and worst_other <= 1.0
    _report(acceptance_report, 5, ok,
            f"max |beta error| E-F {worst_ef:.2f} deg (<=2.5), elsewhere {worst_other:.2f} deg "
            f"(<=1.0) at {where}")


def test_criterion_06_noise_insensitivity(grid, acceptance_report):
    logs, metrics, _ = grid
    worst, where, ok = 0.0, "", True
    for delay in (False, True):
        ref = metrics[_find(logs, "srpt-true", delay).spec]
        for ns in EKF_SETS:
            m = metrics[_find(logs, "srpt-ekf", delay, ns).spec]
            for label, r in m.items():
                base = ref[label].rms_dy
                if not (r.valid and ref[label].valid):
                    ok = False
                    continue
                rel = abs(r.rms_dy - base) / base
                if rel > worst:
                    worst, where = rel, f"set {ns} {'delay' if delay else 'no delay'} {label}"
    ok &= worst <= 0.25
    _report(acceptance_report, 6, ok, f"largest RMS deviation from true-state mode "
            f"{100 * worst:.1f}% (<=25%) at {where}")


def test_criterion_07_delay_robustness(grid, acceptance_report):
    logs, metrics, _ = grid
    worst, where, ok = 0.0, "", True
    for log in logs:
        if log.spec.mode not in SRPT_MODES or not log.spec.delay:
            continue
        off = metrics[_find(logs, log.spec.mode, False, log.spec.noise_set).spec]
        for label, r in metrics[log.spec].items():
            if not (r.valid and off[label].valid):
                ok = False
                continue
            ratio = r.rms_dy / off[label].rms_dy
            if ratio > worst:
                worst, where = ratio, f"{log.spec.mode} {log.spec.noise_set} {label}"
    ok &= worst <= 1.5
    _report(acceptance_report, 7, ok, f"largest delay/no-delay RMS ratio {worst:.2f} (<=1.5) "
            f"at {where}")


def test_criterion_08_baseline_contrast(grid, acceptance_report):
    logs, metrics, _ = grid
    drv_on = _find(logs, "driver", True)
    drv_off = _find(logs, "driver", False)
    m_on, m_off = metrics[drv_on.spec], metrics[drv_off.spec]
    parts, ok = [], True
    if drv_on.diverged:
        parts.append(f"driver with delay left the corridor at s={drv_on.s[-1]:.1f} m")
    if drv_off.diverged:
        parts.append(f"driver without delay left the corridor at s={drv_off.s[-1]:.1f} m")
    for label in "CH":
        srpt = max(metrics[_find(logs, "srpt-ekf", True, ns).spec][label].max_dy
                   for ns in EKF_SETS)
        r_on, r_off = m_on[label], m_off[label]
        if not (r_on.valid and r_off.valid):
            ok = False
            parts.append(f"{label}: driver metrics invalid")
            continue
        ok &= r_on.max_dy >= 2 * srpt and r_on.steer_reversals > r_off.steer_reversals
        parts.append(f"{label}: driver max {r_on.max_dy:.3f} m vs 2x SRPT-EKF {2 * srpt:.3f} m, "
                     f"reversals {r_on.steer_reversals} vs {r_off.steer_reversals}")
    _report(acceptance_report, 8, ok, "; ".join(parts))


def test_criterion_09_speed_modulation(grid, acceptance_report):
    logs, metrics, _ = grid
    parts, ok = [], True
    for log in logs:
        if log.spec.mode in SRPT_MODES and log.spec.delay:
            r = metrics[log.spec]["H"]
            ok &= r.valid and r.min_speed < 0.85 * V_REF
            parts.append(f"{log.spec.noise_set} {r.min_speed:.2f}")
    _report(acceptance_report, 9, ok,
            f"min speed in H [m/s] (< {0.85 * V_REF:.3f}): " + ", ".join(parts))


def test_criterion_10_q_tuning(track, acceptance_report):
    lap = record_tuning_lap(SEED, track=track)
    res = tune_process_covariance(lap)
    pinned = np.allclose(np.diag(res.Q)[list(POSE_INDICES)], 0.1)
    ok = res.improvement >= 0.30 and pinned
    _report(acceptance_report, 10, ok,
            f"J {res.initial_cost:.5f} -> {res.cost:.5f} ({100 * res.improvement:.1f}% "
            f"reduction, >=30%), pose variances pinned: {pinned}")


def test_criterion_11_k1_sweep(track, acceptance_report):
    best, table = tune_driver_gain(track)
    rms, peak = driver_score(best, track)
    completes = math.isfinite(rms)
    ok = K1_GRID[0] <= best <= K1_GRID[-1] and completes and abs(best - 0.213) <= 0.04
    _report(acceptance_report, 11, ok,
            f"selected k1={best:.3f} (target 0.213 +- 0.04) from {len(table)} candidates; "
            f"A-C RMS {rms:.3f} m, max {peak:.3f} m, completes A-C: {completes}")


def test_criterion_12_determinism(grid, track, tmp_path_factory, acceptance_report):
    _, _, out = grid
    again = export_artifacts(run_grid(SEED, track=track), tmp_path_factory.mktemp("repeat"),
                             track, plots=False)
    a = (out / "metrics.csv").read_bytes()
    b = (again / "metrics.csv").read_bytes()
    _report(acceptance_report, 12, a == b,
            f"metrics.csv {len(a)} bytes, identical on repeat: {a == b}")


def test_criterion_13_sensor_calibration(acceptance_report):
    rig = SensorRig(noise_set("ii"), np.random.default_rng(SEED))
    truth = make_plant_state(Vx=V_REF, yaw_rate=0.1, delta=0.02)
    truth[PLANT_AY] = 0.6
    z = np.array([sense(truth, rig) for _ in range(100_000)])
    rel = np.abs(z.std(axis=0) / MEAS_STD - 1.0)
    _report(acceptance_report, 13, bool(np.all(rel <= 0.03)),
            "std/nominal - 1: " + ", ".join(f"{v:+.4f}" for v in z.std(axis=0) / MEAS_STD - 1))
