"""Closed-loop experiment runner, region metrics and artifact export."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .controller import Nmpc, NmpcConfig
from .estimation import (DEFAULT_R, INITIAL_P, NOMINAL_Q, UPDATE_MASK, LapLog,
                         _raise_status, ekf_predict_k, ekf_update_k, window_pose_errors)
from .link import Channel, DelayModel, RateSchedule, Scheduler, sample_downlink_delay
from .operator import (DriverConfig, LookaheadConfig, ReferenceGenerator, lookahead_driver_steer,
                       steer_actuator_rate, tune_k1, K1_GRID)
from .scenario import (ClosestPointTracker, SensorRig, TrackModel, build_track, environment_at,
                       estimator_params_for, noise_set, sense)
from .vehicle import (ACCEL_MAX, ACCEL_MIN, BETA, DELTA, HEADING, NX, NX_PLANT, STEER_RATE_MAX,
                      VX, X, Y, VehicleParams, make_plant_state, plant_step_k)

MODES = ("srpt-true", "srpt-ekf", "driver")
SRPT_MODES = ("srpt-true", "srpt-ekf")
REGION_LABELS = tuple("ABCDEFGH")
CORRIDOR = 10.0
LAP_END_MARGIN = 0.5
METRIC_COLUMNS = ("region", "mode", "noiseSet", "delay", "maxDY", "rmsDY", "minSpeed",
                  "steerReversals")


@dataclass(frozen=True)
class ExperimentSpec:
    mode: str = "srpt-ekf"
    noise_set: str = "ii"
    delay: bool = True
    seed: int = 0
    v_ref: float = 22.0 / 3.6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "srpt-true":
            object.__setattr__(self, "noise_set", "i")
        elif self.mode == "driver":
            object.__setattr__(self, "noise_set", "-")
        else:
            cfg = noise_set(self.noise_set)
            if not cfg.use_ekf:
                raise ValueError("srpt-ekf needs one of the noise sets ii-vi")
        if self.v_ref <= 0:
            raise ValueError("v_ref must be positive")

    @property
    def name(self) -> str:
        noise = "none" if self.noise_set == "-" else self.noise_set
        return f"{self.mode}_{noise}_{'delay' if self.delay else 'nodelay'}_seed{self.seed}"


@dataclass
class SimConfig:
    """Everything about a run that is not part of the experiment grid."""

    vehicle: VehicleParams = field(default_factory=VehicleParams)
    nmpc: NmpcConfig = field(default_factory=NmpcConfig)
    delays: DelayModel = field(default_factory=DelayModel)
    lookahead: LookaheadConfig = field(default_factory=LookaheadConfig)
    driver: DriverConfig = field(default_factory=DriverConfig)
    rates: RateSchedule = field(default_factory=RateSchedule)
    Q: np.ndarray = field(default_factory=lambda: NOMINAL_Q.copy())
    R: np.ndarray = field(default_factory=lambda: DEFAULT_R.copy())
    max_time: float = 150.0
    start_at: float = 0.0  # arclength of the initial pose
    stop_at: float | None = None  # arclength; defaults to the full lap


@dataclass
class RunLog:
    spec: ExperimentSpec
    t: np.ndarray
    truth: np.ndarray
    est: np.ndarray
    u: np.ndarray
    ref: np.ndarray
    s: np.ndarray
    dy: np.ndarray
    z: np.ndarray
    solver: np.ndarray  # (n, 2) iterations and cost of the latest NMPC solve
    diverged: bool = False
    completed: bool = False
    command_bounds: tuple = (0.0, 0.0, 0.0)  # max |steer rate|, min accel, max accel
    pose_corrections: float = 0.0  # largest |change| of x, y, heading from any EKF update
    uplink_trace: list = field(default_factory=list)
    downlink_trace: list = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    def lap_log(self) -> LapLog:
        return LapLog(self.t.copy(), self.truth.copy(), self.z.copy(), self.u.copy())

    def commands_feasible(self, tol: float = 1e-9) -> bool:
        sr, amin, amax = self.command_bounds
        return (sr <= STEER_RATE_MAX + tol and amin >= ACCEL_MIN - tol and amax <= ACCEL_MAX + tol
                and bool(np.all(np.abs(self.u[:, 0]) <= STEER_RATE_MAX + tol)))


def run_experiment(spec: ExperimentSpec, cfg: SimConfig | None = None,
                   track: TrackModel | None = None) -> RunLog:
    cfg = cfg or SimConfig()
    track = track or build_track()
    p = cfg.vehicle
    parr = p.array()
    rates = cfg.rates
    dt = rates.base_dt
    srpt = spec.mode in SRPT_MODES
    use_ekf = spec.mode == "srpt-ekf"
    nset = noise_set(spec.noise_set) if spec.noise_set != "-" else noise_set("i")
    p_est = estimator_params_for(nset, p) if use_ekf else p
    p_est_arr = p_est.array()
    nmpc_cfg = replace(cfg.nmpc, v_ref=spec.v_ref)

    sensor_seed, delay_seed = np.random.SeedSequence(spec.seed).spawn(2)
    rig = SensorRig(nset, np.random.default_rng(sensor_seed))
    delay_rng = np.random.default_rng(delay_seed)
    uplink_delay = cfg.delays.uplink if spec.delay else 0.0

    x0, y0, psi0 = track.pose_at(cfg.start_at)
    plant = make_plant_state(x=x0, y=y0, heading=psi0, Vx=spec.v_ref)
    nxt = np.empty(NX_PLANT)
    xhat = plant[:NX].copy()
    P = INITIAL_P.copy()
    Q = np.asarray(cfg.Q, dtype=float)
    R = np.asarray(cfg.R, dtype=float)
    z = np.zeros(4)

    downlink = Channel("downlink")
    uplink = Channel("uplink")
    nmpc = Nmpc(nmpc_cfg, p_est)
    tau_prior = (cfg.delays.median + uplink_delay) if spec.delay else 0.0
    generator = ReferenceGenerator(track, cfg.lookahead, uplink_delay, tau_prior)
    generator.tracker.s = cfg.start_at
    driver_tracker = ClosestPointTracker(track, s0=cfg.start_at)
    progress = ClosestPointTracker(track, window=3.0, s0=cfg.start_at)
    stop_at = cfg.stop_at if cfg.stop_at is not None else track.total_length - LAP_END_MARGIN

    st = {
        "cmd": (0.0, 0.0),
        "steer_target": 0.0,
        "delayed": (math.nan, xhat.copy(), plant[:NX].copy()),
        "s": cfg.start_at, "dy": 0.0,
        "sr_max": 0.0, "a_min": 0.0, "a_max": 0.0,
        "pose_jump": 0.0,
        "diverged": False, "done": False,
    }
    n_max = int(cfg.max_time / rates.sensors.gaps[0] / dt) + 2
    log_t = np.empty(n_max)
    log_truth = np.empty((n_max, NX))
    log_est = np.empty((n_max, NX))
    log_u = np.empty((n_max, 2))
    log_ref = np.full((n_max, 3), np.nan)
    log_s = np.empty(n_max)
    log_dy = np.empty(n_max)
    log_z = np.empty((n_max, 4))
    log_solver = np.full((n_max, 2), np.nan)
    count = [0]

    def plant_task(now):
        if srpt:
            sr, a = st["cmd"]
        else:
            sr = steer_actuator_rate(st["steer_target"], plant[DELTA], dt)
            a = min(max(cfg.driver.speed_gain * (spec.v_ref - plant[VX]), ACCEL_MIN), ACCEL_MAX)
            st["cmd"] = (sr, a)
        st["sr_max"] = max(st["sr_max"], abs(sr))
        st["a_min"] = min(st["a_min"], a)
        st["a_max"] = max(st["a_max"], a)
        env = environment_at(track, st["s"], now)
        plant_step_k(plant, sr, a, env.mu, env.wind, dt, parr, nxt)
        plant[:] = nxt
        s, dy = progress.query(plant[X], plant[Y])
        st["s"], st["dy"] = s, dy
        if abs(dy) > CORRIDOR or not np.isfinite(plant).all():
            st["diverged"] = True
        elif s >= stop_at:
            st["done"] = True

    def sensor_task(now):
        z[:] = sense(plant, rig, p)

    def ekf_task(now):
        if use_ekf:
            sr, a = st["cmd"]
            _raise_status(ekf_predict_k(xhat, P, sr, a, dt, p_est_arr, Q), "predict")
            if rates.sensors.due(sched.tick):
                before = xhat[[X, Y, HEADING]].copy()
                _raise_status(ekf_update_k(xhat, P, z, R, p_est_arr, UPDATE_MASK), "update")
                jump = float(np.max(np.abs(xhat[[X, Y, HEADING]] - before)))
                st["pose_jump"] = max(st["pose_jump"], jump)
        else:
            xhat[:] = plant[:NX]

    def downlink_task(now):
        d = sample_downlink_delay(delay_rng, cfg.delays)
        downlink.send((xhat.copy(), plant[:NX].copy()), now, d if spec.delay else 0.0)

    def operator_task(now):
        for msg in downlink.poll(now):
            st["delayed"] = (msg.created_at, msg.payload[0], msg.payload[1])
        origin, est_d, act_d = st["delayed"]
        if srpt:
            payload = generator(now, origin, est_d, act_d)
        else:
            payload = lookahead_driver_steer((act_d[X], act_d[Y], act_d[HEADING]), act_d[VX],
                                             track, cfg.driver, driver_tracker)
        uplink.send(payload, now, uplink_delay)

    def uplink_task(now):
        if not uplink:
            return
        for msg in uplink.poll(now):
            if srpt:
                nmpc.buffer.add(msg.payload)
            else:
                st["steer_target"] = msg.payload

    def nmpc_task(now):
        st["cmd"] = tuple(nmpc.step(now, xhat))

    def log_task(now):
        i = count[0]
        if i >= n_max:
            return
        log_t[i] = now
        log_truth[i] = plant[:NX]
        log_est[i] = xhat
        log_u[i] = st["cmd"]
        if srpt and nmpc.buffer:
            log_ref[i] = nmpc.buffer.newest.pose
        log_s[i] = st["s"]
        log_dy[i] = st["dy"]
        log_z[i] = z
        if nmpc.telemetry:
            log_solver[i] = nmpc.telemetry[-1][1:]
        count[0] = i + 1

    sched = Scheduler(dt)
    sched.add("plant", rates.plant, plant_task)
    sched.add("sensors", rates.sensors, sensor_task)
    sched.add("ekf", rates.plant, ekf_task)
    sched.add("downlink", rates.sensors, downlink_task)
    sched.add("operator", rates.operator, operator_task)
    sched.add("uplink", rates.plant, uplink_task)
    if srpt:
        sched.add("nmpc", rates.nmpc, nmpc_task)
    sched.add("log", rates.sensors, log_task)
    sched.run(cfg.max_time, stop=lambda: st["diverged"] or st["done"])

    n = count[0]
    return RunLog(spec, log_t[:n].copy(), log_truth[:n].copy(), log_est[:n].copy(),
                  log_u[:n].copy(), log_ref[:n].copy(), log_s[:n].copy(), log_dy[:n].copy(),
                  log_z[:n].copy(), log_solver[:n].copy(), diverged=st["diverged"],
                  completed=st["done"], command_bounds=(st["sr_max"], st["a_min"], st["a_max"]),
                  pose_corrections=st["pose_jump"], uplink_trace=list(uplink.trace),
                  downlink_trace=list(downlink.trace))


# --------------------------------------------------------------------------
# analysis

@dataclass
class RegionMetrics:
    region: str
    max_dy: float
    rms_dy: float
    min_speed: float
    steer_reversals: int
    max_beta_error: float = 0.0
    valid: bool = True


def steer_reversals(steer_rate: np.ndarray, tol: float = 1e-6) -> int:
    """Sign changes between consecutive samples that sit on the steer-rate bound."""
    sat = steer_rate[np.abs(steer_rate) >= STEER_RATE_MAX - tol]
    if len(sat) < 2:
        return 0
    return int(np.count_nonzero(np.sign(sat[1:]) != np.sign(sat[:-1])))


def region_metrics(log: RunLog, track: TrackModel) -> dict[str, RegionMetrics]:
    out = {}
    for region in track.regions:
        sel = (log.s >= region.s0) & (log.s < region.s1)
        if log.diverged or not sel.any():
            out[region.label] = RegionMetrics(region.label, math.nan, math.nan, math.nan, 0,
                                              math.nan, valid=False)
            continue
        dy = log.dy[sel]
        beta_err = np.abs(log.est[sel, BETA] - log.truth[sel, BETA])
        out[region.label] = RegionMetrics(
            region.label, float(np.max(np.abs(dy))), float(np.sqrt(np.mean(dy ** 2))),
            float(np.min(log.truth[sel, VX])), steer_reversals(log.u[sel, 0]),
            float(np.max(beta_err)))
    return out


def divergence_window(log: RunLog, window_seconds: float = 0.3) -> np.ndarray:
    """Estimated minus true relative pose over a sliding window; rows ``[t, ex, ey, epsi]``."""
    dt = float(np.median(np.diff(log.t)))
    w = int(round(window_seconds / dt))
    err = window_pose_errors(log.est[:, [X, Y, HEADING]], log.truth[:, [X, Y, HEADING]], w)
    return np.column_stack([log.t[w:], err])


@dataclass
class Comparison:
    rows: list[dict]
    delay_ratio: dict  # (mode, noiseSet, region) -> rms with delay / rms without


def compare_modes(logs: list[RunLog], track: TrackModel) -> Comparison:
    seeds = {}
    for log in logs:
        seeds.setdefault(log.spec.delay, set()).add(log.spec.seed)
    if any(len(v) > 1 for v in seeds.values()):
        raise ValueError(f"runs mix seeds within a delay condition: {seeds}")
    rows = []
    rms = {}
    for log in logs:
        m = region_metrics(log, track)
        for label, r in m.items():
            rows.append({"region": label, "mode": log.spec.mode, "noiseSet": log.spec.noise_set,
                         "delay": "on" if log.spec.delay else "off", "maxDY": r.max_dy,
                         "rmsDY": r.rms_dy, "minSpeed": r.min_speed,
                         "steerReversals": r.steer_reversals})
            rms[(log.spec.mode, log.spec.noise_set, label, log.spec.delay)] = r.rms_dy
    ratio = {}
    for (mode, ns, label, delay), value in rms.items():
        if delay and (mode, ns, label, False) in rms:
            base = rms[(mode, ns, label, False)]
            ratio[(mode, ns, label)] = value / base if base > 0 else (1.0 if value == 0 else math.inf)
    return Comparison(rows, ratio)


# --------------------------------------------------------------------------
# grid and artifacts

def grid_specs(seed: int = 0, v_ref: float = 22.0 / 3.6) -> list[ExperimentSpec]:
    specs = []
    for delay in (False, True):
        specs.append(ExperimentSpec("srpt-true", "i", delay, seed, v_ref))
        for ns in ("ii", "iii", "iv", "v", "vi"):
            specs.append(ExperimentSpec("srpt-ekf", ns, delay, seed, v_ref))
        specs.append(ExperimentSpec("driver", "-", delay, seed, v_ref))
    return specs


def run_grid(seed: int = 0, cfg: SimConfig | None = None, track: TrackModel | None = None,
             progress=None) -> list[RunLog]:
    track = track or build_track()
    logs = []
    specs = grid_specs(seed)
    for i, spec in enumerate(specs):
        logs.append(run_experiment(spec, cfg, track))
        if progress is not None:
            progress(i, len(specs), spec, logs[-1])
    return logs


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


TRACE_COLUMNS = (["t", "s", "dy"] + [f"true_{n}" for n in
                 ("beta", "yaw_rate", "psi", "FyF", "FyR", "Vx", "x", "y", "delta")]
                 + [f"est_{n}" for n in
                    ("beta", "yaw_rate", "psi", "FyF", "FyR", "Vx", "x", "y", "delta")]
                 + ["steer_rate", "accel", "ref_x", "ref_y", "ref_psi",
                    "z_ay", "z_yaw_rate", "z_vx", "z_delta", "nmpc_iters", "nmpc_cost"])


def write_trace_csv(log: RunLog, path) -> None:
    data = np.column_stack([log.t, log.s, log.dy, log.truth, log.est, log.u, log.ref, log.z,
                            log.solver])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in data:
            w.writerow([_fmt(float(v)) for v in row])


def write_latency_csv(trace, path) -> None:
    """One row per arrival: creation time, delivery time and whether it was dropped."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("created_at", "deliver_at", "dropped"))
        for created, deliver, dropped in trace:
            w.writerow((f"{created:.6f}", f"{deliver:.6f}", int(dropped)))


def export_artifacts(logs: list[RunLog], out_dir, track: TrackModel | None = None,
                     plots: bool = True, latency: bool = False) -> Path:
    out = Path(out_dir)
    try:
        (out / "traces").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    track = track or build_track()
    rows = compare_modes(logs, track).rows if logs else []
    write_metrics_csv(rows, out / "metrics.csv")
    for log in logs:
        write_trace_csv(log, out / "traces" / f"{log.spec.name}.csv")
    if latency:
        (out / "latency").mkdir(exist_ok=True)
        for log in logs:
            for link, trace in (("downlink", log.downlink_trace), ("uplink", log.uplink_trace)):
                write_latency_csv(trace, out / "latency" / f"{log.spec.name}_{link}.csv")
    if plots and logs:
        from .plots import plot_divergence, plot_region_bars, plot_trajectories
        plot_trajectories(logs, track, out / "trajectories.svg")
        plot_region_bars(rows, out / "region_errors.svg")
        plot_divergence(logs, out / "divergence.svg")
    return out


# --------------------------------------------------------------------------
# tuning helpers that need closed-loop runs

def driver_score(k1: float, track: TrackModel | None = None, cfg: SimConfig | None = None,
                 seed: int = 0) -> tuple[float, float]:
    """RMS and max cross-track error of the no-delay driver over regions A-C."""
    track = track or build_track()
    cfg = replace(cfg or SimConfig(), driver=replace((cfg or SimConfig()).driver, k1=k1),
                  stop_at=track.region("C").s1)
    log = run_experiment(ExperimentSpec("driver", "-", False, seed), cfg, track)
    if log.diverged:
        return math.inf, math.inf
    sel = np.zeros(len(log), dtype=bool)
    for label in "ABC":
        r = track.region(label)
        sel |= (log.s >= r.s0) & (log.s < r.s1)
    dy = log.dy[sel]
    return float(np.sqrt(np.mean(dy ** 2))), float(np.max(np.abs(dy)))


def tune_driver_gain(track: TrackModel | None = None, cfg: SimConfig | None = None,
                     grid=K1_GRID, seed: int = 0):
    track = track or build_track()
    return tune_k1(lambda k1: driver_score(k1, track, cfg, seed), grid)


def record_tuning_lap(seed: int = 0, cfg: SimConfig | None = None,
                      track: TrackModel | None = None) -> LapLog:
    """No-delay SRPT-EKF lap with Gaussian-only sensors, for process-noise tuning."""
    log = run_experiment(ExperimentSpec("srpt-ekf", "ii", False, seed), cfg, track)
    if log.diverged:
        raise RuntimeError("tuning lap diverged")
    return log.lap_log()
