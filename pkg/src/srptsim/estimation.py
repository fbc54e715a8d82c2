"""Extended Kalman filter over the single-track state, SE(2) pose helpers,
and the offline process-noise tuning harness.

The measurement vector is ``[ay, yaw_rate, Vx, delta]``.  Heading and
position never enter it, so the filter is built to leave them alone at
every update: the gain rows for those three states are forced to zero and
the covariance is updated in Joseph form, which stays a valid covariance
for any gain.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize

from ._jit import kernel
from .vehicle import (BETA, DELTA, FYF, FYR, HEADING, NX, STATE_NAMES, VX, X, Y, YAW_RATE,
                      P_M, VehicleParams, euler_step_k, wrap_angle)

NZ = 4
MEAS_NAMES = ("ay", "yaw_rate", "Vx", "delta")
MEAS_STD = np.array([0.112, 0.005, 0.083, 0.003])
DEFAULT_R = np.diag(MEAS_STD ** 2)
NOMINAL_Q_STD = np.array([0.0125, 0.0011, 1.0, 0.3162, 0.3415, 0.0008, 1.0, 1.0, 2e-5])
NOMINAL_Q = np.diag(NOMINAL_Q_STD ** 2) / 10.0
INITIAL_P = np.eye(NX) * 1e-4
POSE_INDICES = (HEADING, X, Y)
FREE_INDICES = (BETA, YAW_RATE, FYF, FYR, VX, DELTA)
POSE_VARIANCE = 1.0 / 10.0
JAC_EPS = 1e-6

# zero where the update is not allowed to move the state
UPDATE_MASK = np.ones(NX)
UPDATE_MASK[list(POSE_INDICES)] = 0.0

EKF_OK = 0
EKF_SINGULAR = 1
EKF_NOT_PSD = 2
EKF_NONFINITE = 3


class EkfError(RuntimeError):
    pass


class Pose(NamedTuple):
    x: float
    y: float
    psi: float


class RelativePose(NamedTuple):
    dx: float
    dy: float
    dpsi: float


@dataclass
class EkfBelief:
    xhat: np.ndarray
    P: np.ndarray

    def copy(self) -> "EkfBelief":
        return EkfBelief(self.xhat.copy(), self.P.copy())


# --------------------------------------------------------------------------
# kernels

@kernel
def measurement_model_k(x, p, out):
    out[0] = (x[FYF] * math.cos(x[DELTA]) + x[FYR]) / p[P_M]
    out[1] = x[YAW_RATE]
    out[2] = x[VX]
    out[3] = x[DELTA]


@kernel
def transition_jacobian_k(x, steer_rate, accel, dt, p, F):
    """Central-difference Jacobian of the (unwrapped) one-step map."""
    xp = x.copy()
    fp = np.empty(NX)
    fm = np.empty(NX)
    work = np.empty(NX)
    for j in range(NX):
        xp[j] = x[j] + JAC_EPS
        euler_step_k(xp, steer_rate, accel, dt, p, work, fp)
        xp[j] = x[j] - JAC_EPS
        euler_step_k(xp, steer_rate, accel, dt, p, work, fm)
        xp[j] = x[j]
        for i in range(NX):
            F[i, j] = (fp[i] - fm[i]) / (2.0 * JAC_EPS)


@kernel
def measurement_jacobian_k(x, p, H):
    xp = x.copy()
    hp = np.empty(NZ)
    hm = np.empty(NZ)
    for j in range(NX):
        xp[j] = x[j] + JAC_EPS
        measurement_model_k(xp, p, hp)
        xp[j] = x[j] - JAC_EPS
        measurement_model_k(xp, p, hm)
        xp[j] = x[j]
        for i in range(NZ):
            H[i, j] = (hp[i] - hm[i]) / (2.0 * JAC_EPS)


@kernel
def ekf_predict_k(xhat, P, steer_rate, accel, dt, p, Q):
    """In-place predict.  Returns a status code."""
    F = np.empty((NX, NX))
    transition_jacobian_k(xhat, steer_rate, accel, dt, p, F)
    work = np.empty(NX)
    euler_step_k(xhat, steer_rate, accel, dt, p, work, xhat)
    xhat[HEADING] = wrap_angle(xhat[HEADING])
    Pn = F @ P @ F.T + Q
    for i in range(NX):
        for j in range(NX):
            P[i, j] = 0.5 * (Pn[i, j] + Pn[j, i])
    for i in range(NX):
        if not (math.isfinite(xhat[i]) and math.isfinite(P[i, i])):
            return EKF_NONFINITE
        if P[i, i] < -1e-9:
            return EKF_NOT_PSD
    return EKF_OK


@kernel
def ekf_update_k(xhat, P, z, R, p, mask):
    """In-place measurement update.  Returns a status code."""
    H = np.empty((NZ, NX))
    measurement_jacobian_k(xhat, p, H)
    h = np.empty(NZ)
    measurement_model_k(xhat, p, h)
    nu = z - h
    PHt = P @ H.T
    S = H @ PHt + R
    if abs(np.linalg.det(S)) < 1e-300:
        return EKF_SINGULAR
    K = np.linalg.solve(S, PHt.T).T
    for i in range(NX):
        if mask[i] == 0.0:
            for j in range(NZ):
                K[i, j] = 0.0
    dx = K @ nu
    for i in range(NX):
        xhat[i] += dx[i]
    xhat[HEADING] = wrap_angle(xhat[HEADING])
    IKH = np.eye(NX) - K @ H
    Pn = IKH @ P @ IKH.T + K @ R @ K.T
    for i in range(NX):
        for j in range(NX):
            P[i, j] = 0.5 * (Pn[i, j] + Pn[j, i])
    if np.linalg.eigvalsh(P)[0] < -1e-9:
        return EKF_NOT_PSD
    return EKF_OK


@kernel
def ekf_replay_k(x0, P0, Q, R, p, z, u, steps, dt, mask, est):
    """Run the filter over a 100 Hz log.

    Row ``i`` of ``u`` is the command held from sample ``i`` to ``i + 1``;
    ``est[i]`` is the posterior at sample ``i``.  Returns the first failing
    row (or -1).
    """
    xhat = x0.copy()
    P = P0.copy()
    est[0, :] = xhat
    for i in range(1, z.shape[0]):
        for _ in range(steps):
            if ekf_predict_k(xhat, P, u[i - 1, 0], u[i - 1, 1], dt, p, Q) != EKF_OK:
                return i
        if ekf_update_k(xhat, P, z[i], R, p, mask) != EKF_OK:
            return i
        est[i, :] = xhat
    return -1


# --------------------------------------------------------------------------
# public API

def measurement_model(X, p: VehicleParams = VehicleParams()) -> np.ndarray:
    out = np.empty(NZ)
    measurement_model_k(np.asarray(X, dtype=float), p.array(), out)
    return out


def transition_jacobian(X, u, dt: float = 0.001, p: VehicleParams = VehicleParams()) -> np.ndarray:
    F = np.empty((NX, NX))
    transition_jacobian_k(np.asarray(X, dtype=float), float(u[0]), float(u[1]), dt, p.array(), F)
    return F


def measurement_jacobian(X, p: VehicleParams = VehicleParams()) -> np.ndarray:
    H = np.empty((NZ, NX))
    measurement_jacobian_k(np.asarray(X, dtype=float), p.array(), H)
    return H


def initial_belief(x0) -> EkfBelief:
    return EkfBelief(np.array(x0, dtype=float), INITIAL_P.copy())


def _raise_status(status, where):
    if status == EKF_SINGULAR:
        raise EkfError(f"{where}: singular innovation covariance")
    if status == EKF_NOT_PSD:
        raise EkfError(f"{where}: covariance lost positive semidefiniteness")
    if status == EKF_NONFINITE:
        raise EkfError(f"{where}: non-finite estimate")


def ekf_predict(b: EkfBelief, u, dt: float = 0.001, Q: np.ndarray = NOMINAL_Q,
                p: VehicleParams = VehicleParams()) -> EkfBelief:
    out = b.copy()
    _raise_status(ekf_predict_k(out.xhat, out.P, float(u[0]), float(u[1]), dt, p.array(),
                                np.asarray(Q, dtype=float)), "predict")
    return out


def ekf_update(b: EkfBelief, z, R: np.ndarray = DEFAULT_R,
               p: VehicleParams = VehicleParams()) -> EkfBelief:
    out = b.copy()
    _raise_status(ekf_update_k(out.xhat, out.P, np.asarray(z, dtype=float),
                               np.asarray(R, dtype=float), p.array(), UPDATE_MASK), "update")
    return out


def relative_pose(a, b) -> RelativePose:
    """Pose ``b`` expressed in the frame of pose ``a``."""
    ax, ay, apsi = a
    bx, by, bpsi = b
    c, s = math.cos(apsi), math.sin(apsi)
    dx, dy = bx - ax, by - ay
    return RelativePose(c * dx + s * dy, -s * dx + c * dy, wrap_angle(bpsi - apsi))


def compose(a, r) -> Pose:
    """Pose reached by applying relative pose ``r`` in the frame of ``a``."""
    ax, ay, apsi = a
    dx, dy, dpsi = r
    c, s = math.cos(apsi), math.sin(apsi)
    return Pose(ax + c * dx - s * dy, ay + s * dx + c * dy, wrap_angle(apsi + dpsi))


def relative_pose_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise :func:`relative_pose` for (n, 3) arrays of ``[x, y, psi]``."""
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    dx = b[:, 0] - a[:, 0]
    dy = b[:, 1] - a[:, 1]
    dpsi = np.angle(np.exp(1j * (b[:, 2] - a[:, 2])))
    return np.column_stack([c * dx + s * dy, -s * dx + c * dy, dpsi])


def window_pose_errors(est_pose: np.ndarray, true_pose: np.ndarray, window: int) -> np.ndarray:
    """Estimated minus true relative pose over a sliding window of ``window`` samples.

    Returns an (n - window, 3) array of ``[ex, ey, epsi]`` for samples
    ``window .. n-1``; the heading difference is wrapped.
    """
    if window < 1 or len(est_pose) <= window:
        raise ValueError(f"need more than {window} samples, got {len(est_pose)}")
    rel_est = relative_pose_array(est_pose[:-window], est_pose[window:])
    rel_true = relative_pose_array(true_pose[:-window], true_pose[window:])
    err = rel_est - rel_true
    err[:, 2] = np.angle(np.exp(1j * err[:, 2]))
    return err


# --------------------------------------------------------------------------
# process-noise tuning

@dataclass
class TuningConfig:
    window_seconds: float = 0.3
    w_position: float = 1.0
    w_heading: float = 1e-2
    free_indices: tuple = FREE_INDICES
    maxiter: int = 600

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        if self.w_position < 0 or self.w_heading < 0:
            raise ValueError("weights must be non-negative")


@dataclass
class LapLog:
    """A recorded lap sampled at the sensor rate.

    ``u[i]`` is the command applied between samples ``i`` and ``i + 1``.
    """

    t: np.ndarray
    truth: np.ndarray  # (n, 9)
    z: np.ndarray  # (n, 4)
    u: np.ndarray  # (n, 2)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def header(self) -> list[str]:
        return (["t"] + [f"true_{n}" for n in STATE_NAMES] + [f"z_{n}" for n in MEAS_NAMES]
                + ["u_steer_rate", "u_accel"])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in np.column_stack([self.t, self.truth, self.z, self.u]):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "LapLog":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] != 16:
            raise ValueError(f"{path}: expected 16 columns, got {data.shape[1]}")
        return cls(data[:, 0], data[:, 1:10], data[:, 10:14], data[:, 14:16])


@dataclass
class TuningResult:
    Q: np.ndarray
    cost: float
    initial_cost: float
    evaluations: int
    history: list = field(default_factory=list)

    @property
    def improvement(self) -> float:
        return 1.0 - self.cost / self.initial_cost


def tuning_cost(est_pose, true_pose, window: int, w_position: float = 1.0,
                w_heading: float = 1e-2) -> float:
    """Weighted RMS of windowed relative-pose prediction errors."""
    err = window_pose_errors(np.asarray(est_pose), np.asarray(true_pose), window)
    pos = np.hypot(err[:, 0], err[:, 1])
    return float(w_position * np.sqrt(np.mean(pos ** 2))
                 + w_heading * np.sqrt(np.mean(err[:, 2] ** 2)))


def replay_filter(log: LapLog, Q: np.ndarray, R: np.ndarray = DEFAULT_R,
                  p: VehicleParams = VehicleParams(), dt: float = 0.001) -> np.ndarray:
    """Filter estimates at every log sample, started from the logged truth."""
    steps = int(round(log.dt / dt))
    est = np.full((len(log.t), NX), np.nan)
    bad = ekf_replay_k(log.truth[0].copy(), INITIAL_P.copy(), np.asarray(Q, dtype=float),
                       np.asarray(R, dtype=float), p.array(), np.ascontiguousarray(log.z),
                       np.ascontiguousarray(log.u), steps, dt, UPDATE_MASK, est)
    if bad >= 0:
        raise EkfError(f"filter failed at log row {bad} (t={log.t[bad]:.3f}s)")
    return est


def q_from_free(free_var, free_indices=FREE_INDICES) -> np.ndarray:
    q = np.full(NX, POSE_VARIANCE)
    q[list(free_indices)] = free_var
    return np.diag(q)


def tune_process_covariance(log: LapLog, cfg: TuningConfig = TuningConfig(),
                            R: np.ndarray = DEFAULT_R, p: VehicleParams = VehicleParams(),
                            q0_variance: float = 1e-4 / 10.0) -> TuningResult:
    """Search the diagonal process noise of the observable states.

    Nelder-Mead over log-variances; pose variances stay at ``1/10``.
    """
    window = int(round(cfg.window_seconds / log.dt))
    if len(log.t) <= window:
        raise ValueError(f"log of {len(log.t)} samples is shorter than the {window}-sample window")
    true_pose = log.truth[:, [X, Y, HEADING]]
    history = []

    def cost(logvar):
        try:
            est = replay_filter(log, q_from_free(np.exp(logvar), cfg.free_indices), R, p)
        except EkfError:
            return 1e6
        J = tuning_cost(est[:, [X, Y, HEADING]], true_pose, window, cfg.w_position, cfg.w_heading)
        history.append(J)
        return J if math.isfinite(J) else 1e6

    x0 = np.full(len(cfg.free_indices), math.log(q0_variance))
    J0 = cost(x0)
    res = minimize(cost, x0, method="Nelder-Mead",
                   options={"maxiter": cfg.maxiter, "xatol": 1e-2, "fatol": 1e-6 * J0,
                            "initial_simplex": x0 + np.vstack([np.zeros(len(x0)),
                                                               2.0 * np.eye(len(x0))])})
    best = min(float(res.fun), J0)
    logvar = res.x if res.fun <= J0 else x0
    return TuningResult(q_from_free(np.exp(logvar), cfg.free_indices), best, J0,
                        int(res.nfev) + 1, history)


def write_q_file(Q: np.ndarray, path) -> None:
    lines = [f"{name} = {float(Q[i, i])!r}" for i, name in enumerate(STATE_NAMES)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_q_file(path) -> np.ndarray:
    from .vehicle import read_key_values
    values = read_key_values(path)
    return np.diag([float(values[name]) for name in STATE_NAMES])
