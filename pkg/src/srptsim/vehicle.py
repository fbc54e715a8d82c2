"""Single-track vehicle model, its parameters, and the ground-truth plant.

The estimator/prediction model carries nine states in a fixed order::

    [beta, yaw_rate, heading, FyF, FyR, Vx, x, y, delta]

The plant used as ground truth shares that skeleton but saturates the axle
lateral forces with a tanh law, scales them with road adhesion, adds a
lateral wind force, and stores the lateral specific force (what an IMU would
read) as a tenth entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._jit import kernel

# state indices
BETA, YAW_RATE, HEADING, FYF, FYR, VX, X, Y, DELTA = range(9)
NX = 9
STATE_NAMES = ("beta", "yaw_rate", "heading", "FyF", "FyR", "Vx", "x", "y", "delta")
PLANT_AY = 9
NX_PLANT = 10

# parameter array layout used by kernels
P_M, P_IZ, P_MF, P_MR, P_LF, P_LR, P_CF, P_CR, P_LAM, P_GAMMA = range(10)

STEER_RATE_MAX = math.radians(20.0)
STEER_LOCK = math.radians(35.0)  # road-wheel angle limit of the plant's steering rack
ACCEL_MIN = -3.0
ACCEL_MAX = 1.0
V_EPS = 0.01

GRAVITY = 9.81
AIR_DENSITY = 1.225
SIDE_FORCE_AREA = 2.0  # lateral force coefficient times area, m^2


@dataclass(frozen=True)
class VehicleParams:
    """Lumped single-track parameters of a front-wheel-drive passenger car."""

    m: float = 1681.0
    Iz: float = 2600.0
    mF: float = 871.6
    mR: float = 809.4
    lF: float = 1.3
    lR: float = 1.4
    CsigmaF: float = 1.057e5
    CsigmaR: float = 1.050e5
    lam: float = 0.3
    gamma: float = 0.6

    def __post_init__(self):
        for name in ("m", "Iz", "lF", "lR", "CsigmaF", "CsigmaR", "lam"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if abs(self.mF + self.mR - self.m) > 1e-6 * self.m:
            raise ValueError(f"mF + mR = {self.mF + self.mR} does not match m = {self.m}")

    @property
    def wheelbase(self) -> float:
        return self.lF + self.lR

    def array(self) -> np.ndarray:
        return np.array([self.m, self.Iz, self.mF, self.mR, self.lF, self.lR,
                         self.CsigmaF, self.CsigmaR, self.lam, self.gamma])

    def scaled_stiffness(self, factor: float) -> "VehicleParams":
        return replace(self, CsigmaF=self.CsigmaF * factor, CsigmaR=self.CsigmaR * factor)

    @classmethod
    def from_mapping(cls, values) -> "VehicleParams":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown vehicle parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})

    @classmethod
    def from_file(cls, path) -> "VehicleParams":
        return cls.from_mapping(read_key_values(path))


def read_key_values(path) -> dict[str, str]:
    """Parse a ``key = value`` text file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class ControlCommand(NamedTuple):
    steer_rate: float  # rad/s
    accel: float  # m/s^2

    def clipped(self) -> "ControlCommand":
        return ControlCommand(min(max(self.steer_rate, -STEER_RATE_MAX), STEER_RATE_MAX),
                              min(max(self.accel, ACCEL_MIN), ACCEL_MAX))

    def within_bounds(self, tol: float = 1e-9) -> bool:
        return (abs(self.steer_rate) <= STEER_RATE_MAX + tol
                and ACCEL_MIN - tol <= self.accel <= ACCEL_MAX + tol)


class EnvironmentSample(NamedTuple):
    mu: float = 1.0
    wind: float = 0.0  # lateral wind speed, m/s


def make_state(beta=0.0, yaw_rate=0.0, heading=0.0, FyF=0.0, FyR=0.0, Vx=0.0,
               x=0.0, y=0.0, delta=0.0) -> np.ndarray:
    return np.array([beta, yaw_rate, heading, FyF, FyR, Vx, x, y, delta], dtype=float)


def make_plant_state(**kw) -> np.ndarray:
    s = np.zeros(NX_PLANT)
    s[:NX] = make_state(**kw)
    return s


def plant_to_vehicle_state(s: np.ndarray) -> np.ndarray:
    """Copy of the plant truth in estimator-state layout."""
    return np.array(s[:NX], dtype=float)


def wind_force(wind_speed: float) -> float:
    return 0.5 * AIR_DENSITY * SIDE_FORCE_AREA * wind_speed * wind_speed


# --------------------------------------------------------------------------
# kernels

@kernel
def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return a - 2.0 * math.pi * math.ceil((a - math.pi) / (2.0 * math.pi))


@kernel
def longitudinal_force_k(accel, p):
    if accel >= 0.0:
        return p[P_M] * accel
    return p[P_GAMMA] * p[P_M] * accel


@kernel
def tire_slips_k(x, p):
    v = max(V_EPS, x[VX])
    sf = math.tan(x[DELTA]) - x[BETA] - x[YAW_RATE] * p[P_LF] / v
    sr = -x[BETA] + x[YAW_RATE] * p[P_LR] / v
    return sf, sr


@kernel
def derivative_k(x, steer_rate, accel, p, out):
    m = p[P_M]
    beta = x[BETA]
    r = x[YAW_RATE]
    fyf = x[FYF]
    fyr = x[FYR]
    vx = x[VX]
    v = max(V_EPS, vx)
    cd = math.cos(x[DELTA])
    sd = math.sin(x[DELTA])
    fxf = longitudinal_force_k(accel, p)
    front = fyf * cd + fxf * sd
    sf = sd / cd - beta - r * p[P_LF] / v
    sr = -beta + r * p[P_LR] / v
    tb = math.tan(beta)
    cp = math.cos(x[HEADING])
    sp = math.sin(x[HEADING])
    out[BETA] = (front + fyr) / (m * v) - beta * accel / v - r
    out[YAW_RATE] = (front * p[P_LF] - fyr * p[P_LR]) / p[P_IZ]
    out[HEADING] = r
    out[FYF] = vx / p[P_LAM] * (p[P_CF] * sf - fyf)
    out[FYR] = vx / p[P_LAM] * (p[P_CR] * sr - fyr)
    out[VX] = accel
    out[X] = vx * (cp - sp * tb)
    out[Y] = vx * (sp + cp * tb)
    out[DELTA] = steer_rate


@kernel
def euler_step_k(x, steer_rate, accel, dt, p, work, out):
    """One explicit Euler step without heading wrap (``out`` may alias ``x``)."""
    derivative_k(x, steer_rate, accel, p, work)
    for i in range(NX):
        out[i] = x[i] + dt * work[i]


@kernel
def estimator_step_k(x, steer_rate, accel, dt, p, work, out):
    euler_step_k(x, steer_rate, accel, dt, p, work, out)
    out[HEADING] = wrap_angle(out[HEADING])


@kernel
def derivative_jacobian_k(x, steer_rate, accel, p, A, B):
    """Analytic partials of the model derivative w.r.t. state (A) and input (B)."""
    m = p[P_M]
    iz = p[P_IZ]
    lf = p[P_LF]
    lr = p[P_LR]
    cf = p[P_CF]
    cr = p[P_CR]
    lam = p[P_LAM]
    beta = x[BETA]
    r = x[YAW_RATE]
    fyf = x[FYF]
    fyr = x[FYR]
    vx = x[VX]
    v = max(V_EPS, vx)
    gv = 1.0 if vx > V_EPS else 0.0
    cd = math.cos(x[DELTA])
    sd = math.sin(x[DELTA])
    td = sd / cd
    fxf = longitudinal_force_k(accel, p)
    dfx = m if accel >= 0.0 else p[P_GAMMA] * m
    front = fyf * cd + fxf * sd
    dfront = -fyf * sd + fxf * cd
    sf = td - beta - r * lf / v
    sr = -beta + r * lr / v
    tb = math.tan(beta)
    sec2b = 1.0 + tb * tb
    cp = math.cos(x[HEADING])
    sp = math.sin(x[HEADING])
    for i in range(NX):
        for j in range(NX):
            A[i, j] = 0.0
        B[i, 0] = 0.0
        B[i, 1] = 0.0

    A[BETA, BETA] = -accel / v
    A[BETA, YAW_RATE] = -1.0
    A[BETA, FYF] = cd / (m * v)
    A[BETA, FYR] = 1.0 / (m * v)
    A[BETA, VX] = gv * (-(front + fyr) / (m * v * v) + beta * accel / (v * v))
    A[BETA, DELTA] = dfront / (m * v)

    A[YAW_RATE, FYF] = cd * lf / iz
    A[YAW_RATE, FYR] = -lr / iz
    A[YAW_RATE, DELTA] = dfront * lf / iz

    A[HEADING, YAW_RATE] = 1.0

    k = vx / lam
    A[FYF, BETA] = -k * cf
    A[FYF, YAW_RATE] = -k * cf * lf / v
    A[FYF, FYF] = -k
    A[FYF, VX] = (cf * sf - fyf) / lam + k * cf * r * lf / (v * v) * gv
    A[FYF, DELTA] = k * cf / (cd * cd)

    A[FYR, BETA] = -k * cr
    A[FYR, YAW_RATE] = k * cr * lr / v
    A[FYR, FYR] = -k
    A[FYR, VX] = (cr * sr - fyr) / lam - k * cr * r * lr / (v * v) * gv

    A[X, BETA] = -vx * sp * sec2b
    A[X, HEADING] = vx * (-sp - cp * tb)
    A[X, VX] = cp - sp * tb
    A[Y, BETA] = vx * cp * sec2b
    A[Y, HEADING] = vx * (cp - sp * tb)
    A[Y, VX] = sp + cp * tb

    B[DELTA, 0] = 1.0
    B[BETA, 1] = dfx * sd / (m * v) - beta / v
    B[YAW_RATE, 1] = dfx * sd * lf / iz
    B[VX, 1] = 1.0


@kernel
def plant_step_k(s, steer_rate, accel, mu, wind, dt, p, out):
    """Advance the saturating ground-truth plant by ``dt``; ``out`` may alias ``s``."""
    steer_rate = min(max(steer_rate, -STEER_RATE_MAX), STEER_RATE_MAX)
    accel = min(max(accel, ACCEL_MIN), ACCEL_MAX)
    m = p[P_M]
    beta = s[BETA]
    r = s[YAW_RATE]
    psi = s[HEADING]
    fyf = s[FYF]
    fyr = s[FYR]
    vx = s[VX]
    delta = s[DELTA]
    v = max(V_EPS, vx)
    cd = math.cos(delta)
    sd = math.sin(delta)
    sf = sd / cd - beta - r * p[P_LF] / v
    sr = -beta + r * p[P_LR] / v
    capf = mu * p[P_MF] * GRAVITY
    capr = mu * p[P_MR] * GRAVITY
    fyf_ss = capf * math.tanh(p[P_CF] * sf / capf)
    fyr_ss = capr * math.tanh(p[P_CR] * sr / capr)
    fw = 0.5 * AIR_DENSITY * SIDE_FORCE_AREA * wind * wind
    fxf = longitudinal_force_k(accel, p)
    front = fyf * cd + fxf * sd
    lateral = front + fyr + fw
    tb = math.tan(beta)
    cp = math.cos(psi)
    sp = math.sin(psi)

    dbeta = lateral / (m * v) - beta * accel / v - r
    dr = (front * p[P_LF] - fyr * p[P_LR]) / p[P_IZ]
    k = vx / p[P_LAM]
    dfyf = k * (fyf_ss - fyf)
    dfyr = k * (fyr_ss - fyr)
    dx = vx * (cp - sp * tb)
    dy = vx * (sp + cp * tb)

    out[BETA] = beta + dt * dbeta
    out[YAW_RATE] = r + dt * dr
    out[HEADING] = wrap_angle(psi + dt * r)
    out[FYF] = min(max(fyf + dt * dfyf, -capf), capf)
    out[FYR] = min(max(fyr + dt * dfyr, -capr), capr)
    out[VX] = max(0.0, vx + dt * accel)
    out[X] = s[X] + dt * dx
    out[Y] = s[Y] + dt * dy
    out[DELTA] = min(max(delta + dt * steer_rate, -STEER_LOCK), STEER_LOCK)
    out[PLANT_AY] = lateral / m


# --------------------------------------------------------------------------
# checked public wrappers

def _check_finite(name, values):
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries: {arr}")
    return arr


def state_derivative(X, u, p: VehicleParams = VehicleParams()) -> np.ndarray:
    X = _check_finite("state", X)
    u = ControlCommand(*_check_finite("command", u))
    out = np.empty(NX)
    derivative_k(X, u.steer_rate, u.accel, p.array(), out)
    return out


def tire_slips(X, p: VehicleParams = VehicleParams()) -> tuple[float, float]:
    return tire_slips_k(np.asarray(X, dtype=float), p.array())


def longitudinal_force(accel: float, p: VehicleParams = VehicleParams()) -> float:
    return longitudinal_force_k(float(accel), p.array())


def integrate_estimator_model(X, u, dt: float = 0.001,
                              p: VehicleParams = VehicleParams()) -> np.ndarray:
    X = _check_finite("state", X)
    u = ControlCommand(*_check_finite("command", u))
    out = np.empty(NX)
    estimator_step_k(X, u.steer_rate, u.accel, dt, p.array(), np.empty(NX), out)
    return out


def plant_step(s, u, env: EnvironmentSample = EnvironmentSample(), dt: float = 0.001,
               p: VehicleParams = VehicleParams()) -> np.ndarray:
    s = _check_finite("plant state", s)
    if s.shape != (NX_PLANT,):
        raise ValueError(f"plant state must have {NX_PLANT} entries, got shape {s.shape}")
    u = ControlCommand(*u)
    out = np.empty(NX_PLANT)
    plant_step_k(s, u.steer_rate, u.accel, env.mu, env.wind, dt, p.array(), out)
    return out
