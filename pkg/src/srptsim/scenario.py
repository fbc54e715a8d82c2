"""Test track with regions A-H, environment map, and the noisy sensor layer."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._jit import kernel
from .estimation import MEAS_STD, NZ
from .vehicle import (DELTA, PLANT_AY, VX, YAW_RATE, EnvironmentSample,
                      VehicleParams, wrap_angle)

WIND_PEAK = 80.0 / 3.6
TRACK_SPACING = 0.05
TILT_GRAVITY = 9.8


class Region(NamedTuple):
    label: str
    s0: float
    s1: float
    mu: float
    wind: bool

    def contains(self, s: float) -> bool:
        return self.s0 <= s < self.s1


@dataclass
class TrackModel:
    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray  # continuous (unwrapped) tangent heading
    regions: list[Region]

    @property
    def total_length(self) -> float:
        return float(self.s[-1])

    def region_at(self, s: float) -> Region | None:
        for r in self.regions:
            if r.contains(s):
                return r
        return None

    def region(self, label: str) -> Region:
        for r in self.regions:
            if r.label == label:
                return r
        raise KeyError(label)

    def pose_at(self, s: float) -> tuple[float, float, float]:
        s = min(max(s, 0.0), self.total_length)
        return (float(np.interp(s, self.s, self.x)), float(np.interp(s, self.s, self.y)),
                wrap_angle(float(np.interp(s, self.s, self.psi))))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "x", "y", "psi", "mu", "wind_region"])
            for i in range(len(self.s)):
                env = environment_at(self, self.s[i])
                region = self.region_at(self.s[i])
                w.writerow([f"{self.s[i]:.3f}", f"{self.x[i]:.4f}", f"{self.y[i]:.4f}",
                            f"{wrap_angle(self.psi[i]):.6f}", env.mu,
                            int(region is not None and region.wind)])


class _Builder:
    """Accumulates densely sampled centerline pieces with tangent continuity."""

    def __init__(self):
        self.pts = [np.array([[0.0, 0.0]])]
        self.heading = 0.0
        self.marks = []  # (label, index range into the concatenated samples)

    @property
    def end(self):
        return self.pts[-1][-1]

    def _append(self, local_xy):
        c, s = math.cos(self.heading), math.sin(self.heading)
        rot = np.array([[c, -s], [s, c]])
        start = self.end.copy()
        pts = local_xy[1:] @ rot.T + start
        first = sum(len(p) for p in self.pts) - 1
        self.pts.append(pts)
        return first, first + len(pts)

    def straight(self, length):
        n = max(2, int(math.ceil(length / 0.01)) + 1)
        xs = np.linspace(0.0, length, n)
        return self._append(np.column_stack([xs, np.zeros(n)]))

    def arc(self, radius, angle):
        """Circular arc; positive ``angle`` turns left."""
        n = max(2, int(math.ceil(abs(angle) * radius / 0.01)) + 1)
        th = np.linspace(0.0, abs(angle), n)
        sign = 1.0 if angle > 0 else -1.0
        local = np.column_stack([radius * np.sin(th), sign * radius * (1 - np.cos(th))])
        span = self._append(local)
        self.heading += angle
        return span

    def lateral(self, length, fn):
        """Path ``y = fn(x)`` in the current frame with zero slope at both ends."""
        n = int(math.ceil(length / 0.005)) + 1
        xs = np.linspace(0.0, length, n)
        return self._append(np.column_stack([xs, fn(xs)]))

    def mark(self, label, span, mu=1.0, wind=False):
        self.marks.append((label, span, mu, wind))


def _double_lane_change(x):
    offset, up, dwell, down = 3.5, 13.5, 11.0, 12.5
    y = np.zeros_like(x)
    a = x < up
    y[a] = offset * (1 - np.cos(math.pi * x[a] / up)) / 2
    b = (x >= up) & (x < up + dwell)
    y[b] = offset
    c = x >= up + dwell
    y[c] = offset * (1 + np.cos(math.pi * (x[c] - up - dwell) / down)) / 2
    return y


def _slalom(x, gates=5, spacing=15.0, amplitude=2.0):
    # sin^2 envelope over one gate spacing at each end keeps curvature continuous
    length = gates * spacing
    edge = np.clip(np.minimum(x, length - x) / spacing, 0.0, 1.0)
    return amplitude * np.sin(math.pi * x / spacing) * np.sin(0.5 * math.pi * edge) ** 2


def build_track(target_length: float = 438.0, spacing: float = TRACK_SPACING) -> TrackModel:
    """Reference centerline: corners, lane change, wind straights, U-turn, slalom."""
    b = _Builder()
    b.straight(30.0)
    b.mark("A", b.arc(15.0, math.radians(90)))
    b.straight(20.0)
    b.mark("B", b.arc(8.0, math.radians(-120)), mu=0.7)
    b.straight(15.0)
    b.mark("C", b.lateral(37.0, _double_lane_change))
    b.straight(15.0)
    b.mark("D", b.arc(12.0, math.radians(90)), mu=0.5)
    b.mark("E", b.straight(40.0), wind=True)
    b.mark("F", b.straight(40.0), wind=True)
    b.mark("G", b.arc(10.0, math.radians(-180)), mu=0.33)
    b.straight(15.0)
    b.mark("H", b.lateral(75.0, _slalom))

    pts = np.vstack(b.pts)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s_fine = np.concatenate([[0.0], np.cumsum(seg)])
    closing = target_length - s_fine[-1]
    if closing < 5.0:
        raise ValueError(f"track pieces already span {s_fine[-1]:.1f} m")
    b.straight(closing)
    pts = np.vstack(b.pts)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    keep = np.concatenate([[True], seg > 1e-12])
    pts = pts[keep]
    s_fine = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    idx_map = np.cumsum(keep) - 1

    n = int(math.ceil(s_fine[-1] / spacing)) + 1
    s = np.linspace(0.0, s_fine[-1], n)
    x = np.interp(s, s_fine, pts[:, 0])
    y = np.interp(s, s_fine, pts[:, 1])
    d = np.gradient(pts, s_fine, axis=0)
    psi_fine = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    psi = np.interp(s, s_fine, psi_fine)
    regions = [Region(label, float(s_fine[idx_map[i0]]), float(s_fine[idx_map[i1]]), mu, wind)
               for label, (i0, i1), mu, wind in b.marks]
    return TrackModel(s, x, y, psi, regions)


def _hat(f: float) -> float:
    if f < 0.3:
        return f / 0.3
    if f <= 0.7:
        return 1.0
    return max(0.0, (1.0 - f) / 0.3)


def environment_at(track: TrackModel, s: float, t: float = 0.0) -> EnvironmentSample:
    """Road adhesion and lateral wind speed at arclength ``s`` (time-invariant)."""
    region = track.region_at(s)
    if region is None:
        return EnvironmentSample(1.0, 0.0)
    wind = 0.0
    if region.wind:
        wind = WIND_PEAK * _hat((s - region.s0) / (region.s1 - region.s0))
    return EnvironmentSample(region.mu, wind)


# --------------------------------------------------------------------------
# closest-point search

@kernel
def project_k(xs, ys, ss, px, py, lo, hi):
    """Closest point on segments ``lo..hi-1``.

    Returns ``(s, signed_offset, distance)``; offset is positive to the left
    of the local tangent.  Ties keep the smaller arclength.
    """
    best_d2 = 1e300
    best_s = ss[lo]
    best_off = 0.0
    for j in range(lo, hi):
        ax = xs[j]
        ay = ys[j]
        bx = xs[j + 1] - ax
        by = ys[j + 1] - ay
        l2 = bx * bx + by * by
        if l2 <= 0.0:
            continue
        t = ((px - ax) * bx + (py - ay) * by) / l2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = ax + t * bx
        qy = ay + t * by
        d2 = (px - qx) ** 2 + (py - qy) ** 2
        if d2 < best_d2 - 1e-15:
            best_d2 = d2
            best_s = ss[j] + t * (ss[j + 1] - ss[j])
            best_off = (bx * (py - ay) - by * (px - ax)) / math.sqrt(l2)
    return best_s, best_off, math.sqrt(best_d2)


class ClosestPointTracker:
    """Warm-started closest point on the centerline within a +-window (m)."""

    def __init__(self, track: TrackModel, window: float = 10.0, s0: float | None = None):
        self.track = track
        self.window = window
        self.s = s0

    def query(self, x: float, y: float) -> tuple[float, float]:
        """Arclength and signed lateral offset (left positive) of point ``(x, y)``."""
        tr = self.track
        n = len(tr.s)
        if self.s is None:
            lo, hi = 0, n - 1
        else:
            lo = max(0, int(np.searchsorted(tr.s, self.s - self.window)) - 1)
            hi = min(n - 1, int(np.searchsorted(tr.s, self.s + self.window)) + 1)
        s, off, _ = project_k(tr.x, tr.y, tr.s, float(x), float(y), lo, hi)
        self.s = s
        return s, off


def closest_point(track: TrackModel, pose, previous: float | None = None,
                  window: float = 10.0) -> float:
    return ClosestPointTracker(track, window, previous).query(pose[0], pose[1])[0]


def lateral_offset(track: TrackModel, x: float, y: float) -> tuple[float, float]:
    """Global (unwindowed) arclength and signed offset of a point."""
    s, off, _ = project_k(track.x, track.y, track.s, float(x), float(y), 0, len(track.s) - 1)
    return s, off


# --------------------------------------------------------------------------
# sensors

@dataclass(frozen=True)
class NoiseSetConfig:
    set_id: str
    use_ekf: bool = True
    gaussian: bool = True
    gain_v: float = 1.0
    bias_delta: float = 0.0
    imu_tilt_deg: float = 0.0
    stiffness_overestimate: bool = False


_GAIN = 1.05
_BIAS = math.radians(0.5)
NOISE_SETS = {
    "i": NoiseSetConfig("i", use_ekf=False, gaussian=False),
    "ii": NoiseSetConfig("ii"),
    "iii": NoiseSetConfig("iii", gain_v=_GAIN, bias_delta=_BIAS, imu_tilt_deg=3.0),
    "iv": NoiseSetConfig("iv", gain_v=_GAIN, bias_delta=_BIAS, imu_tilt_deg=3.0,
                         stiffness_overestimate=True),
    "v": NoiseSetConfig("v", gain_v=_GAIN, bias_delta=_BIAS, imu_tilt_deg=6.0),
    "vi": NoiseSetConfig("vi", gain_v=_GAIN, bias_delta=_BIAS, imu_tilt_deg=6.0,
                         stiffness_overestimate=True),
}


def noise_set(set_id: str) -> NoiseSetConfig:
    try:
        return NOISE_SETS[set_id]
    except KeyError:
        raise ValueError(f"unknown noise set {set_id!r}; expected one of {list(NOISE_SETS)}") from None


class SensorRig:
    """IMU, speed encoder and steer encoder sampled at 100 Hz."""

    period = 0.010

    def __init__(self, config: NoiseSetConfig, rng: np.random.Generator,
                 std: np.ndarray = MEAS_STD):
        self.config = config
        self.rng = rng
        self.std = np.asarray(std, dtype=float)


def clean_measurement(truth: np.ndarray) -> np.ndarray:
    return np.array([truth[PLANT_AY], truth[YAW_RATE], truth[VX], truth[DELTA]])


def sense(truth: np.ndarray, rig: SensorRig, p: VehicleParams | None = None) -> np.ndarray:
    """Measurement ``[ay, yaw_rate, Vx, delta]`` of the plant truth through ``rig``."""
    z = clean_measurement(truth)
    cfg = rig.config
    if not cfg.use_ekf:
        return z
    if cfg.imu_tilt_deg:
        th = math.radians(cfg.imu_tilt_deg)
        z[0] = z[0] * math.cos(th) - TILT_GRAVITY * math.sin(th)
        z[1] = z[1] * math.cos(th)
    z[2] *= cfg.gain_v
    z[3] += cfg.bias_delta
    if cfg.gaussian:
        z += rig.std * rig.rng.standard_normal(NZ)
    return z


def estimator_params_for(cfg: NoiseSetConfig | str, p: VehicleParams = VehicleParams()) -> VehicleParams:
    if isinstance(cfg, str):
        cfg = noise_set(cfg)
    return p.scaled_stiffness(1.2) if cfg.stiffness_overestimate else p
