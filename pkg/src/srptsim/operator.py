"""Operator-side blocks: reference-pose generator and the look-ahead driver baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .estimation import Pose, compose, relative_pose
from .scenario import ClosestPointTracker, TrackModel
from .vehicle import HEADING, STEER_RATE_MAX, VX, X, Y, VehicleParams

K1_GRID = np.round(np.arange(0.17, 0.30 + 1e-9, 0.002), 3)


@dataclass(frozen=True)
class LookaheadConfig:
    horizon: float = 1.0
    l_front: float = VehicleParams().lF

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("look-ahead horizon must be positive")


@dataclass(frozen=True)
class DriverConfig:
    k1: float = 0.213
    k2: float = 0.90
    speed_gain: float = 1.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("driver gains must be positive")


@dataclass(frozen=True)
class ReferencePoseMessage:
    pose: Pose
    created_at: float
    origin_time: float = math.nan  # timestamp of the vehicle state it was built from


def lookahead_distance(vx: float, tau: float, cfg: LookaheadConfig = LookaheadConfig()) -> float:
    if vx < 0:
        raise ValueError(f"negative speed {vx}")
    return vx * tau + max(vx * cfg.horizon, cfg.l_front)


def make_reference_pose(xhat_delayed, actual_delayed, track: TrackModel, tau: float,
                        cfg: LookaheadConfig = LookaheadConfig(),
                        tracker: ClosestPointTracker | None = None) -> Pose:
    """Look-ahead centerline pose re-expressed relative to the delayed estimate.

    The correction from the delayed *actual* pose to the centerline target is
    applied in the frame of the delayed *estimated* pose, so any estimation
    drift carries straight into the reference.
    """
    if tracker is None:
        tracker = ClosestPointTracker(track)
    actual = Pose(float(actual_delayed[X]), float(actual_delayed[Y]),
                  float(actual_delayed[HEADING]))
    estimate = Pose(float(xhat_delayed[X]), float(xhat_delayed[Y]),
                    float(xhat_delayed[HEADING]))
    s_c, _ = tracker.query(actual.x, actual.y)
    target = track.pose_at(s_c + lookahead_distance(max(float(actual_delayed[VX]), 0.0), tau, cfg))
    return compose(estimate, relative_pose(actual, target))


class ReferenceGenerator:
    """30 Hz operator block turning delayed vehicle states into reference poses."""

    def __init__(self, track: TrackModel, cfg: LookaheadConfig = LookaheadConfig(),
                 uplink: float = 0.0, tau_prior: float = 0.0):
        self.track = track
        self.cfg = cfg
        self.uplink = uplink
        self.tau_prior = tau_prior
        self.tracker = ClosestPointTracker(track)

    def __call__(self, now: float, origin_time: float, xhat_delayed, actual_delayed
                 ) -> ReferencePoseMessage:
        if math.isfinite(origin_time):
            tau = now - origin_time + self.uplink
        else:
            tau = self.tau_prior
        pose = make_reference_pose(xhat_delayed, actual_delayed, self.track, tau, self.cfg,
                                   self.tracker)
        return ReferencePoseMessage(pose, now, origin_time)


def lookahead_driver_steer(pose, vx: float, track: TrackModel,
                           cfg: DriverConfig = DriverConfig(),
                           tracker: ClosestPointTracker | None = None) -> float:
    """Steer angle from the lateral offset of a point ``k2*Vx`` ahead."""
    x, y, psi = pose
    ahead = cfg.k2 * vx
    px, py = x + ahead * math.cos(psi), y + ahead * math.sin(psi)
    if tracker is None:
        tracker = ClosestPointTracker(track)
    _, dy = tracker.query(px, py)
    return -cfg.k1 * dy


def steer_actuator_rate(target: float, delta: float, dt: float) -> float:
    """Steer rate that moves ``delta`` to ``target`` in one step, rate-limited."""
    return min(max((target - delta) / dt, -STEER_RATE_MAX), STEER_RATE_MAX)


def tune_k1(score: Callable[[float], tuple[float, float]], grid=K1_GRID):
    """Grid search for the driver gain.

    ``score(k1)`` returns ``(rms, max)`` cross-track error, or raises/returns
    non-finite values for a diverged run.  Candidates are ranked
    lexicographically.  Returns ``(best_k1, table)`` with one row per candidate.
    """
    table = []
    for k1 in grid:
        rms, peak = score(float(k1))
        table.append((float(k1), float(rms), float(peak)))
    finite = [row for row in table if math.isfinite(row[1]) and math.isfinite(row[2])]
    if not finite:
        raise RuntimeError("every k1 candidate diverged")
    best = min(finite, key=lambda row: (row[1], row[2]))
    return best[0], table
