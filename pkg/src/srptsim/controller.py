"""Shooting NMPC that tracks successive reference poses.

Decision variables are ``N`` piecewise-constant ``(steer_rate, accel)``
pairs; the prediction integrates the estimator model at 1 ms substeps.
Bounds are enforced by projection, so every iterate is feasible.  The
default gradient is the exact discrete adjoint of the 1 ms rollout; central
finite differences of the same cost remain available (``gradient="fd"``)
and serve as the check on the adjoint.

Tracking terms are measured against the polyline through the horizon
reference poses: position error is the distance to that polyline and the
heading error is taken against the heading interpolated at the foot point.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ._jit import kernel
from .vehicle import (ACCEL_MAX, ACCEL_MIN, HEADING, NX, STEER_RATE_MAX, VX, X, Y,
                      ControlCommand, VehicleParams, derivative_jacobian_k, euler_step_k,
                      wrap_angle)

# weight array layout
W_POS, W_HEAD, W_SPEED, W_STEER, W_ACCEL, W_TERMINAL = range(6)

FALLBACK = ControlCommand(0.0, ACCEL_MIN)


@dataclass
class NmpcConfig:
    horizon: float = 1.0
    steps: int = 20
    v_ref: float = 22.0 / 3.6
    w_pos: float = 1.0
    w_head: float = 2.0
    w_speed: float = 0.5
    w_steer: float = 0.1
    w_accel: float = 0.05
    terminal_factor: float = 10.0
    max_iter: int = 30
    tol: float = 1e-5
    substep: float = 0.001
    hold_distance: float = 1.3
    lat_accel: float = 2.0
    gradient: str = "adjoint"
    u_min: tuple = (-STEER_RATE_MAX, ACCEL_MIN)
    u_max: tuple = (STEER_RATE_MAX, ACCEL_MAX)

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("need at least two horizon steps")
        if self.node_dt < self.substep - 1e-12:
            raise ValueError("horizon node spacing is shorter than the integration step")
        if min(self.w_pos, self.w_head, self.w_speed, self.w_steer, self.w_accel) < 0:
            raise ValueError("weights must be non-negative")
        if self.gradient not in ("adjoint", "fd"):
            raise ValueError(f"unknown gradient method {self.gradient!r}")

    @property
    def node_dt(self) -> float:
        return self.horizon / self.steps

    @property
    def substeps(self) -> int:
        return int(round(self.node_dt / self.substep))

    def weights(self) -> np.ndarray:
        return np.array([self.w_pos, self.w_head, self.w_speed, self.w_steer, self.w_accel,
                         self.terminal_factor])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.u_min, dtype=float), np.array(self.u_max, dtype=float)


class ReferenceBuffer:
    """Most recent reference-pose messages, ordered by creation time."""

    def __init__(self, capacity: int = 64, max_age: float = 3.0):
        self.items: deque = deque(maxlen=capacity)
        self.max_age = max_age

    def __len__(self):
        return len(self.items)

    def __bool__(self):
        return bool(self.items)

    def add(self, msg) -> None:
        if self.items and msg.created_at <= self.items[-1].created_at:
            raise ValueError(f"reference created at {msg.created_at} is not newer than "
                             f"{self.items[-1].created_at}")
        self.items.append(msg)

    def evict(self, now: float) -> None:
        while self.items and now - self.items[0].created_at > self.max_age:
            self.items.popleft()

    @property
    def newest(self):
        return self.items[-1]


@dataclass
class HorizonReference:
    poses: np.ndarray  # (N+1, 3), heading continuous along the horizon
    speed: np.ndarray  # (N+1,)
    knot_times: np.ndarray


@dataclass
class NmpcSolution:
    commands: np.ndarray  # (N, 2)
    trajectory: np.ndarray  # (N+1, 9)
    cost: float
    iterations: int = 0
    cost_history: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def first(self) -> ControlCommand:
        return ControlCommand(float(self.commands[0, 0]), float(self.commands[0, 1]))


def speed_target(distance: float, turn: float, cfg: NmpcConfig) -> float:
    """Speed for a reference ``distance`` ahead needing a heading change ``turn``.

    Cruise at ``v_ref``, slow down when the newest reference sits within the
    hold distance, and keep the lateral acceleration implied by the mean
    curvature ``turn / distance`` below ``lat_accel``.
    """
    v = cfg.v_ref * min(1.0, distance / cfg.hold_distance)
    kappa = abs(turn) / max(distance, cfg.hold_distance)
    if kappa > 0.0 and cfg.lat_accel > 0.0:
        v = min(v, math.sqrt(cfg.lat_accel / kappa))
    return v


def build_horizon_reference(buf: ReferenceBuffer, xhat, cfg: NmpcConfig) -> HorizonReference:
    """Knot chain from the current pose through the buffered references.

    The newest reference is placed at the end of the horizon and each older
    message ``dt`` seconds before it, according to creation timestamps;
    messages that would fall at or before the current time are skipped, as
    are knots that do not advance along the heading of the previous knot
    (older references can lag behind the vehicle after it speeds up).
    """
    if not buf:
        raise ValueError("empty reference buffer")
    newest = buf.newest
    times = [0.0]
    poses = [(float(xhat[X]), float(xhat[Y]), float(xhat[HEADING]))]
    for msg in buf.items:
        h = cfg.horizon - (newest.created_at - msg.created_at)
        if h <= 1e-9:
            continue
        if msg is newest:
            while len(poses) > 1 and not _advances(poses[-1], msg.pose):
                poses.pop()
                times.pop()
        elif not _advances(poses[-1], msg.pose):
            continue
        times.append(h)
        poses.append(tuple(msg.pose))
    knots = np.array(poses, dtype=float)
    for i in range(1, len(knots)):
        knots[i, 2] = knots[i - 1, 2] + wrap_angle(knots[i, 2] - knots[i - 1, 2])
    times = np.array(times)
    t_nodes = np.arange(cfg.steps + 1) * cfg.node_dt
    ref = np.column_stack([np.interp(t_nodes, times, knots[:, j]) for j in range(3)])
    dist = math.hypot(knots[-1, 0] - knots[0, 0], knots[-1, 1] - knots[0, 1])
    turn = knots[-1, 2] - knots[0, 2]
    return HorizonReference(ref, np.full(cfg.steps + 1, speed_target(dist, turn, cfg)), times)


def _advances(a, b) -> bool:
    return (b[0] - a[0]) * math.cos(a[2]) + (b[1] - a[1]) * math.sin(a[2]) > 0.0


# --------------------------------------------------------------------------
# kernels

@kernel
def rollout_k(x0, U, node_dt, substeps, p, traj):
    """Fill ``traj`` (N*substeps+1, 9) with the unwrapped Euler rollout."""
    dt = node_dt / substeps
    work = np.empty(NX)
    traj[0, :] = x0
    i = 0
    for k in range(U.shape[0]):
        for _ in range(substeps):
            euler_step_k(traj[i], U[k, 0], U[k, 1], dt, p, work, traj[i + 1])
            i += 1


@kernel
def path_error_k(ref, px, py, psi):
    """Distance to the reference polyline and heading error at the foot point.

    The first and last segments extend as rays.  Returns
    ``(d2, qx, qy, e_psi, dpsiref_dx, dpsiref_dy)``.
    """
    m = ref.shape[0]
    best = 1e300
    qx = ref[0, 0]
    qy = ref[0, 1]
    href = ref[0, 2]
    gx = 0.0
    gy = 0.0
    for j in range(m - 1):
        ax = ref[j, 0]
        ay = ref[j, 1]
        bx = ref[j + 1, 0] - ax
        by = ref[j + 1, 1] - ay
        l2 = bx * bx + by * by
        if l2 < 1e-12:
            t = 0.0
        else:
            t = ((px - ax) * bx + (py - ay) * by) / l2
            if t < 0.0 and j > 0:
                t = 0.0
            if t > 1.0 and j < m - 2:
                t = 1.0
        cx = ax + t * bx
        cy = ay + t * by
        d2 = (px - cx) ** 2 + (py - cy) ** 2
        if d2 < best:
            best = d2
            qx = cx
            qy = cy
            dh = ref[j + 1, 2] - ref[j, 2]
            if 0.0 < t < 1.0:
                href = ref[j, 2] + t * dh
                gx = dh * bx / l2
                gy = dh * by / l2
            else:
                href = ref[j, 2] + min(max(t, 0.0), 1.0) * dh
                gx = 0.0
                gy = 0.0
    if m == 1:
        best = (px - qx) ** 2 + (py - qy) ** 2
    e = wrap_angle(psi - href)
    return best, qx, qy, e, gx, gy


@kernel
def node_cost_k(x, ref, vt, weight, wts):
    d2, qx, qy, e, gx, gy = path_error_k(ref, x[X], x[Y], x[HEADING])
    dv = x[VX] - vt
    return weight * (wts[W_POS] * d2 + wts[W_HEAD] * e * e + wts[W_SPEED] * dv * dv)


@kernel
def node_cost_grad_k(x, ref, vt, weight, wts, g):
    d2, qx, qy, e, gx, gy = path_error_k(ref, x[X], x[Y], x[HEADING])
    dv = x[VX] - vt
    g[X] += weight * (2.0 * wts[W_POS] * (x[X] - qx) - 2.0 * wts[W_HEAD] * e * gx)
    g[Y] += weight * (2.0 * wts[W_POS] * (x[Y] - qy) - 2.0 * wts[W_HEAD] * e * gy)
    g[HEADING] += weight * 2.0 * wts[W_HEAD] * e
    g[VX] += weight * 2.0 * wts[W_SPEED] * dv


@kernel
def total_cost_k(x0, U, ref, vt, wts, p, node_dt, substeps, traj):
    rollout_k(x0, U, node_dt, substeps, p, traj)
    n = U.shape[0]
    j = 0.0
    for k in range(1, n + 1):
        w = wts[W_TERMINAL] if k == n else 1.0
        j += node_cost_k(traj[k * substeps], ref, vt[k], w, wts)
    for k in range(n):
        j += wts[W_STEER] * U[k, 0] ** 2 + wts[W_ACCEL] * U[k, 1] ** 2
    return j


@kernel
def adjoint_gradient_k(traj, U, ref, vt, wts, p, node_dt, substeps, grad):
    """Exact gradient of :func:`total_cost_k` given the rollout in ``traj``."""
    n = U.shape[0]
    dt = node_dt / substeps
    lam = np.zeros(NX)
    nlam = np.empty(NX)
    A = np.empty((NX, NX))
    B = np.empty((NX, 2))
    node_cost_grad_k(traj[n * substeps], ref, vt[n], wts[W_TERMINAL], wts, lam)
    for k in range(n):
        grad[k, 0] = 2.0 * wts[W_STEER] * U[k, 0]
        grad[k, 1] = 2.0 * wts[W_ACCEL] * U[k, 1]
    for i in range(n * substeps - 1, -1, -1):
        k = i // substeps
        derivative_jacobian_k(traj[i], U[k, 0], U[k, 1], p, A, B)
        g0 = 0.0
        g1 = 0.0
        for r in range(NX):
            g0 += B[r, 0] * lam[r]
            g1 += B[r, 1] * lam[r]
        grad[k, 0] += dt * g0
        grad[k, 1] += dt * g1
        for c in range(NX):
            acc = 0.0
            for r in range(NX):
                acc += A[r, c] * lam[r]
            nlam[c] = lam[c] + dt * acc
        lam[:] = nlam
        if i % substeps == 0 and i > 0:
            node_cost_grad_k(traj[i], ref, vt[k], 1.0, wts, lam)


@kernel
def fd_gradient_k(x0, U, ref, vt, wts, p, node_dt, substeps, eps, traj, grad):
    Up = U.copy()
    for k in range(U.shape[0]):
        for c in range(2):
            Up[k, c] = U[k, c] + eps
            jp = total_cost_k(x0, Up, ref, vt, wts, p, node_dt, substeps, traj)
            Up[k, c] = U[k, c] - eps
            jm = total_cost_k(x0, Up, ref, vt, wts, p, node_dt, substeps, traj)
            Up[k, c] = U[k, c]
            grad[k, c] = (jp - jm) / (2.0 * eps)


@kernel
def _gradient(x0, U, ref, vt, wts, p, node_dt, substeps, use_fd, traj, scratch, grad):
    if use_fd:
        fd_gradient_k(x0, U, ref, vt, wts, p, node_dt, substeps, 1e-6, scratch, grad)
    else:
        adjoint_gradient_k(traj, U, ref, vt, wts, p, node_dt, substeps, grad)


@kernel
def solve_k(x0, U, ref, vt, wts, p, node_dt, substeps, umin, umax, max_iter, tol, use_fd,
            traj, history):
    """Projected gradient with Barzilai-Borwein steps and Armijo backtracking.

    Works in variables scaled by the bound half-widths; ``U`` is overwritten
    with the best iterate.  Returns ``(cost, accepted_iterations)``; costs of
    accepted iterates are written to ``history``.
    """
    n = U.shape[0]
    scale = np.empty(2)
    for c in range(2):
        scale[c] = 0.5 * (umax[c] - umin[c])
        for k in range(n):
            U[k, c] = min(max(U[k, c], umin[c]), umax[c])
    trial_traj = np.empty_like(traj)
    scratch = np.empty_like(traj)
    g = np.empty((n, 2))
    g_new = np.empty((n, 2))
    trial = np.empty((n, 2))
    J = total_cost_k(x0, U, ref, vt, wts, p, node_dt, substeps, traj)
    history[0] = J
    if not math.isfinite(J):
        return J, 0
    _gradient(x0, U, ref, vt, wts, p, node_dt, substeps, use_fd, traj, scratch, g)
    gmax = 0.0
    for k in range(n):
        for c in range(2):
            gmax = max(gmax, abs(g[k, c] * scale[c]))
    if gmax == 0.0:
        return J, 0
    alpha = 0.1 / gmax
    it = 0
    while it < max_iter:
        accepted = False
        for _ in range(20):
            slope = 0.0
            step = 0.0
            for k in range(n):
                for c in range(2):
                    v = U[k, c] / scale[c] - alpha * g[k, c] * scale[c]
                    v = min(max(v * scale[c], umin[c]), umax[c])
                    trial[k, c] = v
                    dv = (v - U[k, c]) / scale[c]
                    slope += g[k, c] * scale[c] * dv
                    step = max(step, abs(dv))
            if step < tol:
                break
            Jt = total_cost_k(x0, trial, ref, vt, wts, p, node_dt, substeps, trial_traj)
            if math.isfinite(Jt) and Jt <= J + 1e-4 * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        it += 1
        traj[:, :] = trial_traj
        _gradient(x0, trial, ref, vt, wts, p, node_dt, substeps, use_fd, traj, scratch, g_new)
        ss = 0.0
        sy = 0.0
        for k in range(n):
            for c in range(2):
                s = (trial[k, c] - U[k, c]) / scale[c]
                y = (g_new[k, c] - g[k, c]) * scale[c]
                ss += s * s
                sy += s * y
        U[:, :] = trial
        g[:, :] = g_new
        J = Jt
        history[it] = J
        if sy > 1e-300:
            alpha = min(max(ss / sy, 1e-8), 1e4)
        else:
            alpha = min(alpha * 4.0, 1e4)
    return J, it


# --------------------------------------------------------------------------
# public API

def rollout(x0, commands, cfg: NmpcConfig = NmpcConfig(), p: VehicleParams = VehicleParams(),
            full: bool = False) -> np.ndarray:
    """Node states (or every substep when ``full``), headings wrapped."""
    U = np.ascontiguousarray(commands, dtype=float).reshape(-1, 2)
    n_sub = cfg.substeps
    traj = np.empty((U.shape[0] * n_sub + 1, NX))
    rollout_k(np.asarray(x0, dtype=float), U, cfg.node_dt, n_sub, p.array(), traj)
    out = traj if full else traj[::n_sub].copy()
    out[:, HEADING] = np.angle(np.exp(1j * out[:, HEADING]))
    return out


def trajectory_cost(x0, commands, ref: HorizonReference, cfg: NmpcConfig = NmpcConfig(),
                    p: VehicleParams = VehicleParams()) -> float:
    U = np.ascontiguousarray(commands, dtype=float).reshape(-1, 2)
    traj = np.empty((U.shape[0] * cfg.substeps + 1, NX))
    return total_cost_k(np.asarray(x0, dtype=float), U, ref.poses, ref.speed, cfg.weights(),
                        p.array(), cfg.node_dt, cfg.substeps, traj)


def cost_gradient(x0, commands, ref: HorizonReference, cfg: NmpcConfig = NmpcConfig(),
                  p: VehicleParams = VehicleParams(), method: str = "adjoint") -> np.ndarray:
    U = np.ascontiguousarray(commands, dtype=float).reshape(-1, 2)
    x0 = np.asarray(x0, dtype=float)
    traj = np.empty((U.shape[0] * cfg.substeps + 1, NX))
    scratch = np.empty_like(traj)
    grad = np.empty_like(U)
    total_cost_k(x0, U, ref.poses, ref.speed, cfg.weights(), p.array(), cfg.node_dt,
                 cfg.substeps, traj)
    _gradient(x0, U, ref.poses, ref.speed, cfg.weights(), p.array(), cfg.node_dt, cfg.substeps,
              method == "fd", traj, scratch, grad)
    return grad


def solve(xhat, ref: HorizonReference, cfg: NmpcConfig = NmpcConfig(),
          p: VehicleParams = VehicleParams(), warm_start=None) -> NmpcSolution:
    x0 = np.asarray(xhat, dtype=float)
    if warm_start is None:
        U = np.zeros((cfg.steps, 2))
    else:
        U = np.array(warm_start, dtype=float).reshape(cfg.steps, 2)
    umin, umax = cfg.bounds()
    traj = np.empty((cfg.steps * cfg.substeps + 1, NX))
    history = np.full(cfg.max_iter + 1, np.nan)
    J, iters = solve_k(x0, U, ref.poses, ref.speed, cfg.weights(), p.array(), cfg.node_dt,
                       cfg.substeps, umin, umax, cfg.max_iter, cfg.tol, cfg.gradient == "fd",
                       traj, history)
    nodes = traj[::cfg.substeps].copy()
    nodes[:, HEADING] = np.angle(np.exp(1j * nodes[:, HEADING]))
    return NmpcSolution(U, nodes, float(J), int(iters), history[:iters + 1].copy())


def shift_commands(U: np.ndarray, elapsed: float, node_dt: float) -> np.ndarray:
    """Warm start advanced by ``elapsed`` seconds (linear blend between nodes)."""
    f = elapsed / node_dt
    whole = int(math.floor(f))
    frac = f - whole
    n = len(U)
    idx = np.minimum(np.arange(n) + whole, n - 1)
    nxt = np.minimum(idx + 1, n - 1)
    return (1.0 - frac) * U[idx] + frac * U[nxt]


class Nmpc:
    """Vehicle-side controller: reference buffer, warm start, degraded hold."""

    def __init__(self, cfg: NmpcConfig = NmpcConfig(), p: VehicleParams = VehicleParams(),
                 buffer: ReferenceBuffer | None = None):
        self.cfg = cfg
        self.p = p
        self.buffer = buffer if buffer is not None else ReferenceBuffer()
        self.command = ControlCommand(0.0, 0.0)
        self.degraded = True
        self.solution: NmpcSolution | None = None
        self._solved_at: float | None = None
        self.telemetry: list[tuple[float, int, float]] = []

    def step(self, now: float, xhat) -> ControlCommand:
        self.buffer.evict(now)
        if not self.buffer:
            self.degraded = True
            return self.command
        self.degraded = False
        ref = build_horizon_reference(self.buffer, xhat, self.cfg)
        warm = None
        if self.solution is not None:
            warm = shift_commands(self.solution.commands, now - self._solved_at, self.cfg.node_dt)
        sol = solve(xhat, ref, self.cfg, self.p, warm)
        if not math.isfinite(sol.cost):
            self.solution = None
            self.command = FALLBACK
        else:
            self.solution = sol
            self._solved_at = now
            self.command = sol.first.clipped()
        self.telemetry.append((now, sol.iterations, sol.cost))
        return self.command
