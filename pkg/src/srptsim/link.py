"""Network between vehicle and operator, and the fixed-step multirate scheduler."""
from __future__ import annotations

import math
from functools import cached_property
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

TIME_EPS = 1e-9


@dataclass(frozen=True)
class DelayModel:
    """GEV-distributed downlink delay and a constant uplink delay (seconds)."""

    xi: float = 0.29
    mu: float = 0.200
    sigma: float = 0.009
    clamp_max: float = 0.300
    uplink: float = 0.060

    def __post_init__(self):
        if self.xi <= 0 or self.sigma <= 0:
            raise ValueError("GEV shape and scale must be positive")
        if self.lower_bound <= 0:
            raise ValueError(f"GEV lower bound {self.lower_bound} must be positive")
        if self.clamp_max < self.lower_bound:
            raise ValueError("clamp_max lies below the GEV lower bound")

    @property
    def lower_bound(self) -> float:
        return self.mu - self.sigma / self.xi

    def quantile(self, u):
        """Closed-form GEV inverse CDF (before clamping)."""
        u = np.asarray(u, dtype=float)
        return self.mu + self.sigma * ((-np.log(u)) ** (-self.xi) - 1.0) / self.xi

    @property
    def median(self) -> float:
        return float(np.clip(self.quantile(0.5), self.lower_bound, self.clamp_max))


def sample_downlink_delay(rng: np.random.Generator, model: DelayModel = DelayModel(), size=None):
    """Inverse-transform draw(s), clamped to ``[lower_bound, clamp_max]``."""
    u = rng.random(size)
    # u == 0 has probability ~2**-53 but would make log blow up
    u = np.where(u <= 0.0, np.finfo(float).tiny, u)
    x = np.clip(model.quantile(u), model.lower_bound, model.clamp_max)
    return float(x) if size is None else x


@dataclass
class Message:
    payload: Any
    created_at: float
    deliver_at: float


class Channel:
    """Delayed one-way link that only ever hands out newer messages.

    Messages overtaken by a later-created one are dropped when they arrive.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self._pending: list[Message] = []
        self.last_created = -math.inf
        self.trace: list[tuple[float, float, bool]] = []

    def __len__(self):
        return len(self._pending)

    def send(self, payload, now: float, delay: float) -> None:
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        self._pending.append(Message(payload, now, now + delay))

    def poll(self, now: float) -> list:
        due = [m for m in self._pending if m.deliver_at <= now + TIME_EPS]
        if not due:
            return []
        self._pending = [m for m in self._pending if m.deliver_at > now + TIME_EPS]
        due.sort(key=lambda m: (m.deliver_at, m.created_at))
        out = []
        for m in due:
            dropped = m.created_at <= self.last_created
            self.trace.append((m.created_at, m.deliver_at, dropped))
            if not dropped:
                self.last_created = m.created_at
                out.append(m)
        return out


@dataclass(frozen=True)
class Rate:
    """Firing pattern on the base grid as a repeating cycle of tick gaps."""

    gaps: tuple[int, ...]

    def __post_init__(self):
        if not self.gaps or any(g < 1 for g in self.gaps):
            raise ValueError(f"invalid tick gaps {self.gaps}")

    @cached_property
    def cycle(self) -> int:
        return sum(self.gaps)

    @cached_property
    def offsets(self) -> frozenset:
        return frozenset(int(v) % self.cycle for v in np.cumsum(self.gaps))

    def due(self, tick: int) -> bool:
        return tick % self.cycle in self.offsets

    @property
    def frequency(self) -> float:
        return len(self.gaps) / self.cycle


@dataclass(frozen=True)
class RateSchedule:
    base_dt: float = 0.001
    plant: Rate = Rate((1,))
    sensors: Rate = Rate((10,))
    nmpc: Rate = Rate((20,))
    operator: Rate = Rate((33, 33, 34))


class SimulationError(RuntimeError):
    def __init__(self, t: float, task: str, cause: BaseException):
        super().__init__(f"task {task!r} failed at t={t:.3f}s: {cause!r}")
        self.t = t
        self.task = task
        self.cause = cause


@dataclass
class Task:
    name: str
    rate: Rate
    fn: Callable[[float], None]
    count: int = 0


@dataclass
class Scheduler:
    """Advances a 1 ms clock and fires due tasks in registration order."""

    base_dt: float = 0.001
    tasks: list[Task] = field(default_factory=list)
    tick: int = 0

    def add(self, name: str, rate: Rate, fn: Callable[[float], None]) -> Task:
        task = Task(name, rate, fn)
        self.tasks.append(task)
        return task

    @property
    def now(self) -> float:
        return self.tick * self.base_dt

    def run(self, duration: float, stop: Callable[[], bool] | None = None) -> int:
        """Run for ``duration`` seconds or until ``stop()`` is true; returns ticks taken."""
        n = int(round(duration / self.base_dt))
        done = 0
        for _ in range(n):
            self.tick += 1
            now = self.tick * self.base_dt
            for task in self.tasks:
                if task.rate.due(self.tick):
                    try:
                        task.fn(now)
                    except Exception as exc:
                        raise SimulationError(now, task.name, exc) from exc
                    task.count += 1
            done += 1
            if stop is not None and stop():
                break
        return done


def scheduler_run(duration: float, tasks, base_dt: float = 0.001) -> Scheduler:
    """Convenience wrapper: ``tasks`` is an ordered iterable of ``(name, rate, fn)``."""
    sched = Scheduler(base_dt)
    for name, rate, fn in tasks:
        sched.add(name, rate, fn)
    sched.run(duration)
    return sched
