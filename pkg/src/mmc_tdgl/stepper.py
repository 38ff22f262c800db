"""Time-step policies: constant, and energy-slope adaptive.

The adaptive rule picks

    dt = max(dt_min, lam(t) * dt_max / sqrt(1 + mu * U'(t)**2))

so steps shrink while the free energy is dropping fast and grow to
``lam(t) * dt_max`` once it levels off.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field

# (upper time bound, factor); the last bound must be inf
DEFAULT_LAMBDA_TABLE: tuple[tuple[float, float], ...] = (
    (100.0, 1.0),
    (200.0, 1.5),
    (300.0, 2.0),
    (400.0, 3.0),
    (500.0, 4.0),
    (math.inf, 5.0),
)


class StepMode(enum.Enum):
    CONSTANT = "constant"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class StepControl:
    mode: StepMode = StepMode.CONSTANT
    dt: float = 1e-3
    dt_min: float = 1e-3
    dt_max: float = 0.1
    mu: float = 1000.0
    lambda_table: tuple[tuple[float, float], ...] = DEFAULT_LAMBDA_TABLE
    # average of the last `window` backward-difference slopes
    window: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lambda_table", tuple((float(b), float(f)) for b, f in self.lambda_table))
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ValueError(f"need 0 < dt_min <= dt_max, got {self.dt_min}, {self.dt_max}")
        if self.mu < 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        table = self.lambda_table
        if not table:
            raise ValueError("lambda table is empty")
        bounds = [b for b, _ in table]
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError(f"lambda table bounds must be strictly increasing: {bounds}")
        if not math.isinf(bounds[-1]):
            raise ValueError("last lambda table bound must be inf")
        if any(not f > 0 for _, f in table):
            raise ValueError("lambda factors must be positive")

    @classmethod
    def constant(cls, dt: float) -> StepControl:
        return cls(mode=StepMode.CONSTANT, dt=dt)

    @classmethod
    def adaptive(cls, dt_min: float = 1e-3, dt_max: float = 0.1, mu: float = 1000.0,
                 lambda_table=DEFAULT_LAMBDA_TABLE, window: int = 1) -> StepControl:
        return cls(mode=StepMode.ADAPTIVE, dt_min=dt_min, dt_max=dt_max, mu=mu,
                   lambda_table=tuple(lambda_table), window=window)

    def with_temperature_scaling(self, temp: float) -> StepControl:
        """Rescale mu by 1/T^2, since U' grows linearly with k_B T."""
        return StepControl(self.mode, self.dt, self.dt_min, self.dt_max, self.mu / temp**2,
                           self.lambda_table, self.window)


def lambda_at(t: float, ctrl: StepControl) -> float:
    """Piecewise-constant factor; intervals are closed on the right."""
    for bound, factor in ctrl.lambda_table:
        if t <= bound:
            return factor
    return ctrl.lambda_table[-1][1]


@dataclass
class EnergyHistory:
    maxlen: int = 16
    entries: deque = field(default_factory=deque)

    def append(self, t: float, energy: float) -> None:
        if self.entries and t <= self.entries[-1][0]:
            raise ValueError(f"times must increase: {t} after {self.entries[-1][0]}")
        self.entries.append((t, energy))
        while len(self.entries) > self.maxlen:
            self.entries.popleft()

    def __len__(self) -> int:
        return len(self.entries)


def estimate_Uprime(h: EnergyHistory, window: int = 1) -> float | None:
    """Backward-difference slope of the energy, averaged over up to ``window``
    most recent intervals. ``None`` when fewer than two entries exist."""
    if len(h.entries) < 2:
        return None
    pts = list(h.entries)
    window = min(window, len(pts) - 1)
    slopes = []
    for (t0, u0), (t1, u1) in zip(pts[-window - 1:-1], pts[-window:]):
        slopes.append((u1 - u0) / (t1 - t0))
    return sum(slopes) / len(slopes)


def next_dt(t: float, uprime: float | None, ctrl: StepControl) -> float:
    if ctrl.mode is StepMode.CONSTANT:
        return ctrl.dt
    if uprime is None:
        return ctrl.dt_min
    frac = lambda_at(t, ctrl) * ctrl.dt_max / math.sqrt(1.0 + ctrl.mu * uprime * uprime)
    return max(ctrl.dt_min, frac)


# relative slack so that accumulated rounding in t does not leave sliver steps
SNAP_SLACK = 1e-9


def snap_to_events(dt: float, t: float, event_times) -> float:
    """Shorten ``dt`` to land on the first event in ``(t, t + dt]``.

    Events at or before ``t`` are treated as already emitted. An event within
    ``SNAP_SLACK * dt`` past ``t + dt`` is also landed on exactly.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    for ev in event_times:
        if ev <= t:
            continue
        if ev - t <= dt * (1 + SNAP_SLACK):
            return ev - t
        break
    return dt
