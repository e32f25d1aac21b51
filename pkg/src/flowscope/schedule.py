"""Interpolation schedule, oracle coefficients and sampling time grids."""

import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch

from flowscope.errors import FormatError, InvalidInputError
from flowscope.utils import RichLogger, format_float

logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))

TimeLike = float | torch.Tensor


class ScheduleKind(str, Enum):
    """Supported interpolation schedules."""

    RECTIFIED = "rectified"


@dataclass(frozen=True)
class Schedule:
    """Interpolation path x_t = alpha_t * x1 + sigma_t * x0.

    Args:
        kind: Which (alpha_t, sigma_t) pair to use.
        eps_clamp: Margin below t=1 where the oracle coefficients are evaluated
            instead of the singular endpoint.
    """

    kind: ScheduleKind = ScheduleKind.RECTIFIED
    eps_clamp: float = 1e-3

    def __post_init__(self) -> None:
        """Validate the schedule parameters."""
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not (0.0 < self.eps_clamp < 0.1):
            raise InvalidInputError(f"eps_clamp must lie in (0, 0.1), got {self.eps_clamp}.")

    @property
    def t_max(self) -> float:
        """Largest time at which coefficients are evaluated."""
        return 1.0 - self.eps_clamp

    def clamp(self, t: TimeLike) -> TimeLike:
        """Clamp times above ``1 - eps_clamp``."""
        if isinstance(t, torch.Tensor):
            return torch.clamp(t, max=self.t_max)
        return min(float(t), self.t_max)

    def alpha(self, t: TimeLike) -> TimeLike:
        """Data scale alpha_t."""
        return t

    def sigma(self, t: TimeLike) -> TimeLike:
        """Noise scale sigma_t."""
        return 1.0 - t

    def alpha_dot(self, t: TimeLike) -> TimeLike:
        """Time derivative of alpha_t."""
        return torch.ones_like(t) if isinstance(t, torch.Tensor) else 1.0

    def sigma_dot(self, t: TimeLike) -> TimeLike:
        """Time derivative of sigma_t."""
        return -torch.ones_like(t) if isinstance(t, torch.Tensor) else -1.0

    def coefficients(self, t: TimeLike) -> tuple[TimeLike, TimeLike]:
        """Oracle coefficients (A_t, B_t) at the clamped time."""
        t = self.clamp(t)
        alpha, sigma = self.alpha(t), self.sigma(t)
        alpha_dot, sigma_dot = self.alpha_dot(t), self.sigma_dot(t)
        return alpha_dot - alpha * sigma_dot / sigma, sigma_dot / sigma


@dataclass(frozen=True)
class ScheduleEval:
    """All scalar schedule quantities at one (clamped) time."""

    t: float
    alpha: float
    sigma: float
    alpha_dot: float
    sigma_dot: float
    coeff_a: float
    coeff_b: float


def check_time(t: float, name: str = "t") -> float:
    """Validate a scalar time in [0, 1]."""
    t = float(t)
    if not math.isfinite(t):
        raise InvalidInputError(f"{name} must be finite, got {t}.")
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"{name} must lie in [0, 1], got {t}.")
    return t


def schedule_eval(schedule: Schedule, t: float) -> ScheduleEval:
    """Evaluate the schedule and the oracle coefficients at ``t``."""
    t = schedule.clamp(check_time(t))
    coeff_a, coeff_b = schedule.coefficients(t)
    return ScheduleEval(
        t=t,
        alpha=schedule.alpha(t),
        sigma=schedule.sigma(t),
        alpha_dot=schedule.alpha_dot(t),
        sigma_dot=schedule.sigma_dot(t),
        coeff_a=coeff_a,
        coeff_b=coeff_b,
    )


class GridKind(str, Enum):
    """How a time grid was constructed."""

    UNIFORM = "uniform"
    SHIFTED = "shifted"
    STAGEWISE = "stagewise"
    CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Left endpoints of the Euler intervals; the terminal time 1 is implicit.

    Args:
        times: Strictly increasing float64 times starting at 0.
        construction: Which constructor produced the grid.
        params: Constructor parameters, kept for provenance in CSV output.
    """

    times: torch.Tensor
    construction: GridKind = GridKind.UNIFORM
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate the grid invariants."""
        times = torch.as_tensor(self.times, dtype=torch.float64).flatten()
        object.__setattr__(self, "times", times)
        if times.numel() < 2:
            raise InvalidInputError(f"A time grid needs at least 2 times, got {times.numel()}.")
        if not torch.isfinite(times).all():
            raise InvalidInputError("Time grid contains non-finite values.")
        if times[0].item() != 0.0 or times[-1].item() > 1.0:
            raise InvalidInputError("Time grid must start at 0 and end at or below 1.")
        if not (times[1:] > times[:-1]).all():
            raise InvalidInputError("Time grid must be strictly increasing.")

    def __len__(self) -> int:
        """Number of left endpoints (= number of Euler steps)."""
        return self.times.numel()

    def with_terminal(self) -> torch.Tensor:
        """Grid times followed by the terminal time 1 (unless already present)."""
        if self.times[-1].item() == 1.0:
            return self.times.clone()
        return torch.cat([self.times, torch.ones(1, dtype=torch.float64)])


def _check_steps(n: int, name: str = "n", minimum: int = 2) -> int:
    if int(n) != n or n < minimum:
        raise InvalidInputError(f"{name} must be an integer >= {minimum}, got {n}.")
    return int(n)


def shift_time(t: TimeLike, s: float) -> TimeLike:
    """Timestep shift t -> s*t / (1 + (s-1)*t); fixes 0 and 1, identity for s=1."""
    if not s > 0:
        raise InvalidInputError(f"Shift factor must be positive, got {s}.")
    return s * t / (1.0 + (s - 1.0) * t)


def uniform_grid(n: int) -> TimeGrid:
    """``n`` equally spaced left endpoints {i/n}."""
    n = _check_steps(n)
    times = torch.arange(n, dtype=torch.float64) / n
    return TimeGrid(times, GridKind.UNIFORM, {"n": n})


def shifted_grid(n: int, s: float) -> TimeGrid:
    """Uniform grid passed through the timestep shift mapping."""
    n = _check_steps(n)
    if not (math.isfinite(s) and s > 0):
        raise InvalidInputError(f"Shift factor must be positive, got {s}.")
    times = shift_time(uniform_grid(n).times, float(s))
    return TimeGrid(times, GridKind.SHIFTED, {"n": n, "s": float(s)})


def stagewise_grid(n1: int, n2: int, t_split: float) -> TimeGrid:
    """``n1`` uniform steps on [0, t_split) followed by ``n2`` on [t_split, 1)."""
    n1 = _check_steps(n1, "n1", minimum=1)
    n2 = _check_steps(n2, "n2", minimum=1)
    if not (math.isfinite(t_split) and 0.0 < t_split < 1.0):
        raise InvalidInputError(f"t_split must lie strictly inside (0, 1), got {t_split}.")
    first = t_split * torch.arange(n1, dtype=torch.float64) / n1
    second = t_split + (1.0 - t_split) * torch.arange(n2, dtype=torch.float64) / n2
    return TimeGrid(torch.cat([first, second]), GridKind.STAGEWISE, {"n1": n1, "n2": n2, "t_split": float(t_split)})


def fraction_below(grid: TimeGrid, threshold: float) -> float:
    """Share of grid times strictly below ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError(f"threshold must lie in (0, 1), got {threshold}.")
    return (grid.times < threshold).sum().item() / len(grid)


def grid_to_csv(grid: TimeGrid, path: str | Path) -> None:
    """Write one time per row with 17 significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in grid.times.tolist():
            f.write(format_float(t) + "\n")


def grid_from_csv(path: str | Path) -> TimeGrid:
    """Read a grid written by :func:`grid_to_csv`."""
    times = []
    with open(path, encoding="utf-8") as f:
        for row, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                times.append(float(line))
            except ValueError as err:
                raise FormatError(f"Cannot parse time {line!r}", row=row) from err
    logger.debug(f"Loaded time grid with {len(times)} times from {path}")
    return TimeGrid(torch.tensor(times, dtype=torch.float64), GridKind.CUSTOM, {"source": str(path)})
