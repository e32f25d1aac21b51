"""Euler sampling over velocity fields: plain, guided, mixed oracle/model, resumed and stage-wise."""

import csv
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from flowscope.data import Dataset, class_subset
from flowscope.errors import DivergenceError, InvalidInputError
from flowscope.model import ClassIds, VelocityField, VelocityMLP
from flowscope.oracle import DEFAULT_SCHEDULE, class_conditional_oracle_velocity, interpolate, oracle_velocity
from flowscope.schedule import Schedule, TimeGrid, check_time, stagewise_grid
from flowscope.utils import RichLogger, format_float

logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))

START_TAG = "start"


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance applied on a closed sub-interval of time.

    Args:
        scale: Guidance factor omega.
        interval: (lo, hi) where guidance is active; conditional prediction elsewhere.
        enabled: A disabled config behaves like ``scale=1`` everywhere.
    """

    scale: float = 1.0
    interval: tuple[float, float] = (0.0, 1.0)
    enabled: bool = True

    def __post_init__(self) -> None:
        """Validate the scale and the interval."""
        lo, hi = (float(v) for v in self.interval)
        object.__setattr__(self, "interval", (lo, hi))
        if not (math.isfinite(self.scale) and self.scale >= 0):
            raise InvalidInputError(f"Guidance scale must be non-negative, got {self.scale}.")
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidInputError(f"Guidance interval must satisfy 0 <= lo <= hi <= 1, got {self.interval}.")

    @property
    def neutral(self) -> bool:
        """True when guidance can never change the conditional prediction."""
        return not self.enabled or self.scale == 1.0

    def active(self, t: float | Tensor) -> bool | Tensor:
        """Whether guidance applies at ``t`` (elementwise for tensors)."""
        lo, hi = self.interval
        if isinstance(t, Tensor):
            if self.neutral:
                return torch.zeros_like(t, dtype=torch.bool)
            return (t >= lo) & (t <= hi)
        return not self.neutral and lo <= t <= hi


@dataclass(frozen=True)
class MixedConfig:
    """Oracle steps before ``t_switch``, model steps from ``t_switch`` on."""

    t_switch: float
    grid: TimeGrid
    class_id: int | None = None

    def __post_init__(self) -> None:
        """Validate the switch time."""
        object.__setattr__(self, "t_switch", check_time(self.t_switch, "t_switch"))


@dataclass(frozen=True, eq=False)
class ResumeConfig:
    """Restart sampling from a re-noised reference point at ``t_resume``."""

    t_resume: float
    reference: Tensor
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the resume time and store the reference as float64."""
        object.__setattr__(self, "t_resume", check_time(self.t_resume, "t_resume"))
        reference = torch.as_tensor(self.reference, dtype=torch.float64)
        if reference.ndim != 1 or not torch.isfinite(reference).all():
            raise InvalidInputError("The reference point must be a finite D-vector.")
        object.__setattr__(self, "reference", reference)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampling path: K+1 times and states, and the tag of the field used for each of the K steps.

    ``states`` has shape (K+1, D), or (K+1, B, D) for a batch of trajectories
    integrated together on the same grid.
    """

    times: Tensor
    states: Tensor
    field_tags: tuple[str, ...]

    def __post_init__(self) -> None:
        """Check lengths and finiteness."""
        if self.times.numel() != self.states.shape[0]:
            raise InvalidInputError("A trajectory needs one state per time.")
        if len(self.field_tags) != self.times.numel() - 1:
            raise InvalidInputError("A trajectory needs one field tag per step.")
        if not torch.isfinite(self.states).all():
            raise InvalidInputError("Trajectory states must be finite.")

    def __len__(self) -> int:
        """Number of states."""
        return self.times.numel()

    @property
    def terminal(self) -> Tensor:
        """Final state (or batch of final states)."""
        return self.states[-1]

    @property
    def batched(self) -> bool:
        """Whether the trajectory carries a batch axis."""
        return self.states.ndim == 3

    def split(self) -> list["Trajectory"]:
        """One unbatched trajectory per batch row."""
        if not self.batched:
            return [self]
        return [Trajectory(self.times, self.states[:, b], self.field_tags) for b in range(self.states.shape[1])]


class OracleField:
    """Closed-form oracle as a velocity field.

    Args:
        data: Training set.
        schedule: Interpolation schedule.
        class_conditional: Use the oracle restricted to the requested class;
            with ``False`` (or unlabeled data) the class is ignored.
    """

    tag = "oracle"

    def __init__(self, data: Dataset, schedule: Schedule = DEFAULT_SCHEDULE, class_conditional: bool = True) -> None:
        self.data = data
        self.schedule = schedule
        self.class_conditional = class_conditional and data.labels is not None
        self._subsets = {}

    @property
    def dim(self) -> int:
        """Dimensionality of the field."""
        return self.data.dim

    def _subset(self, class_id: int):
        if class_id not in self._subsets:
            subset = class_subset(self.data, class_id)
            self._subsets[class_id] = Dataset(subset.points, name=f"{self.data.name}[{class_id}]")
        return self._subsets[class_id]

    def __call__(self, xt: Tensor, t: float | Tensor, class_id: ClassIds = None) -> Tensor:
        """Oracle velocity at (x_t, t)."""
        if class_id is None or not self.class_conditional:
            return oracle_velocity(xt, t, self.data, self.schedule)
        if isinstance(class_id, Tensor) and class_id.numel() > 1:
            return class_conditional_oracle_velocity(xt, t, self.data, class_id, self.schedule)
        label = int(class_id)
        if label < 0:
            return oracle_velocity(xt, t, self.data, self.schedule)
        return oracle_velocity(xt, t, self._subset(label), self.schedule)


class ModelField:
    """Trained velocity model as a float64 velocity field (no gradient tracking)."""

    tag = "model"

    def __init__(self, model: VelocityMLP) -> None:
        self.model = model.eval()

    @property
    def dim(self) -> int:
        """Dimensionality of the field."""
        return self.model.dim

    def __call__(self, xt: Tensor, t: float | Tensor, class_id: ClassIds = None) -> Tensor:
        """Model prediction at (x_t, t) for ``class_id``."""
        with torch.no_grad():
            return self.model(xt, t, class_id).to(torch.float64)


class GuidedField(ModelField):
    """Model field with classifier-free guidance."""

    tag = "guided-model"

    def __init__(self, model: VelocityMLP, guidance: GuidanceConfig) -> None:
        super().__init__(model)
        if model.num_classes == 0 and not guidance.neutral:
            raise InvalidInputError("Guidance needs a class-conditional model.")
        self.guidance = guidance

    def __call__(self, xt: Tensor, t: float | Tensor, class_id: ClassIds = None) -> Tensor:
        """Guided prediction at (x_t, t) for ``class_id``."""
        return guided_velocity(super().__call__, xt, t, class_id, self.guidance)


def guided_velocity(model, xt: Tensor, t: float | Tensor, class_id: ClassIds, guidance: GuidanceConfig) -> Tensor:
    """Blend v_u + omega * (v_c - v_u) inside the guidance interval, v_c outside it.

    Args:
        model: Callable ``(xt, t, class_id) -> velocity``; ``class_id=None`` selects the null class.
        xt: State(s).
        t: Time, scalar or per row.
        class_id: Conditioning class.
        guidance: Scale and interval.
    """
    if guidance.enabled and class_id is None:
        raise InvalidInputError("Guidance needs a class id.")
    v_cond = model(xt, t, class_id)
    active = guidance.active(t)
    if isinstance(active, bool):
        if not active:
            return v_cond
        v_uncond = model(xt, t, None)
        return v_uncond + guidance.scale * (v_cond - v_uncond)
    if not active.any():
        return v_cond
    v_uncond = model(xt, t, None)
    mask = active.reshape(-1, *([1] * (v_cond.ndim - 1))) if v_cond.ndim > 1 else active
    return torch.where(mask, v_uncond + guidance.scale * (v_cond - v_uncond), v_cond)


def _start_state(field: VelocityField, x0: Tensor) -> Tensor:
    x = torch.as_tensor(x0, dtype=torch.float64)
    if x.ndim not in (1, 2):
        raise InvalidInputError(f"Expected a D-vector or a B x D batch of priors, got shape {tuple(x.shape)}.")
    dim = getattr(field, "dim", None)
    if dim is not None and x.shape[-1] != dim:
        raise InvalidInputError(f"Prior has dimension {x.shape[-1]}, field expects {dim}.")
    if not torch.isfinite(x).all():
        raise InvalidInputError("Initial state must be finite.")
    return x


def _integrate(x: Tensor, times: Sequence[float], fields: Sequence[VelocityField], class_id: ClassIds) -> Trajectory:
    """Explicit Euler with the velocity taken at each interval's left endpoint."""
    states = [x]
    for k, field in enumerate(fields):
        t, t_next = times[k], times[k + 1]
        x = x + (t_next - t) * field(x, t, class_id)
        if not torch.isfinite(x).all():
            raise DivergenceError(k + 1, t)
        states.append(x)
    return Trajectory(torch.tensor(times, dtype=torch.float64), torch.stack(states), tuple(f.tag for f in fields))


def euler_sample(field: VelocityField, grid: TimeGrid, x0: Tensor, class_id: ClassIds = None) -> Trajectory:
    """Integrate ``field`` from ``x0`` over ``grid`` up to t=1."""
    x = _start_state(field, x0)
    times = grid.with_terminal().tolist()
    return _integrate(x, times, [field] * len(grid), class_id)


def mixed_sample(
    oracle_field: VelocityField, model_field: VelocityField, config: MixedConfig, x0: Tensor
) -> Trajectory:
    """Take oracle steps while the step's left endpoint is below ``t_switch``, model steps afterwards."""
    if getattr(oracle_field, "dim", None) != getattr(model_field, "dim", None):
        raise InvalidInputError("Oracle and model fields have different dimensions.")
    x = _start_state(model_field, x0)
    times = config.grid.with_terminal().tolist()
    fields = [oracle_field if t < config.t_switch else model_field for t in times[:-1]]
    logger.debug(f"Mixed sampling: {fields.count(oracle_field)} oracle steps, then model steps")
    return _integrate(x, times, fields, config.class_id)


def resume_sample(
    field: VelocityField, config: ResumeConfig, grid: TimeGrid, class_id: ClassIds = None
) -> Trajectory:
    """Noise the reference to ``t_resume`` with a fresh prior draw and integrate the rest of the grid."""
    reference = _start_state(field, config.reference)
    if config.t_resume == 1.0:
        return Trajectory(torch.ones(1, dtype=torch.float64), reference.unsqueeze(0), ())
    generator = torch.Generator().manual_seed(config.seed)
    x0 = torch.randn(reference.shape, generator=generator, dtype=torch.float64)
    x = interpolate(x0, reference, config.t_resume, getattr(field, "schedule", DEFAULT_SCHEDULE))
    times = [config.t_resume] + [t for t in grid.times.tolist() if t > config.t_resume] + [1.0]
    return _integrate(x, times, [field] * (len(times) - 1), class_id)


def stagewise_sample(
    stage1_field: VelocityField,
    stage2_field: VelocityField,
    t_split: float,
    n1: int,
    n2: int,
    x0: Tensor,
    class_id: ClassIds = None,
) -> Trajectory:
    """Use ``stage1_field`` for ``n1`` steps below ``t_split`` and ``stage2_field`` for ``n2`` steps above."""
    grid = stagewise_grid(n1, n2, t_split)
    x = _start_state(stage1_field, x0)
    times = grid.with_terminal().tolist()
    fields = [stage1_field if t < t_split else stage2_field for t in times[:-1]]
    return _integrate(x, times, fields, class_id)


def intermediate_prediction(xt: Tensor, t: float, v: Tensor) -> Tensor:
    """Single Euler jump from (x_t, t) to t=1."""
    t = check_time(t)
    xt, v = torch.as_tensor(xt, dtype=torch.float64), torch.as_tensor(v, dtype=torch.float64)
    if not (torch.isfinite(xt).all() and torch.isfinite(v).all()):
        raise InvalidInputError("State and velocity must be finite.")
    return xt + (1.0 - t) * v


def intermediate_predictions(field: VelocityField, trajectory: Trajectory, class_id: ClassIds = None) -> Tensor:
    """Jump to t=1 from every non-terminal state of ``trajectory``."""
    predictions = []
    for t, xt in zip(trajectory.times[:-1].tolist(), trajectory.states[:-1]):
        predictions.append(intermediate_prediction(xt, t, field(xt, t, class_id)))
    return torch.stack(predictions)


def trajectory_to_csv(trajectories: Sequence[Trajectory], path: str | Path, terminal_only: bool = False) -> None:
    """Write trajectories as CSV rows (trajectory, step, t, field_tag, dim_0..dim_{D-1}).

    ``field_tag`` of a state is the tag of the step that produced it; the
    first state of each trajectory is tagged ``start``.
    """
    rows = [single for trajectory in trajectories for single in trajectory.split()]
    if not rows:
        raise InvalidInputError("No trajectories to write.")
    dim = rows[0].states.shape[-1]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["trajectory", "step", "t", "field_tag", *(f"dim_{j}" for j in range(dim))])
        for index, trajectory in enumerate(rows):
            tags = (START_TAG, *trajectory.field_tags)
            steps = [len(trajectory) - 1] if terminal_only else range(len(trajectory))
            for step in steps:
                writer.writerow(
                    [
                        index,
                        step,
                        format_float(trajectory.times[step].item()),
                        tags[step],
                        *(format_float(v) for v in trajectory.states[step].tolist()),
                    ]
                )
    logger.debug(f"Wrote {len(rows)} trajectories to {path}")


def predictions_to_csv(trajectory: Trajectory, predictions: Tensor, path: str | Path) -> None:
    """Write intermediate predictions as rows (trajectory, step, t, dim_0..dim_{D-1})."""
    batch = predictions if trajectory.batched else predictions.unsqueeze(1)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["trajectory", "step", "t", *(f"dim_{j}" for j in range(batch.shape[-1]))])
        for index in range(batch.shape[1]):
            for step, t in enumerate(trajectory.times[:-1].tolist()):
                writer.writerow([index, step, format_float(t), *(format_float(v) for v in batch[step, index].tolist())])
