"""Monte Carlo sweeps over time (or dataset shape) that measure the oracle, trained models and samplers.

Every sweep evaluates independent cells (one per axis value) on a thread pool.
Each cell draws its path samples from a generator derived from ``(seed, cell
index)``, so results are identical for any number of workers.
"""

import csv
import json
import math
import os
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import torch
from torch import Tensor

from flowscope.data import Dataset, gen_gaussian, nearest_neighbor_batch
from flowscope.errors import FormatError, InvalidInputError
from flowscope.model import VelocityField, VelocityMLP
from flowscope.oracle import (
    DEFAULT_SCHEDULE,
    conditional_velocity,
    draw_path_samples,
    oracle_velocity,
    target_gap,
    top1_weight,
)
from flowscope.sampler import MixedConfig, ModelField, mixed_sample
from flowscope.schedule import Schedule, TimeGrid, check_time
from flowscope.utils import RichLogger, format_float, make_generator, parallel_map, resolve_workers

logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))

SWEEP_CSV_HEADER = ["sweep_name", "param_json", "t", "mean", "std", "n_mc", "seed"]


@dataclass(frozen=True, eq=False)
class SweepSeries:
    """Per-axis-point mean and standard deviation of a Monte Carlo statistic.

    Args:
        name: Sweep name written to the ``sweep_name`` CSV column.
        axis: Time values (or sweep parameter values).
        mean: Mean statistic per axis point.
        std: Population standard deviation per axis point.
        n_mc: Monte Carlo samples per axis point.
        seed: Base seed.
        statistic_name: What was averaged.
        params: Sweep parameters, serialised into ``param_json``.
    """

    name: str
    axis: Tensor
    mean: Tensor
    std: Tensor
    n_mc: int
    seed: int
    statistic_name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Store float64 copies and check lengths."""
        for attr in ("axis", "mean", "std"):
            object.__setattr__(self, attr, torch.as_tensor(getattr(self, attr), dtype=torch.float64).flatten())
        if not self.axis.numel() == self.mean.numel() == self.std.numel():
            raise InvalidInputError("axis, mean and std must have equal lengths.")
        if (self.std < 0).any():
            raise InvalidInputError("Standard deviations must be non-negative.")

    def __len__(self) -> int:
        """Number of axis points."""
        return self.axis.numel()

    def at(self, t: float) -> float:
        """Mean at the axis point closest to ``t``."""
        return self.mean[(self.axis - t).abs().argmin()].item()


def default_t_grid() -> list[float]:
    """50 uniform times on [0, 0.98] merged with 0.01, 0.02, ..., 0.15."""
    coarse = [0.98 * i / 49 for i in range(50)]
    dense = [k / 100 for k in range(1, 16)]
    unique = {round(t, 12): t for t in coarse + dense}
    return [unique[key] for key in sorted(unique)]


def _check_sweep(t_grid: Sequence[float], n_mc: int) -> list[float]:
    if n_mc < 1:
        raise InvalidInputError(f"n_mc must be at least 1, got {n_mc}.")
    times = [check_time(t) for t in t_grid]
    if not times:
        raise InvalidInputError("The sweep grid is empty.")
    return times


def _as_field(model: VelocityMLP | VelocityField) -> VelocityField:
    return ModelField(model) if isinstance(model, VelocityMLP) else model


def _evaluate_cells(
    axis: Sequence[float], seed: int, workers: int | None, cell: Callable[[float, torch.Generator], object]
) -> list:
    """Run ``cell`` for every axis point with its own derived generator, keeping axis order."""
    return parallel_map(lambda i: cell(axis[i], make_generator(seed, i)), range(len(axis)), resolve_workers(workers))


def _summarise(
    name: str, statistic_name: str, axis: Sequence[float], values: Sequence[Tensor], n_mc: int, seed: int, params: dict
) -> SweepSeries:
    """Reduce each cell's samples to mean and population std."""
    for t, v in zip(axis, values):
        logger.debug(f"{name}: axis={t:.4g} mean={v.mean().item():.6g}")
    return SweepSeries(
        name=name,
        axis=list(axis),
        mean=[v.mean().item() for v in values],
        std=[v.std(correction=0).item() for v in values],
        n_mc=n_mc,
        seed=seed,
        statistic_name=statistic_name,
        params=dict(params),
    )


def target_mse_sweep(
    data: Dataset,
    t_grid: Sequence[float],
    n_mc: int,
    seed: int,
    schedule: Schedule = DEFAULT_SCHEDULE,
    workers: int | None = 1,
) -> SweepSeries:
    """Per-dimension MSE between the oracle target and the conditional target x1 - x0."""
    times = _check_sweep(t_grid, n_mc)

    def cell(t: float, generator: torch.Generator) -> Tensor:
        sample = draw_path_samples(data, t, n_mc, generator, schedule)
        return target_gap(sample.x0, sample.x1_index, t, data, schedule)

    logger.info(f"Target MSE sweep over {len(times)} times (N={len(data)}, D={data.dim}, n_mc={n_mc})")
    values = _evaluate_cells(times, seed, workers, cell)
    return _summarise("target_mse", "target_mse", times, values, n_mc, seed, {"n": len(data), "d": data.dim})


def top1_sweep(
    data: Dataset,
    t_grid: Sequence[float],
    n_mc: int,
    seed: int,
    schedule: Schedule = DEFAULT_SCHEDULE,
    workers: int | None = 1,
) -> SweepSeries:
    """Mean of the largest posterior weight at path samples."""
    times = _check_sweep(t_grid, n_mc)

    def cell(t: float, generator: torch.Generator) -> Tensor:
        sample = draw_path_samples(data, t, n_mc, generator, schedule)
        return top1_weight(sample.xt, t, data, schedule)

    logger.info(f"Top-1 sweep over {len(times)} times (N={len(data)}, D={data.dim}, n_mc={n_mc})")
    values = _evaluate_cells(times, seed, workers, cell)
    return _summarise("top1", "top1_weight", times, values, n_mc, seed, {"n": len(data), "d": data.dim})


def dim_size_sweep(
    dims: Sequence[int],
    sizes: Sequence[int],
    t_grid: Sequence[float],
    n_mc: int,
    seed: int,
    schedule: Schedule = DEFAULT_SCHEDULE,
    workers: int | None = 1,
) -> list[SweepSeries]:
    """One top-1 sweep per (D, N) pair over fresh unit-Gaussian data."""
    if not dims or not sizes:
        raise InvalidInputError("dims and sizes must both be non-empty.")
    series = []
    for d in dims:
        for n in sizes:
            data = gen_gaussian(n, d, seed)
            series.append(top1_sweep(data, t_grid, n_mc, seed, schedule, workers))
    return series


def model_loss_sweep(
    model: VelocityMLP | VelocityField,
    data: Dataset,
    t_grid: Sequence[float],
    n_mc: int,
    seed: int,
    schedule: Schedule = DEFAULT_SCHEDULE,
    workers: int | None = 1,
) -> tuple[SweepSeries, SweepSeries]:
    """Per-time MSE of the (unconditional) model against the conditional and the oracle targets.

    Both losses are measured on the same path samples.
    """
    times = _check_sweep(t_grid, n_mc)
    velocity = _as_field(model)

    def cell(t: float, generator: torch.Generator) -> tuple[Tensor, Tensor]:
        sample = draw_path_samples(data, t, n_mc, generator, schedule)
        prediction = velocity(sample.xt, t, None)
        x1 = data.points.index_select(0, sample.x1_index)
        cond = (prediction - conditional_velocity(sample.x0, x1, t, schedule)).square().mean(dim=1)
        oracle = (prediction - oracle_velocity(sample.xt, t, data, schedule)).square().mean(dim=1)
        return cond, oracle

    params = {"n": len(data), "d": data.dim}
    if isinstance(model, VelocityMLP):
        params["hidden"] = model.hidden
    cond, oracle = zip(*_evaluate_cells(times, seed, workers, cell))
    return (
        _summarise("model_loss_cond", "mse_cond_target", times, cond, n_mc, seed, params),
        _summarise("model_loss_oracle", "mse_oracle_target", times, oracle, n_mc, seed, params),
    )


def capacity_loss_sweep(
    models_by_width: Mapping[int, VelocityMLP],
    data: Dataset,
    t_grid: Sequence[float],
    n_mc: int,
    seed: int,
    schedule: Schedule = DEFAULT_SCHEDULE,
    workers: int | None = 1,
    include_cond: bool = False,
) -> list[SweepSeries]:
    """Oracle-target loss curve for each hidden width, narrowest first.

    With ``include_cond`` each width contributes its conditional-target curve followed by the oracle-target one.
    """
    if not models_by_width:
        raise InvalidInputError("No models given.")
    series = []
    for width in sorted(models_by_width):
        cond, oracle = model_loss_sweep(models_by_width[width], data, t_grid, n_mc, seed, schedule, workers)
        series += [cond, oracle] if include_cond else [oracle]
    return series


def velocity_norm_sweep(
    velocity: VelocityMLP | VelocityField,
    data: Dataset,
    t_grid: Sequence[float],
    n_mc: int,
    seed: int,
    schedule: Schedule = DEFAULT_SCHEDULE,
    workers: int | None = 1,
) -> SweepSeries:
    """Mean L2 norm of the field's output at path samples."""
    times = _check_sweep(t_grid, n_mc)
    velocity_field = _as_field(velocity)

    def cell(t: float, generator: torch.Generator) -> Tensor:
        sample = draw_path_samples(data, t, n_mc, generator, schedule)
        return velocity_field(sample.xt, t, None).norm(dim=1)

    tag = getattr(velocity_field, "tag", "field")
    values = _evaluate_cells(times, seed, workers, cell)
    series = _summarise("velocity_norm", "velocity_norm", times, values, n_mc, seed, {"field": tag})
    peak = series.mean.argmax().item()
    logger.info(f"Velocity norm of {tag} peaks at t={series.axis[peak].item():.3f} ({series.mean[peak].item():.4g})")
    return series


def cond_uncond_divergence(
    model: VelocityMLP,
    data: Dataset,
    t_grid: Sequence[float],
    n_mc: int,
    seed: int,
    schedule: Schedule = DEFAULT_SCHEDULE,
    workers: int | None = 1,
) -> SweepSeries:
    """Mean L2 distance between conditional (label of the sampled x1) and null-class predictions."""
    if model.num_classes == 0:
        raise InvalidInputError("The model has no class conditioning.")
    if data.labels is None:
        raise InvalidInputError("cond_uncond_divergence needs a labeled dataset.")
    times = _check_sweep(t_grid, n_mc)
    velocity = ModelField(model)

    def cell(t: float, generator: torch.Generator) -> Tensor:
        sample = draw_path_samples(data, t, n_mc, generator, schedule)
        labels = data.labels.index_select(0, sample.x1_index)
        return (velocity(sample.xt, t, labels) - velocity(sample.xt, t, None)).norm(dim=1)

    values = _evaluate_cells(times, seed, workers, cell)
    params = {"classes": model.num_classes}
    return _summarise("cond_uncond_divergence", "l2_distance", times, values, n_mc, seed, params)


def memorization_curve(
    oracle_field: VelocityField,
    model_field: VelocityField,
    data: Dataset,
    t_switch_list: Sequence[float],
    n_seeds: int,
    grid: TimeGrid,
    seed: int = 0,
    class_id: int | None = None,
    workers: int | None = 1,
) -> SweepSeries:
    """Nearest-neighbor distance of mixed-sampling outputs, relative to the dataset rms norm, per t_switch.

    The same ``n_seeds`` priors are used for every switch time.
    """
    switches = _check_sweep(t_switch_list, n_seeds)
    if data.rms_norm == 0:
        raise InvalidInputError("Dataset rms norm is zero; relative distances are undefined.")
    priors = torch.stack(
        [torch.randn(data.dim, generator=make_generator(seed, j), dtype=torch.float64) for j in range(n_seeds)]
    )

    def evaluate(t_switch: float) -> Tensor:
        trajectory = mixed_sample(oracle_field, model_field, MixedConfig(t_switch, grid, class_id), priors)
        _, distances = nearest_neighbor_batch(data, trajectory.terminal)
        return distances / data.rms_norm

    logger.info(f"Memorization curve over {len(switches)} switch times with {n_seeds} priors")
    values = parallel_map(evaluate, switches, resolve_workers(workers))
    params = {"steps": len(grid), "class": class_id}
    return _summarise("memorization", "nn_distance_over_rms", switches, values, n_seeds, seed, params)


def write_sweep_rows(series: Sequence[SweepSeries], stream: TextIO, header: bool = True) -> None:
    """Write series as (sweep_name, param_json, t, mean, std, n_mc, seed) rows to an open text stream."""
    writer = csv.writer(stream, lineterminator="\n")
    if header:
        writer.writerow(SWEEP_CSV_HEADER)
    for s in series:
        params = json.dumps({"statistic": s.statistic_name, **s.params}, sort_keys=True, separators=(",", ":"))
        for t, mean, std in zip(s.axis.tolist(), s.mean.tolist(), s.std.tolist()):
            writer.writerow([s.name, params, format_float(t), format_float(mean), format_float(std), s.n_mc, s.seed])


def write_sweep_csv(series: Sequence[SweepSeries], path: str | Path, append: bool = False) -> None:
    """Write series to ``path``; with ``append`` the header is only written to a new or empty file."""
    path = Path(path)
    header = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", encoding="utf-8", newline="") as f:
        write_sweep_rows(series, f, header)
    logger.debug(f"Wrote {len(series)} series to {path}")


def read_sweep_csv(path: str | Path) -> list[SweepSeries]:
    """Read series written by :func:`write_sweep_csv`, grouped by (sweep_name, param_json) in file order."""
    groups: dict[tuple[str, str], dict] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SWEEP_CSV_HEADER:
            raise FormatError(f"Unexpected sweep CSV header {header}", row=1)
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SWEEP_CSV_HEADER):
                raise FormatError(f"Expected {len(SWEEP_CSV_HEADER)} fields, got {len(row)}", row=row_number)
            name, params, *numbers = row
            try:
                t, mean, std = (float(v) for v in numbers[:3])
                n_mc, seed = int(numbers[3]), int(numbers[4])
                decoded = json.loads(params)
            except (ValueError, json.JSONDecodeError) as err:
                raise FormatError(f"Cannot parse sweep row: {err}", row=row_number) from err
            if not all(math.isfinite(v) for v in (t, mean)):
                raise FormatError("Non-finite axis or mean value", row=row_number)
            group = groups.setdefault((name, params), {"params": decoded, "rows": [], "n_mc": n_mc, "seed": seed})
            group["rows"].append((t, mean, std))
    series = []
    for (name, _), group in groups.items():
        params = dict(group["params"])
        statistic = params.pop("statistic", "")
        t, mean, std = zip(*group["rows"])
        series.append(
            SweepSeries(name, list(t), list(mean), list(std), group["n_mc"], group["seed"], statistic, params)
        )
    return series
