"""Closed-form oracle velocity of flow matching over a finite dataset.

For data points x1^(i), i = 1..N, a standard-normal prior and the path
x_t = alpha_t x1 + sigma_t x0, the marginal velocity is

    u*(x_t, t) = A_t * sum_i gamma_i(x_t, t) x1^(i) + B_t * x_t

with gamma = softmax_i(-||x_t - alpha_t x1^(i)||^2 / (2 sigma_t^2)). The softmax
is always taken in the log domain: at D in the thousands the exponents reach
magnitudes of 1e3-1e4 and direct exponentiation gives 0/0.

Every function accepts a single D-vector or a B x D matrix of queries, with a
scalar time or one time per row. Queries are processed in row chunks so the
B x N distance matrix never has to exist at once.
"""

import math
import os
from collections.abc import Iterator
from dataclasses import dataclass

import torch
from torch import Tensor

from flowscope.data import Dataset, PointSet, class_subset
from flowscope.errors import InvalidInputError
from flowscope.schedule import Schedule, TimeLike
from flowscope.utils import RichLogger

logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))

DEFAULT_SCHEDULE = Schedule()
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True, eq=False)
class PosteriorWeights:
    """Posterior weights gamma_i(x_t, t); a leading batch axis when queried with a matrix."""

    log_weights: Tensor
    weights: Tensor
    top1_index: Tensor
    top1_weight: Tensor


@dataclass(frozen=True, eq=False)
class PathSample:
    """Draws from the path marginal: x_t = alpha_t * x1[x1_index] + sigma_t * x0."""

    x0: Tensor
    x1_index: Tensor
    t: Tensor
    xt: Tensor


def _as_matrix(x: Tensor, dim: int | None = None) -> tuple[Tensor, bool]:
    x = torch.as_tensor(x, dtype=torch.float64)
    single = x.ndim == 1
    if single:
        x = x.unsqueeze(0)
    if x.ndim != 2:
        raise InvalidInputError(f"Expected a D-vector or a B x D matrix, got shape {tuple(x.shape)}.")
    if dim is not None and x.shape[1] != dim:
        raise InvalidInputError(f"Query has dimension {x.shape[1]}, data has dimension {dim}.")
    return x, single


def _as_times(t: TimeLike, batch: int) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.float64).flatten()
    if t.numel() == 1:
        t = t.expand(batch)
    if t.numel() != batch:
        raise InvalidInputError(f"Expected a scalar time or {batch} times, got {t.numel()}.")
    if not torch.isfinite(t).all():
        raise InvalidInputError("Times must be finite.")
    if (t < 0).any() or (t > 1).any():
        raise InvalidInputError("Times must lie in [0, 1].")
    return t


def _data_points(data: PointSet) -> Tensor:
    if len(data) == 0:
        raise InvalidInputError("Cannot evaluate the oracle over an empty dataset.")
    return data.points


def _unbatch(value: Tensor, single: bool) -> Tensor:
    return value.squeeze(0) if single else value


def _chunk_slices(batch: int, n_points: int) -> Iterator[slice]:
    rows = max(1, _CHUNK_ELEMENTS // max(n_points, 1))
    for start in range(0, batch, rows):
        yield slice(start, min(start + rows, batch))


def _logits(xt: Tensor, t: Tensor, points: Tensor, sq_norms: Tensor, schedule: Schedule) -> Tensor:
    """Unnormalised log posterior -||x_t - alpha_t x1^(i)||^2 / (2 sigma_t^2), shape B x N."""
    t = schedule.clamp(t).unsqueeze(1)
    alpha, sigma = schedule.alpha(t), schedule.sigma(t)
    sq_dist = xt.square().sum(dim=1, keepdim=True) - 2 * alpha * (xt @ points.T) + alpha.square() * sq_norms
    return -sq_dist.clamp_min(0.0) / (2 * sigma.square())


def _iter_logits(xt: Tensor, t: Tensor, points: Tensor, schedule: Schedule) -> Iterator[tuple[slice, Tensor]]:
    sq_norms = points.square().sum(dim=1).unsqueeze(0)
    for rows in _chunk_slices(xt.shape[0], points.shape[0]):
        yield rows, _logits(xt[rows], t[rows], points, sq_norms, schedule)


def interpolate(x0: Tensor, x1: Tensor, t: TimeLike, schedule: Schedule = DEFAULT_SCHEDULE) -> Tensor:
    """Point on the path between prior draw ``x0`` and data point ``x1``."""
    x0, x1 = torch.as_tensor(x0, dtype=torch.float64), torch.as_tensor(x1, dtype=torch.float64)
    if x0.shape != x1.shape:
        raise InvalidInputError(f"x0 and x1 shapes differ: {tuple(x0.shape)} vs {tuple(x1.shape)}.")
    t = _path_time(t, x0)
    return schedule.alpha(t) * x1 + schedule.sigma(t) * x0


def conditional_velocity(x0: Tensor, x1: Tensor, t: TimeLike, schedule: Schedule = DEFAULT_SCHEDULE) -> Tensor:
    """Conditional target alpha_dot_t * x1 + sigma_dot_t * x0 (x1 - x0 for rectified flow)."""
    x0, x1 = torch.as_tensor(x0, dtype=torch.float64), torch.as_tensor(x1, dtype=torch.float64)
    if x0.shape != x1.shape:
        raise InvalidInputError(f"x0 and x1 shapes differ: {tuple(x0.shape)} vs {tuple(x1.shape)}.")
    t = _path_time(t, x0)
    return schedule.alpha_dot(t) * x1 + schedule.sigma_dot(t) * x0


def _path_time(t: TimeLike, x: Tensor) -> Tensor:
    batch = x.shape[0] if x.ndim == 2 else 1
    times = _as_times(t, batch)
    return times.unsqueeze(1) if x.ndim == 2 else times.reshape(())


def posterior_weights(
    xt: Tensor, t: TimeLike, data: PointSet, schedule: Schedule = DEFAULT_SCHEDULE
) -> PosteriorWeights:
    """Normalised posterior weights of every data point given x_t."""
    points = _data_points(data)
    xt, single = _as_matrix(xt, data.dim)
    t = _as_times(t, xt.shape[0])
    log_weights = torch.empty(xt.shape[0], points.shape[0], dtype=torch.float64)
    weights = torch.empty_like(log_weights)
    for rows, logits in _iter_logits(xt, t, points, schedule):
        log_weights[rows] = torch.log_softmax(logits, dim=1)
        weights[rows] = torch.softmax(logits, dim=1)
    top1_index = weights.argmax(dim=1)
    top1_weight = weights.gather(1, top1_index.unsqueeze(1)).squeeze(1)
    return PosteriorWeights(
        log_weights=_unbatch(log_weights, single),
        weights=_unbatch(weights, single),
        top1_index=_unbatch(top1_index, single),
        top1_weight=_unbatch(top1_weight, single),
    )


def top1_weight(xt: Tensor, t: TimeLike, data: PointSet, schedule: Schedule = DEFAULT_SCHEDULE) -> Tensor:
    """Largest posterior weight per query, without materialising all weights."""
    points = _data_points(data)
    xt, single = _as_matrix(xt, data.dim)
    t = _as_times(t, xt.shape[0])
    top = torch.empty(xt.shape[0], dtype=torch.float64)
    for rows, logits in _iter_logits(xt, t, points, schedule):
        top[rows] = torch.softmax(logits, dim=1).max(dim=1).values
    return _unbatch(top, single)


def posterior_mean(xt: Tensor, t: TimeLike, data: PointSet, schedule: Schedule = DEFAULT_SCHEDULE) -> Tensor:
    """Nadaraya-Watson estimate E[x1 | x_t] = sum_i gamma_i x1^(i)."""
    points = _data_points(data)
    xt, single = _as_matrix(xt, data.dim)
    t = _as_times(t, xt.shape[0])
    mean = torch.empty_like(xt)
    for rows, logits in _iter_logits(xt, t, points, schedule):
        mean[rows] = torch.softmax(logits, dim=1) @ points
    return _unbatch(mean, single)


def oracle_velocity(xt: Tensor, t: TimeLike, data: PointSet, schedule: Schedule = DEFAULT_SCHEDULE) -> Tensor:
    """Closed-form marginal velocity A_t * E[x1 | x_t] + B_t * x_t."""
    xt_matrix, single = _as_matrix(xt, data.dim)
    times = _as_times(t, xt_matrix.shape[0])
    coeff_a, coeff_b = schedule.coefficients(times)
    mean = posterior_mean(xt_matrix, times, data, schedule)
    velocity = coeff_a.unsqueeze(1) * mean + coeff_b.unsqueeze(1) * xt_matrix
    return _unbatch(velocity, single)


def class_conditional_oracle_velocity(
    xt: Tensor, t: TimeLike, data: Dataset, labels: Tensor, schedule: Schedule = DEFAULT_SCHEDULE
) -> Tensor:
    """Oracle velocity per row within that row's class; label -1 selects the full dataset."""
    xt, single = _as_matrix(xt, data.dim)
    times = _as_times(t, xt.shape[0])
    labels = torch.as_tensor(labels, dtype=torch.int64).flatten()
    if labels.numel() == 1:
        labels = labels.expand(xt.shape[0])
    if labels.numel() != xt.shape[0]:
        raise InvalidInputError(f"Expected {xt.shape[0]} labels, got {labels.numel()}.")
    velocity = torch.empty_like(xt)
    for label in torch.unique(labels).tolist():
        rows = (labels == label).nonzero().flatten()
        subset = data if label < 0 else class_subset(data, label)
        velocity[rows] = oracle_velocity(xt[rows], times[rows], subset, schedule)
    return _unbatch(velocity, single)


def mixture_log_density(xt: Tensor, t: TimeLike, data: PointSet, schedule: Schedule = DEFAULT_SCHEDULE) -> Tensor:
    """Log-density of the path marginal (1/N) sum_i N(x_t; alpha_t x1^(i), sigma_t^2 I)."""
    points = _data_points(data)
    xt, single = _as_matrix(xt, data.dim)
    t = _as_times(t, xt.shape[0])
    sigma = schedule.sigma(schedule.clamp(t))
    log_norm = -0.5 * data.dim * torch.log(2 * math.pi * sigma.square()) - math.log(points.shape[0])
    density = torch.empty(xt.shape[0], dtype=torch.float64)
    for rows, logits in _iter_logits(xt, t, points, schedule):
        density[rows] = torch.logsumexp(logits, dim=1) + log_norm[rows]
    return _unbatch(density, single)


def target_gap(
    x0: Tensor, x1_index: Tensor | int, t: TimeLike, data: PointSet, schedule: Schedule = DEFAULT_SCHEDULE
) -> Tensor:
    """Per-dimension squared distance between the oracle and the conditional target."""
    points = _data_points(data)
    x0, single = _as_matrix(x0, data.dim)
    x1_index = torch.as_tensor(x1_index, dtype=torch.int64).flatten()
    if x1_index.numel() != x0.shape[0]:
        raise InvalidInputError(f"Expected {x0.shape[0]} row indices, got {x1_index.numel()}.")
    if (x1_index < 0).any() or (x1_index >= points.shape[0]).any():
        raise InvalidInputError(f"Row index out of range for a dataset of {points.shape[0]} points.")
    times = _as_times(t, x0.shape[0])
    x1 = points.index_select(0, x1_index)
    xt = interpolate(x0, x1, times, schedule)
    gap = (oracle_velocity(xt, times, data, schedule) - conditional_velocity(x0, x1, times, schedule)).square()
    return _unbatch(gap.mean(dim=1), single)


def draw_path_samples(
    data: PointSet, t: TimeLike, n: int, generator: torch.Generator, schedule: Schedule = DEFAULT_SCHEDULE
) -> PathSample:
    """Draw ``n`` samples (x0 ~ N(0, I), x1 uniform over rows, x_t by interpolation)."""
    points = _data_points(data)
    if n < 1:
        raise InvalidInputError(f"Number of path samples must be positive, got {n}.")
    times = _as_times(t, n)
    x0 = torch.randn(n, data.dim, generator=generator, dtype=torch.float64)
    x1_index = torch.randint(points.shape[0], (n,), generator=generator)
    xt = interpolate(x0, points.index_select(0, x1_index), times, schedule)
    return PathSample(x0=x0, x1_index=x1_index, t=times.clone(), xt=xt)
