"""Command line entry point: every experiment is a subcommand writing CSV (and optionally SVG)."""

import csv
import functools
import io
import os
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import click
import pytorch_lightning as pl
import torch
from click.core import ParameterSource
from dotenv import load_dotenv
from hydra.errors import ConfigCompositionException, OverrideParseException
from omegaconf import OmegaConf
from tabulate import tabulate

from flowscope import data as datasets
from flowscope.config import RunConfig, compose_run_config
from flowscope.diagnostics import (
    SweepSeries,
    capacity_loss_sweep,
    default_t_grid,
    dim_size_sweep,
    memorization_curve,
    read_sweep_csv,
    target_mse_sweep,
    top1_sweep,
    write_sweep_csv,
    write_sweep_rows,
)
from flowscope.errors import FlowscopeError, InvalidInputError
from flowscope.model import VelocityMLP, load_checkpoint, save_checkpoint
from flowscope.sampler import (
    GuidanceConfig,
    GuidedField,
    ModelField,
    OracleField,
    ResumeConfig,
    euler_sample,
    intermediate_predictions,
    predictions_to_csv,
    resume_sample,
    stagewise_sample,
    trajectory_to_csv,
)
from flowscope.schedule import Schedule, TimeGrid, fraction_below, shifted_grid, uniform_grid
from flowscope.train import TrainConfig, train, write_loss_history
from flowscope.utils import (
    RichLogger,
    derive_seed,
    format_float,
    get_dtype_from_string,
    make_generator,
    parse_float_list,
)
from flowscope.visualize import write_svg

load_dotenv()
logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))

_DEFAULTS = OmegaConf.structured(RunConfig)
_CONFIG_PARAMS: dict[str, str] = {}


def config_option(key: str, *decls: str, **kwargs) -> Callable:
    """A click option bound to a dotted ``RunConfig`` key, defaulting to the config default.

    Only explicitly given values (command line or environment) override the config file.
    """
    name = "cfg_" + key.replace(".", "_")
    _CONFIG_PARAMS[name] = key
    kwargs.setdefault("default", OmegaConf.select(_DEFAULTS, key))
    kwargs.setdefault("show_default", True)
    return click.option(*decls, name, **kwargs)


def run_options(fn: Callable) -> Callable:
    """Options shared by every subcommand."""
    options = [
        click.option(
            "--config",
            "config_file",
            type=click.Path(exists=True, dir_okay=False),
            default=None,
            help="File of section.key=value lines.",
        ),
        config_option("seed", "--seed", type=int, envvar="FLOWSCOPE_SEED", help="Base seed."),
        config_option("workers", "--workers", type=int, help="Worker threads; 0 uses all cores."),
        config_option("emit_svg", "--svg/--no-svg", help="Also write one SVG plot per series next to --out."),
    ]
    return functools.reduce(lambda f, option: option(f), reversed(options), fn)


def data_options(fn: Callable) -> Callable:
    """Options selecting or generating the dataset."""
    options = [
        config_option("data.path", "--data", type=click.Path(exists=True, dir_okay=False), help="Dataset file."),
        config_option("data.format", "--format", type=click.Choice(["csv", "binary"]), help="Dataset file format."),
        config_option(
            "data.kind", "--kind", type=click.Choice(["gaussian", "mixture", "ring"]), help="Generator without --data."
        ),
        config_option("data.n", "--n", type=int, help="Number of generated points."),
        config_option("data.d", "--d", type=int, help="Dimension of generated points."),
        config_option("data.classes", "--classes", type=int, help="Mixture components."),
        config_option("data.radius", "--radius", type=float, help="Scale of mixture centres."),
        config_option("data.spread", "--spread", type=float, help="Cluster standard deviation."),
        config_option("data.normalize", "--normalize/--no-normalize", help="Standardise every coordinate."),
    ]
    return functools.reduce(lambda f, option: option(f), reversed(options), fn)


def grid_options(fn: Callable) -> Callable:
    """Options of the sampling time grid."""
    options = [
        config_option("sampler.steps", "--steps", type=int, help="Number of Euler steps."),
        config_option("sampler.shift", "--shift", type=float, help="Timestep shift factor."),
        config_option("sampler.class_id", "--class", type=int, help="Class to sample; omit for the null class."),
    ]
    return functools.reduce(lambda f, option: option(f), reversed(options), fn)


def load_run_config(params: dict) -> RunConfig:
    """Compose the run config from the ``--config`` file and the explicitly given flags."""
    ctx = click.get_current_context()
    flags = {
        key: params[name]
        for name, key in _CONFIG_PARAMS.items()
        if name in params and ctx.get_parameter_source(name) not in (ParameterSource.DEFAULT, None)
    }
    cfg = compose_run_config(params.get("config_file"), flags)
    if cfg.data.path is not None and not Path(cfg.data.path).is_file():
        raise click.BadParameter(f"Dataset file '{cfg.data.path}' does not exist.", param_hint="data.path")
    return cfg


def load_dataset(cfg: RunConfig) -> datasets.Dataset:
    """Load ``data.path`` or generate a dataset from the ``data`` section."""
    section = cfg.data
    if section.path is not None:
        dataset = datasets.load(section.path, section.format)
    elif section.kind == "gaussian":
        dataset = datasets.gen_gaussian(section.n, section.d, cfg.seed)
    elif section.kind == "mixture":
        centers = section.radius * torch.randn(
            section.classes, section.d, generator=make_generator(cfg.seed, 1), dtype=torch.float64
        )
        dataset = datasets.gen_mixture(centers, section.spread, max(section.n // section.classes, 1), cfg.seed)
    elif section.kind == "ring":
        dataset = datasets.gen_ring(
            section.classes, section.radius, section.spread, max(section.n // section.classes, 1), cfg.seed
        )
    else:
        raise click.BadParameter(f"Unknown dataset kind '{section.kind}'.", param_hint="data.kind")
    return datasets.normalize(dataset) if section.normalize else dataset


def sampling_grid(cfg: RunConfig) -> TimeGrid:
    """Uniform grid, or a shifted one when ``sampler.shift`` differs from 1."""
    if cfg.sampler.shift == 1.0:
        return uniform_grid(cfg.sampler.steps)
    return shifted_grid(cfg.sampler.steps, cfg.sampler.shift)


def float_setting(value: str, hint: str) -> list[float]:
    """Parse a comma separated list setting; malformed entries are usage errors."""
    try:
        return parse_float_list(value)
    except InvalidInputError as err:
        raise click.BadParameter(f"Expected comma separated numbers, got '{value}': {err}", param_hint=hint) from err


def int_setting(value: str, hint: str) -> list[int]:
    """Parse a comma separated list of integers."""
    values = float_setting(value, hint)
    if not all(v.is_integer() for v in values):
        raise click.BadParameter(f"Expected comma separated integers, got '{value}'.", param_hint=hint)
    return [int(v) for v in values]


def sweep_times(cfg: RunConfig) -> list[float]:
    """Times listed in ``sweep.t_grid``, or the default sweep grid."""
    return float_setting(cfg.sweep.t_grid, "--t-grid") if cfg.sweep.t_grid else default_t_grid()


def emit_series(series: Sequence[SweepSeries], out: str | None, emit_svg: bool) -> None:
    """Write series to ``out`` (stdout when absent) and optionally plot each one."""
    if out is None:
        if emit_svg:
            raise click.UsageError("--svg needs --out to know where to put the plots.")
        buffer = io.StringIO()
        write_sweep_rows(series, buffer)
        click.echo(buffer.getvalue(), nl=False)
        return
    write_sweep_csv(series, out)
    if emit_svg:
        out = Path(out)
        for k, s in enumerate(series):
            write_svg(s, out.with_name(f"{out.stem}-{k}.svg"))


def model_dtype(cfg: RunConfig) -> torch.dtype:
    """Torch dtype named by ``model.dtype``."""
    return get_dtype_from_string(cfg.model.dtype)


def velocity_field(cfg: RunConfig, dataset: datasets.Dataset, checkpoint: str | None):
    """Build the oracle, model or guided field named by ``sampler.velocity``."""
    schedule = Schedule(eps_clamp=cfg.schedule.eps_clamp)
    if cfg.sampler.velocity == "oracle":
        return OracleField(dataset, schedule, cfg.sampler.class_conditional_oracle)
    if checkpoint is None:
        raise click.UsageError(f"--checkpoint is required for the '{cfg.sampler.velocity}' field.")
    model = load_checkpoint(checkpoint, model_dtype(cfg))
    if cfg.sampler.velocity == "guided":
        guidance = GuidanceConfig(cfg.guidance.scale, (cfg.guidance.lo, cfg.guidance.hi), cfg.guidance.enabled)
        return GuidedField(model, guidance)
    return ModelField(model)


def prior_batch(seed: int, count: int, dim: int) -> torch.Tensor:
    """One standard-normal prior draw per sample index."""
    return torch.stack(
        [torch.randn(dim, generator=make_generator(seed, j), dtype=torch.float64) for j in range(count)]
    )


@click.group()
def cli():
    """Analyse flow matching through its closed-form oracle velocity."""
    pass


@click.command("gen-data")
@run_options
@data_options
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output dataset file.")
def gen_data(out: str, **params) -> None:
    """Generate a dataset and save it as CSV or binary."""
    cfg = load_run_config(params)
    dataset = load_dataset(cfg)
    datasets.save(dataset, out, cfg.data.format)
    logger.info(f"Wrote {len(dataset)} points in {dataset.dim} dimensions to {out}")


@click.command("sweep-target-mse")
@run_options
@data_options
@config_option("sweep.n_mc", "--mc", type=int, help="Monte Carlo samples per time.")
@config_option("sweep.t_grid", "--t-grid", type=str, help="Comma separated times; default grid when omitted.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output CSV (stdout when omitted).")
def sweep_target_mse(out: str | None, **params) -> None:
    """Mean squared gap between the oracle and conditional targets over time."""
    cfg = load_run_config(params)
    dataset = load_dataset(cfg)
    schedule = Schedule(eps_clamp=cfg.schedule.eps_clamp)
    series = target_mse_sweep(dataset, sweep_times(cfg), cfg.sweep.n_mc, cfg.seed, schedule, cfg.workers)
    emit_series([series], out, cfg.emit_svg)


@click.command("sweep-top1")
@run_options
@data_options
@config_option("sweep.n_mc", "--mc", type=int, help="Monte Carlo samples per time.")
@config_option("sweep.t_grid", "--t-grid", type=str, help="Comma separated times; default grid when omitted.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output CSV (stdout when omitted).")
def sweep_top1(out: str | None, **params) -> None:
    """Mean top-1 posterior weight over time."""
    cfg = load_run_config(params)
    dataset = load_dataset(cfg)
    schedule = Schedule(eps_clamp=cfg.schedule.eps_clamp)
    series = top1_sweep(dataset, sweep_times(cfg), cfg.sweep.n_mc, cfg.seed, schedule, cfg.workers)
    emit_series([series], out, cfg.emit_svg)


@click.command("sweep-dims")
@run_options
@config_option("sweep.dims", "--dims", type=str, help="Comma separated dimensions.")
@config_option("sweep.sizes", "--sizes", type=str, help="Comma separated dataset sizes.")
@config_option("sweep.n_mc", "--mc", type=int, help="Monte Carlo samples per time.")
@config_option("sweep.t_grid", "--t-grid", type=str, help="Comma separated times; default grid when omitted.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output CSV (stdout when omitted).")
def sweep_dims(out: str | None, **params) -> None:
    """Top-1 sweeps over unit-Gaussian data for every (dimension, size) pair."""
    cfg = load_run_config(params)
    dims = int_setting(cfg.sweep.dims, "--dims")
    sizes = int_setting(cfg.sweep.sizes, "--sizes")
    schedule = Schedule(eps_clamp=cfg.schedule.eps_clamp)
    series = dim_size_sweep(dims, sizes, sweep_times(cfg), cfg.sweep.n_mc, cfg.seed, schedule, cfg.workers)
    emit_series(series, out, cfg.emit_svg)


@click.command("train")
@run_options
@data_options
@config_option("model.hidden", "--hidden", type=int, help="Hidden width.")
@config_option("model.time_dim", "--time-dim", type=int, help="Number of time features.")
@config_option("model.class_dim", "--class-dim", type=int, help="Class embedding size.")
@config_option("model.conditional", "--conditional/--unconditional", help="Condition on labels when present.")
@config_option("model.dtype", "--dtype", type=click.Choice(["float32", "float64"]), help="Parameter precision.")
@config_option("train.steps", "--steps", type=int, help="Optimiser steps.")
@config_option("train.batch_size", "--batch-size", type=int, help="Samples per step.")
@config_option("train.learning_rate", "--lr", type=float, help="Adam learning rate.")
@config_option("train.target", "--target", type=click.Choice(["cfm", "oracle"]), help="Regression target.")
@config_option("train.class_drop_prob", "--class-drop", type=float, help="Label dropout probability.")
@config_option("train.gradient_clip_val", "--clip", type=float, help="Max gradient norm; 0 disables clipping.")
@config_option("train.log_every", "--log-every", type=int, help="Steps between loss log lines.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint file.")
@click.option("--loss-csv", type=click.Path(dir_okay=False), default=None, help="Loss history CSV [<out>.loss.csv].")
def train_command(out: str, loss_csv: str | None, **params) -> None:
    """Train a velocity model and save the checkpoint and loss history."""
    cfg = load_run_config(params)
    dataset = load_dataset(cfg)
    num_classes = dataset.num_classes if cfg.model.conditional else 0
    pl.seed_everything(cfg.seed, verbose=False)
    model = VelocityMLP(
        dataset.dim,
        hidden=cfg.model.hidden,
        time_dim=cfg.model.time_dim,
        class_dim=cfg.model.class_dim,
        num_classes=num_classes,
    ).to(model_dtype(cfg))
    config = TrainConfig(
        steps=cfg.train.steps,
        batch_size=cfg.train.batch_size,
        learning_rate=cfg.train.learning_rate,
        adam_betas=tuple(cfg.train.adam_betas),
        class_drop_prob=cfg.train.class_drop_prob,
        target=cfg.train.target,
        seed=cfg.seed,
        gradient_clip_val=cfg.train.gradient_clip_val,
        log_every=cfg.train.log_every,
    )
    model, history = train(model, dataset, config, Schedule(eps_clamp=cfg.schedule.eps_clamp))
    save_checkpoint(model, out)
    write_loss_history(history, loss_csv or f"{out}.loss.csv")


@click.command("eval-loss")
@run_options
@data_options
@click.option(
    "--checkpoint",
    "checkpoints",
    multiple=True,
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Checkpoint to evaluate; repeat to compare capacities.",
)
@config_option("model.dtype", "--dtype", type=click.Choice(["float32", "float64"]), help="Evaluation precision.")
@config_option("sweep.n_mc", "--mc", type=int, help="Monte Carlo samples per time.")
@config_option("sweep.t_grid", "--t-grid", type=str, help="Comma separated times; default grid when omitted.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output CSV (stdout when omitted).")
def eval_loss(checkpoints: tuple[str, ...], out: str | None, **params) -> None:
    """Per-time model loss against the conditional and the oracle targets."""
    cfg = load_run_config(params)
    dataset = load_dataset(cfg)
    schedule = Schedule(eps_clamp=cfg.schedule.eps_clamp)
    models: dict[int, VelocityMLP] = {}
    for path in checkpoints:
        model = load_checkpoint(path, model_dtype(cfg))
        if model.hidden in models:
            raise click.BadParameter(f"Two checkpoints have hidden width {model.hidden}.", param_hint="--checkpoint")
        models[model.hidden] = model
    series = capacity_loss_sweep(
        models, dataset, sweep_times(cfg), cfg.sweep.n_mc, cfg.seed, schedule, cfg.workers, include_cond=True
    )
    if len(models) > 1:
        table = [
            [cond.params["hidden"], cond.mean.mean().item(), oracle.mean.mean().item()]
            for cond, oracle in zip(series[::2], series[1::2])
        ]
        headers = ["hidden", "mean cond loss", "mean oracle loss"]
        logger.info("Loss by capacity\n" + tabulate(table, headers=headers))
    emit_series(series, out, cfg.emit_svg)


@click.command("sample")
@run_options
@data_options
@grid_options
@config_option("sampler.velocity", "--field", type=click.Choice(["oracle", "model", "guided"]), help="Velocity field.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None, help="Model checkpoint.")
@click.option(
    "--stage2-checkpoint",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Model used after --stage-split.",
)
@config_option("sampler.stage_split", "--stage-split", type=float, help="Switch time of a stage-wise grid.")
@config_option("sampler.n1", "--n1", type=int, help="Steps before --stage-split.")
@config_option("sampler.n2", "--n2", type=int, help="Steps after --stage-split.")
@config_option("sampler.n_samples", "--n-samples", type=int, help="Number of trajectories.")
@config_option(
    "sampler.class_conditional_oracle",
    "--oracle-conditional/--oracle-unconditional",
    help="Restrict the oracle to the requested class.",
)
@config_option("model.dtype", "--dtype", type=click.Choice(["float32", "float64"]), help="Model precision.")
@config_option("guidance.enabled", "--guidance/--no-guidance", help="Apply classifier-free guidance.")
@config_option("guidance.scale", "--guidance-scale", type=float, help="Guidance factor.")
@config_option("guidance.lo", "--guidance-lo", type=float, help="Start of the guidance interval.")
@config_option("guidance.hi", "--guidance-hi", type=float, help="End of the guidance interval.")
@click.option("--terminal-only", is_flag=True, help="Write only the final state of each trajectory.")
@click.option(
    "--predictions",
    type=click.Path(dir_okay=False),
    default=None,
    help="Also write single-step predictions of t=1 from every state.",
)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Trajectory CSV.")
def sample(
    checkpoint: str | None,
    stage2_checkpoint: str | None,
    terminal_only: bool,
    predictions: str | None,
    out: str,
    **params,
) -> None:
    """Euler-sample trajectories from the oracle, a model, or a guided model."""
    cfg = load_run_config(params)
    dataset = load_dataset(cfg)
    field = velocity_field(cfg, dataset, checkpoint)
    priors = prior_batch(cfg.seed, cfg.sampler.n_samples, dataset.dim)
    class_id = cfg.sampler.class_id
    if cfg.sampler.stage_split is not None:
        stage2 = ModelField(load_checkpoint(stage2_checkpoint, model_dtype(cfg))) if stage2_checkpoint else field
        trajectory = stagewise_sample(
            field, stage2, cfg.sampler.stage_split, cfg.sampler.n1, cfg.sampler.n2, priors, class_id
        )
    else:
        trajectory = euler_sample(field, sampling_grid(cfg), priors, class_id)
    trajectory_to_csv([trajectory], out, terminal_only)
    if predictions is not None:
        predictions_to_csv(trajectory, intermediate_predictions(field, trajectory, class_id), predictions)
    _, distances = datasets.nearest_neighbor_batch(dataset, trajectory.terminal)
    logger.info(f"Mean nearest-neighbor distance / rms norm: {(distances.mean() / dataset.rms_norm).item():.4f}")


@click.command("mixed-sample")
@run_options
@data_options
@grid_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False), help="Model checkpoint.")
@config_option("model.dtype", "--dtype", type=click.Choice(["float32", "float64"]), help="Model precision.")
@config_option("sampler.t_switch", "--t-switch", type=str, help="Comma separated switch times.")
@config_option("sampler.n_seeds", "--n-seeds", type=int, help="Priors per switch time.")
@config_option(
    "sampler.class_conditional_oracle",
    "--oracle-conditional/--oracle-unconditional",
    help="Restrict the oracle to the requested class.",
)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output CSV (stdout when omitted).")
def mixed_sample_command(checkpoint: str, out: str | None, **params) -> None:
    """Memorization curve: oracle steps before t_switch, model steps afterwards."""
    cfg = load_run_config(params)
    dataset = load_dataset(cfg)
    schedule = Schedule(eps_clamp=cfg.schedule.eps_clamp)
    oracle = OracleField(dataset, schedule, cfg.sampler.class_conditional_oracle)
    model = ModelField(load_checkpoint(checkpoint, model_dtype(cfg)))
    curve = memorization_curve(
        oracle,
        model,
        dataset,
        float_setting(cfg.sampler.t_switch, "--t-switch"),
        cfg.sampler.n_seeds,
        sampling_grid(cfg),
        seed=cfg.seed,
        class_id=cfg.sampler.class_id,
        workers=cfg.workers,
    )
    emit_series([curve], out, cfg.emit_svg)


@click.command("resume")
@run_options
@data_options
@grid_options
@config_option("sampler.velocity", "--field", type=click.Choice(["oracle", "model", "guided"]), help="Velocity field.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None, help="Model checkpoint.")
@config_option("model.dtype", "--dtype", type=click.Choice(["float32", "float64"]), help="Model precision.")
@click.option(
    "--reference",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Dataset file holding the reference point.",
)
@click.option("--row", type=int, default=0, show_default=True, help="Row of the reference point.")
@config_option("sampler.t_resume", "--t-resume", type=float, help="Time at which sampling resumes.")
@config_option("sampler.n_seeds", "--n-seeds", type=int, help="Number of fresh priors.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Terminal-state CSV.")
def resume(checkpoint: str | None, reference: str, row: int, out: str, **params) -> None:
    """Re-noise a reference point to t_resume and integrate it back to t=1."""
    cfg = load_run_config(params)
    dataset = load_dataset(cfg)
    references = datasets.load(reference)
    if not 0 <= row < len(references):
        raise click.BadParameter(f"Row {row} outside a reference file of {len(references)} rows.", param_hint="--row")
    field = velocity_field(cfg, dataset, checkpoint)
    grid = sampling_grid(cfg)
    ref = references.points[row]
    configs = [ResumeConfig(cfg.sampler.t_resume, ref, derive_seed(cfg.seed, j)) for j in range(cfg.sampler.n_seeds)]
    trajectories = [resume_sample(field, config, grid, cfg.sampler.class_id) for config in configs]
    trajectory_to_csv(trajectories, out, terminal_only=True)
    terminals = torch.stack([t.terminal for t in trajectories])
    _, nearest = datasets.nearest_neighbor_batch(dataset, terminals)
    closer = ((terminals - ref).norm(dim=1) < nearest).double().mean().item()
    logger.info(f"{closer:.0%} of resumed samples are closer to the reference than to any training row")


@click.command("shift-table")
@run_options
@config_option("sampler.steps", "--steps", type=int, help="Number of sampling steps.")
@config_option("sampler.shifts", "--shifts", type=str, help="Comma separated shift factors.")
@config_option("sampler.threshold", "--threshold", type=float, help="Time threshold.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output CSV (stdout when omitted).")
def shift_table(out: str | None, **params) -> None:
    """Share of sampling steps spent below a threshold time for each shift factor."""
    cfg = load_run_config(params)
    rows = []
    for s in float_setting(cfg.sampler.shifts, "--shifts"):
        fraction = fraction_below(shifted_grid(cfg.sampler.steps, s), cfg.sampler.threshold)
        rows.append([s, cfg.sampler.steps, cfg.sampler.threshold, fraction, 100.0 * fraction])
    headers = ["shift", "steps", "threshold", "fraction_below", "percent"]
    logger.info("Steps below threshold\n" + tabulate(rows, headers=headers, floatfmt=".4g"))
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(headers)
    for s, steps, threshold, fraction, percent in rows:
        writer.writerow([format_float(s), steps, *(format_float(v) for v in (threshold, fraction, percent))])
    if out is None:
        click.echo(buffer.getvalue(), nl=False)
    else:
        Path(out).write_text(buffer.getvalue(), encoding="utf-8")


@click.command("plot")
@run_options
@click.option("--input", "input_csv", required=True, type=click.Path(exists=True, dir_okay=False), help="Sweep CSV.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Directory for the SVG files.")
def plot(input_csv: str, out_dir: str, **params) -> None:
    """Render every series of a sweep CSV as SVG."""
    load_run_config(params)
    os.makedirs(out_dir, exist_ok=True)
    series = read_sweep_csv(input_csv)
    for k, s in enumerate(series):
        write_svg(s, Path(out_dir, f"{s.name}-{k}.svg"))
    logger.info(f"Wrote {len(series)} plots to {out_dir}")


cli.add_command(gen_data)
cli.add_command(sweep_target_mse)
cli.add_command(sweep_top1)
cli.add_command(sweep_dims)
cli.add_command(train_command)
cli.add_command(eval_loss)
cli.add_command(sample)
cli.add_command(mixed_sample_command)
cli.add_command(resume)
cli.add_command(shift_table)
cli.add_command(plot)


def run(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and map the outcome to an exit code (0 ok, 1 usage or config error, 2 runtime error)."""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="flowscope", standalone_mode=False)
    except click.ClickException as err:
        err.show()
        return 1
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except (ConfigCompositionException, OverrideParseException) as err:
        click.echo(f"Error: invalid configuration: {err}", err=True)
        return 1
    except (FlowscopeError, ArithmeticError, RuntimeError, OSError) as err:
        logger.error(f"{type(err).__name__}: {err}")
        click.echo(f"Error: {err}", err=True)
        return 2
    return result if isinstance(result, int) else 0


def main() -> None:
    """Console script entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
