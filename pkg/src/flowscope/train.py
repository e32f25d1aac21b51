"""Train velocity models on CFM or oracle targets and verify their gradients."""

import copy
import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import dotenv
import pytorch_lightning as pl
import torch
from torch import Tensor
from torch.utils.data import DataLoader, IterableDataset

from flowscope.data import Dataset
from flowscope.errors import InvalidInputError
from flowscope.model import VelocityBatch, VelocityMLP, loss_and_grad
from flowscope.oracle import (
    DEFAULT_SCHEDULE,
    class_conditional_oracle_velocity,
    conditional_velocity,
    draw_path_samples,
    interpolate,
    oracle_velocity,
)
from flowscope.schedule import Schedule
from flowscope.utils import RichLogger, format_float

dotenv.load_dotenv()
logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))


class TargetKind(str, Enum):
    """Regression target used during training."""

    CFM = "cfm"
    ORACLE = "oracle"


@dataclass
class TrainConfig:
    """Training hyperparameters; times are always drawn from Uniform[0, 1]."""

    steps: int = 5000
    batch_size: int = 256
    learning_rate: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.995)
    class_drop_prob: float = 0.1
    target: TargetKind = TargetKind.CFM
    seed: int = 0
    gradient_clip_val: float = 1.0
    log_every: int = 500
    progress_bar: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate counts, rates and probabilities."""
        self.target = TargetKind(self.target)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.steps < 1 or self.batch_size < 1 or self.log_every < 1:
            raise InvalidInputError("steps, batch_size and log_every must be positive.")
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise InvalidInputError(f"learning_rate must be non-negative, got {self.learning_rate}.")
        if not 0.0 <= self.class_drop_prob <= 1.0:
            raise InvalidInputError(f"class_drop_prob must lie in [0, 1], got {self.class_drop_prob}.")
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise InvalidInputError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}.")
        if self.gradient_clip_val < 0:
            raise InvalidInputError(f"gradient_clip_val must be non-negative, got {self.gradient_clip_val}.")


class PathSampleDataset(IterableDataset):
    """Endless stream of training batches drawn from the path marginal.

    Args:
        data: Dataset supplying x1.
        batch_size: Rows per batch.
        target: CFM (x1 - x0) or oracle target.
        class_drop_prob: Probability of replacing a label by the null class.
        conditional: Whether batches carry class labels.
        seed: Seed of the sampling generator.
        schedule: Interpolation schedule.
    """

    def __init__(
        self,
        data: Dataset,
        batch_size: int,
        target: TargetKind,
        class_drop_prob: float,
        conditional: bool,
        seed: int,
        schedule: Schedule = DEFAULT_SCHEDULE,
    ) -> None:
        super().__init__()
        if conditional and data.labels is None:
            raise InvalidInputError("A class-conditional model needs a labeled dataset.")
        self.data = data
        self.batch_size = batch_size
        self.target = TargetKind(target)
        self.class_drop_prob = class_drop_prob
        self.conditional = conditional
        self.seed = seed
        self.schedule = schedule

    def sample_batch(self, generator: torch.Generator) -> VelocityBatch:
        """Draw (x0, x1, t), build x_t and the regression target."""
        n = self.batch_size
        x0 = torch.randn(n, self.data.dim, generator=generator, dtype=torch.float64)
        index = torch.randint(len(self.data), (n,), generator=generator)
        t = torch.rand(n, generator=generator, dtype=torch.float64)
        x1 = self.data.points.index_select(0, index)
        xt = interpolate(x0, x1, t, self.schedule)

        labels = torch.full((n,), -1, dtype=torch.long)
        if self.conditional:
            labels = self.data.labels.index_select(0, index)
            dropped = torch.rand(n, generator=generator) < self.class_drop_prob
            labels = torch.where(dropped, torch.full_like(labels, -1), labels)

        if self.target is TargetKind.CFM:
            target = conditional_velocity(x0, x1, t, self.schedule)
        elif self.conditional:
            # Oracle targets average over the whole class subset on every batch; cost grows linearly with N.
            target = class_conditional_oracle_velocity(xt, t, self.data, labels, self.schedule)
        else:
            target = oracle_velocity(xt, t, self.data, self.schedule)
        return VelocityBatch(xt=xt, t=t, class_ids=labels, target=target)

    def __iter__(self):
        """Yield batches forever; the trainer stops after ``max_steps``."""
        generator = torch.Generator().manual_seed(self.seed)
        while True:
            yield self.sample_batch(generator)


class PathSampleDataModule(pl.LightningDataModule):
    """Data module wrapping :class:`PathSampleDataset`."""

    def __init__(self, dataset: PathSampleDataset) -> None:
        super().__init__()
        self.train_dataset = dataset

    def train_dataloader(self) -> DataLoader:
        """Return train dataloader (batches are pre-assembled by the dataset)."""
        return DataLoader(self.train_dataset, batch_size=None, num_workers=0)


class LossLoggingCallback(pl.Callback):
    """Log the running mean training loss every ``log_every`` steps."""

    def __init__(self, log_every: int) -> None:
        super().__init__()
        self.log_every = log_every

    def on_train_batch_end(self, trainer, pl_module, outputs, batch, batch_idx) -> None:
        """Report the mean loss over the last ``log_every`` steps."""
        step = trainer.global_step
        if step % self.log_every == 0 and pl_module.loss_history:
            window = pl_module.loss_history[-self.log_every :]
            logger.info(f"step {step}: mean loss {sum(window) / len(window):.6f}")


def train(
    model: VelocityMLP, data: Dataset, config: TrainConfig, schedule: Schedule = DEFAULT_SCHEDULE
) -> tuple[VelocityMLP, list[float]]:
    """Fit ``model`` with one Adam update per sampled batch.

    Returns:
        The trained model (in eval mode) and the per-step loss history.
    """
    if data.dim != model.dim:
        raise InvalidInputError(f"Dataset dimension {data.dim} does not match model dimension {model.dim}.")
    logger.info(
        f"Training {config.target.value} target for {config.steps} steps "
        f"(batch {config.batch_size}, lr {config.learning_rate}, seed {config.seed})"
    )
    pl.seed_everything(config.seed, verbose=False)
    model.learning_rate = config.learning_rate
    model.betas = config.adam_betas
    model.loss_history = []
    dataset = PathSampleDataset(
        data,
        batch_size=config.batch_size,
        target=config.target,
        class_drop_prob=config.class_drop_prob,
        conditional=model.num_classes > 0,
        seed=config.seed,
        schedule=schedule,
    )
    trainer = pl.Trainer(
        max_steps=config.steps,
        accelerator="cpu",
        devices=1,
        logger=False,
        enable_checkpointing=False,
        enable_model_summary=False,
        enable_progress_bar=config.progress_bar,
        deterministic=True,
        gradient_clip_val=config.gradient_clip_val or None,
        callbacks=[LossLoggingCallback(config.log_every)],
    )
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", ".*does not have many workers.*")
        trainer.fit(model, datamodule=PathSampleDataModule(dataset))
    model.eval()
    logger.info(f"Training finished with final loss {model.loss_history[-1]:.6f}")
    return model, list(model.loss_history)


def write_loss_history(history: list[float], path: str | Path) -> None:
    """Write the loss history as CSV with columns (step, loss)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(history, start=1):
            writer.writerow([step, format_float(loss)])


def _flat_gradient(model: VelocityMLP, batch: VelocityBatch, chunk_size: int) -> Tensor:
    """Gradient of the batch-mean loss, accumulated over row chunks."""
    n = batch.xt.shape[0]
    total = None
    for start in range(0, n, chunk_size):
        rows = slice(start, min(start + chunk_size, n))
        chunk = VelocityBatch(batch.xt[rows], batch.t[rows], batch.class_ids[rows], batch.target[rows])
        _, grads = loss_and_grad(model, chunk)
        flat = torch.cat([g.flatten() for g in grads.values()]) * ((rows.stop - rows.start) / n)
        total = flat if total is None else total + flat
    return total


def fm_cfm_gradient_check(
    model: VelocityMLP,
    data: Dataset,
    t: float,
    n_mc: int,
    seed: int,
    schedule: Schedule = DEFAULT_SCHEDULE,
    chunk_size: int = 8192,
) -> float:
    """Cosine similarity between Monte Carlo gradients of the CFM and FM (oracle) losses.

    Both gradients use the same x_t draws at the fixed time ``t`` and the
    unconditional branch of the model.
    """
    if n_mc < 2:
        raise InvalidInputError(f"n_mc must be at least 2, got {n_mc}.")
    model64 = copy.deepcopy(model).double()
    sample = draw_path_samples(data, t, n_mc, torch.Generator().manual_seed(seed), schedule)
    x1 = data.points.index_select(0, sample.x1_index)
    null = torch.full((n_mc,), -1, dtype=torch.long)
    cfm_batch = VelocityBatch(sample.xt, sample.t, null, conditional_velocity(sample.x0, x1, sample.t, schedule))
    fm_batch = VelocityBatch(sample.xt, sample.t, null, oracle_velocity(sample.xt, sample.t, data, schedule))
    cfm_grad = _flat_gradient(model64, cfm_batch, chunk_size)
    fm_grad = _flat_gradient(model64, fm_batch, chunk_size)
    cosine = torch.nn.functional.cosine_similarity(cfm_grad, fm_grad, dim=0).item()
    logger.info(f"FM/CFM gradient cosine at t={t}: {cosine:.6f} (n_mc={n_mc})")
    return cosine


def gradient_check(
    model: VelocityMLP, batch: VelocityBatch, n_coords: int = 100, seed: int = 0, step: float = 1e-5
) -> dict[str, float]:
    """Maximum relative error of analytic gradients against central differences, per parameter.

    Runs in float64 on a copy of the model. The relative error uses an
    absolute floor of 1e-4 in the denominator so coordinates with vanishing
    gradient are compared in absolute terms.
    """
    model64 = copy.deepcopy(model).double()
    batch = VelocityBatch(batch.xt.double(), batch.t.double(), batch.class_ids, batch.target.double())
    _, grads = loss_and_grad(model64, batch)
    generator = torch.Generator().manual_seed(seed)
    errors = {}
    with torch.no_grad():
        for name, param in model64.named_parameters():
            flat = param.data.view(-1)
            coords = torch.randperm(flat.numel(), generator=generator)[:n_coords].tolist()
            analytic = grads[name].reshape(-1)
            worst = 0.0
            for c in coords:
                original = flat[c].item()
                flat[c] = original + step
                loss_plus = model64._shared_step(batch).item()
                flat[c] = original - step
                loss_minus = model64._shared_step(batch).item()
                flat[c] = original
                numeric = (loss_plus - loss_minus) / (2 * step)
                exact = analytic[c].item()
                worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-4))
            errors[name] = worst
    return errors
