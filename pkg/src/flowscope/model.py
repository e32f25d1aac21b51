"""Model definition."""

import math
import os
import struct
from pathlib import Path
from typing import NamedTuple, Protocol, runtime_checkable

import numpy as np
import torch
from pytorch_lightning import LightningModule
from torch import Tensor, nn

from flowscope.errors import FormatError, InvalidInputError
from flowscope.utils import RichLogger

logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))

CHECKPOINT_MAGIC = b"FSMD"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sBQQQQQ")

ClassIds = int | Tensor | None


@runtime_checkable
class VelocityField(Protocol):
    """Anything that maps (x_t, t, class) to a velocity of the same shape.

    ``class_id`` is an integer, None for the unconditional (null) branch, or a
    per-row tensor where -1 marks the null branch.
    """

    tag: str

    def __call__(self, xt: Tensor, t: float | Tensor, class_id: ClassIds = None) -> Tensor: ...  # noqa: D105


class VelocityBatch(NamedTuple):
    """One training batch: inputs, per-row times, class ids and target velocities."""

    xt: Tensor
    t: Tensor
    class_ids: Tensor
    target: Tensor


def time_features(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal features of t on a geometric frequency ladder."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t.unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class VelocityMLP(LightningModule):
    """Velocity model v(x_t, t, y): two hidden SiLU layers over [x_t, time features, class embedding].

    Args:
        dim: Data dimension D.
        hidden: Hidden width H (the capacity knob).
        time_dim: Number of sinusoidal time features.
        class_dim: Size of the class embedding.
        num_classes: Number of real classes; one extra null row serves the unconditional branch.
        learning_rate: Adam learning rate.
        betas: Adam betas.
    """

    def __init__(
        self,
        dim: int,
        hidden: int = 256,
        time_dim: int = 64,
        class_dim: int = 32,
        num_classes: int = 0,
        learning_rate: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.995),
    ) -> None:
        """Initialize layers; the output layer starts at zero so the initial field is 0."""
        super().__init__()
        if dim < 1 or hidden < 1 or class_dim < 1 or num_classes < 0:
            raise InvalidInputError("dim, hidden and class_dim must be positive and num_classes non-negative.")
        if time_dim < 2 or time_dim % 2:
            raise InvalidInputError(f"time_dim must be a positive even number, got {time_dim}.")
        self.save_hyperparameters(logger=False)
        self.dim = dim
        self.hidden = hidden
        self.time_dim = time_dim
        self.class_dim = class_dim
        self.num_classes = num_classes
        self.learning_rate = learning_rate
        self.betas = tuple(betas)

        self.class_embedding = nn.Embedding(num_classes + 1, class_dim)
        self.net = nn.Sequential(
            nn.Linear(dim + time_dim + class_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, dim),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.loss_history: list[float] = []

    @property
    def null_class(self) -> int:
        """Row of the class table used when no class is given."""
        return self.num_classes

    def _class_index(self, class_id: ClassIds, batch: int) -> Tensor:
        if class_id is None:
            return torch.full((batch,), self.null_class, dtype=torch.long, device=self.device)
        ids = torch.as_tensor(class_id, dtype=torch.long, device=self.device).flatten()
        if ids.numel() == 1:
            ids = ids.expand(batch)
        if ids.numel() != batch:
            raise InvalidInputError(f"Expected {batch} class ids, got {ids.numel()}.")
        ids = torch.where(ids < 0, torch.full_like(ids, self.null_class), ids)
        if (ids > self.null_class).any() or (isinstance(class_id, int) and class_id >= self.num_classes):
            raise InvalidInputError(f"Unknown class id {class_id}; model has {self.num_classes} classes.")
        return ids

    def forward(self, xt: Tensor, t: float | Tensor, class_id: ClassIds = None) -> Tensor:
        """Predict the velocity at (x_t, t) for the given class (null class when absent)."""
        xt = torch.as_tensor(xt)
        single = xt.ndim == 1
        x = xt.unsqueeze(0) if single else xt
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise InvalidInputError(f"Input has shape {tuple(xt.shape)}, model expects dimension {self.dim}.")
        x = x.to(dtype=self.dtype, device=self.device)
        times = torch.as_tensor(t, dtype=self.dtype, device=self.device).flatten()
        if times.numel() == 1:
            times = times.expand(x.shape[0])
        if times.numel() != x.shape[0]:
            raise InvalidInputError(f"Expected a scalar time or {x.shape[0]} times, got {times.numel()}.")
        features = torch.cat(
            [x, time_features(times, self.time_dim), self.class_embedding(self._class_index(class_id, x.shape[0]))],
            dim=1,
        )
        out = self.net(features)
        return out.squeeze(0) if single else out

    def _shared_step(self, batch: VelocityBatch) -> Tensor:
        """Mean squared error over batch and dimensions."""
        prediction = self(batch.xt, batch.t, batch.class_ids)
        return nn.functional.mse_loss(prediction, batch.target.to(prediction.dtype))

    def training_step(self, batch: VelocityBatch) -> Tensor:
        """Training step."""
        loss = self._shared_step(batch)
        self.loss_history.append(loss.detach().item())
        self.log("train_loss", loss, prog_bar=True)
        return loss

    def configure_optimizers(self):
        """Adam with a constant learning rate."""
        return torch.optim.Adam(self.parameters(), lr=self.learning_rate, betas=self.betas)


def loss_and_grad(model: VelocityMLP, batch: VelocityBatch) -> tuple[float, dict[str, Tensor]]:
    """Batch MSE and its gradient with respect to every named parameter."""
    if batch.xt.shape[0] == 0:
        raise InvalidInputError("Cannot compute a loss over an empty batch.")
    if not torch.isfinite(batch.target).all():
        raise InvalidInputError("Target velocities must be finite.")
    names, params = zip(*model.named_parameters())
    with torch.enable_grad():
        loss = model._shared_step(batch)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    return loss.item(), {
        name: torch.zeros_like(param) if grad is None else grad for name, param, grad in zip(names, params, grads)
    }


def save_checkpoint(model: VelocityMLP, path: str | Path) -> None:
    """Write the model in the FSMD container (header, then float64 tensors in declaration order)."""
    with open(path, "wb") as f:
        f.write(
            _CHECKPOINT_HEADER.pack(
                CHECKPOINT_MAGIC,
                CHECKPOINT_VERSION,
                model.dim,
                model.hidden,
                model.time_dim,
                model.class_dim,
                model.num_classes,
            )
        )
        for tensor in model.state_dict().values():
            f.write(tensor.detach().cpu().numpy().astype("<f8").tobytes())
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> VelocityMLP:
    """Read a model written by :func:`save_checkpoint`."""
    payload = Path(path).read_bytes()
    if len(payload) < _CHECKPOINT_HEADER.size:
        raise FormatError(f"Truncated checkpoint header in {path}")
    magic, version, dim, hidden, time_dim, class_dim, num_classes = _CHECKPOINT_HEADER.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"Bad magic {magic!r} in {path}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version} in {path}")
    try:
        model = VelocityMLP(dim, hidden=hidden, time_dim=time_dim, class_dim=class_dim, num_classes=num_classes)
    except InvalidInputError as err:
        raise FormatError(f"Invalid architecture header in {path}: {err}") from err

    state, offset = {}, _CHECKPOINT_HEADER.size
    for record, (name, tensor) in enumerate(model.state_dict().items(), start=1):
        count = tensor.numel()
        if offset + 8 * count > len(payload):
            raise FormatError(f"Truncated parameter '{name}' in {path}", row=record)
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        state[name] = torch.from_numpy(values.astype(np.float64)).reshape(tensor.shape)
        offset += 8 * count
    if offset != len(payload):
        raise FormatError(f"Checkpoint {path} has {len(payload) - offset} trailing bytes")
    model.load_state_dict(state)
    return model.to(dtype).eval()
