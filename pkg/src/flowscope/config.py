"""Structured run configuration composed with Hydra from override files and command-line flags."""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional

from hydra import compose, initialize
from hydra.core.config_store import ConfigStore
from omegaconf import OmegaConf

from flowscope.utils import RichLogger

logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))

CONFIG_NAME = "flowscope_run"


@dataclass
class DataSection:
    """Where the training set comes from: a file, or a generator."""

    path: Optional[str] = None
    format: Optional[str] = None
    kind: str = "gaussian"
    n: int = 1400
    d: int = 64
    classes: int = 8
    radius: float = 2.0
    spread: float = 0.1
    normalize: bool = False


@dataclass
class ScheduleSection:
    """Time clamp of the rectified-flow coefficients."""

    eps_clamp: float = 1e-3


@dataclass
class SweepSection:
    """Monte Carlo sweep settings; list values are comma separated."""

    n_mc: int = 256
    t_grid: Optional[str] = None
    dims: str = "16,256,4096"
    sizes: str = "1000"


@dataclass
class TrainSection:
    """Optimiser and loop settings for ``flowscope train``."""

    steps: int = 5000
    batch_size: int = 256
    learning_rate: float = 1e-4
    adam_betas: List[float] = field(default_factory=lambda: [0.9, 0.995])
    class_drop_prob: float = 0.1
    target: str = "cfm"
    gradient_clip_val: float = 1.0
    log_every: int = 500


@dataclass
class ModelSection:
    """Velocity MLP widths and parameter dtype."""

    hidden: int = 256
    time_dim: int = 64
    class_dim: int = 32
    conditional: bool = True
    dtype: str = "float32"


@dataclass
class SamplerSection:
    """Grid, switch/resume times and sample counts."""

    velocity: str = "oracle"
    steps: int = 50
    shift: float = 1.0
    stage_split: Optional[float] = None
    n1: int = 25
    n2: int = 25
    n_samples: int = 8
    class_id: Optional[int] = None
    class_conditional_oracle: bool = True
    t_switch: str = "0,0.1,0.3,0.7,1.0"
    n_seeds: int = 50
    t_resume: float = 0.3
    shifts: str = "0.1,0.3,0.5,0.7,1.0,2.0,4.0"
    threshold: float = 0.2


@dataclass
class GuidanceSection:
    """Guidance scale and the time interval where it applies."""

    enabled: bool = False
    scale: float = 1.0
    lo: float = 0.0
    hi: float = 1.0


@dataclass
class RunConfig:
    """Complete configuration of one CLI invocation."""

    seed: int = 0
    workers: int = 0
    emit_svg: bool = False
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)


ConfigStore.instance().store(name=CONFIG_NAME, node=RunConfig)


def read_overrides(path: str | Path) -> list[str]:
    """Read ``section.key=value`` lines, skipping blank lines and ``#`` comments."""
    overrides = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            overrides.append(line)
    return overrides


def compose_run_config(config_file: str | Path | None = None, flags: dict[str, Any] | None = None) -> RunConfig:
    """Compose the run configuration: defaults, then the config file, then explicit flags.

    Raises:
        hydra.errors.OverrideParseException: A config line is not a valid override.
        hydra.errors.ConfigCompositionException: A config line names an unknown key or has a bad value.
    """
    overrides = read_overrides(config_file) if config_file is not None else []
    with initialize(version_base=None, config_path=None):
        cfg = compose(config_name=CONFIG_NAME, overrides=overrides)
    OmegaConf.set_struct(cfg, True)
    for key, value in (flags or {}).items():
        OmegaConf.update(cfg, key, value, merge=False)
    logger.debug(f"Run configuration:\n{OmegaConf.to_yaml(cfg)}")
    return OmegaConf.to_object(cfg)
