"""Utility functions for the flowscope package."""

import logging
import logging.config
import os
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TypeVar

import numpy as np
import torch
from rich.console import Console
from rich.logging import RichHandler

from flowscope.errors import InvalidInputError

T = TypeVar("T")
R = TypeVar("R")


def get_dtype_from_string(dtype: str) -> torch.dtype:
    """Get the data type from a string."""
    dtypes_conversion = {
        "float32": torch.float32,
        "float64": torch.float64,
        "int32": torch.int32,
        "int64": torch.int64,
    }
    if dtype in dtypes_conversion:
        return dtypes_conversion[dtype]
    raise ValueError(f"Data type {dtype} not supported.")


def get_log_dir() -> str | None:
    """Get the directory for log files, or None when logging to console only."""
    log_dir = os.getenv("FLOWSCOPE_LOG_DIR")
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
    return log_dir or None


def derive_seed(seed: int, *keys: int) -> int:
    """Non-negative 63-bit seed that depends only on ``seed`` and ``keys``."""
    entropy = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) for k in keys)])
    return int(entropy.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def make_generator(seed: int, *keys: int) -> torch.Generator:
    """Create a CPU generator whose state depends only on ``seed`` and ``keys``.

    Keys identify a Monte Carlo cell (time index, replicate, ...), so a cell
    draws the same numbers whichever worker evaluates it.
    """
    return torch.Generator(device="cpu").manual_seed(derive_seed(seed, *keys))


def resolve_workers(workers: int | None) -> int:
    """Number of worker threads, defaulting to the available parallelism."""
    if workers is None or workers <= 0:
        return max(os.cpu_count() or 1, 1)
    return workers


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Apply ``fn`` to every item, keeping input order in the result."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def format_float(value: float) -> str:
    """Render a float with 17 significant digits (round-trip safe)."""
    return format(float(value), ".17g")


def parse_float_list(values: str | Sequence[float]) -> list[float]:
    """Parse ``"0.1,0.3"`` style lists coming from flags.

    Raises:
        InvalidInputError: If an entry is not a number.
    """
    items = [v for v in values.split(",") if v.strip()] if isinstance(values, str) else list(values)
    parsed = []
    for v in items:
        try:
            parsed.append(float(v))
        except (TypeError, ValueError) as err:
            raise InvalidInputError(f"'{str(v).strip()}' is not a number.") from err
    return parsed


class RichLogger(object):
    """A utility class to create a rich logger that logs to stderr and, optionally, to a file."""

    def __init__(self, level: str = "INFO") -> None:
        """Initialize the logger."""
        self.level = level
        self.logger = None

    def get_logger(self) -> logging.Logger:
        """Create a rich logger that logs to stderr and the configured log directory."""
        log_dir = get_log_dir()
        handlers = {
            "console": {
                "class": "logging.StreamHandler",
                "formatter": "minimal",
                "level": logging.DEBUG,
            },
        }
        if log_dir is not None:
            handlers["file"] = {
                "class": "logging.handlers.RotatingFileHandler",
                "filename": Path(log_dir, "flowscope.log"),
                "maxBytes": 10485760,  # 10 MB
                "backupCount": 10,
                "formatter": "detailed",
                "level": logging.INFO,
            }
        logging_config = {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "minimal": {"format": "%(message)s"},
                "detailed": {
                    "format": "%(levelname)s %(asctime)s [%(name)s:%(filename)s:%(funcName)s:%(lineno)d]\n%(message)s\n"
                },
            },
            "handlers": handlers,
            "loggers": {
                "flowscope": {
                    "handlers": list(handlers),
                    "level": self.level,
                    "propagate": False,
                },
            },
        }
        logging.config.dictConfig(logging_config)
        logger = logging.getLogger("flowscope")
        logger.handlers[0] = RichHandler(console=Console(stderr=True), markup=True)  # stdout is reserved for CSV
        logger.debug("Successfully create rich logger")
        return logger

    def info(self, message: str) -> None:
        """Log an info message."""
        self.logger = self.get_logger() if self.logger is None else self.logger
        self.logger.info(message)

    def debug(self, message: str) -> None:
        """Log a debug message."""
        self.logger = self.get_logger() if self.logger is None else self.logger
        self.logger.debug(message)

    def error(self, message: str) -> None:
        """Log an error message."""
        self.logger = self.get_logger() if self.logger is None else self.logger
        self.logger.error(message)

    def warning(self, message: str) -> None:
        """Log a warning message."""
        self.logger = self.get_logger() if self.logger is None else self.logger
        self.logger.warning(message)

    def critical(self, message: str) -> None:
        """Log a critical message."""
        self.logger = self.get_logger() if self.logger is None else self.logger
        self.logger.critical(message)

    def exception(self, message: str) -> None:
        """Log an exception message."""
        self.logger = self.get_logger() if self.logger is None else self.logger
        self.logger.exception(message)
