"""Render sweep series as standalone SVG line plots."""

import json
import os
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from flowscope.diagnostics import SweepSeries
from flowscope.errors import InvalidInputError
from flowscope.utils import RichLogger

logger = RichLogger(level=os.getenv("LOG_LEVEL", "INFO"))

MEAN_LINE_ID = "mean-line"
STD_BAND_ID = "std-band"
_SVG_RC = {"svg.hashsalt": "flowscope", "svg.fonttype": "path", "path.simplify": False}


def write_svg(series: SweepSeries, path: str | Path, xlabel: str = "t") -> None:
    """Plot the mean as a line with a shaded +/- std band; identical input gives identical bytes."""
    if len(series) == 0:
        raise InvalidInputError(f"Series '{series.name}' is empty.")
    axis, mean, std = series.axis.numpy(), series.mean.numpy(), series.std.numpy()
    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(6.0, 4.0))
        ax = fig.add_subplot()
        if (std > 0).any():
            band = ax.fill_between(axis, mean - std, mean + std, alpha=0.25, linewidth=0)
            band.set_gid(STD_BAND_ID)
        (line,) = ax.plot(axis, mean)
        line.set_gid(MEAN_LINE_ID)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(series.statistic_name or series.name)
        title = series.name
        if series.params:
            title += " " + json.dumps(series.params, sort_keys=True)
        ax.set_title(f"{title} (n_mc={series.n_mc}, seed={series.seed})", fontsize=8)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as err:
            raise InvalidInputError(f"Cannot write SVG to {path}: {err}") from err
    logger.debug(f"Wrote plot of '{series.name}' to {path}")
