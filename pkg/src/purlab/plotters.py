"""matplotlib figures of the plot-ready report tables"""

from __future__ import annotations

import logging
import os
from typing import Any

import numpy as np
from ceci.config import StageParameter
from matplotlib import pyplot as plt
from matplotlib.figure import Figure

from .stage import Configurable

logger = logging.getLogger(__name__)


def _column(rows: list[dict[str, Any]], key: str) -> np.ndarray:
    """A table column as floats, with empty cells as nan"""
    out = []
    for row in rows:
        value = row.get(key)
        out.append(np.nan if value in (None, "") else float(value))
    return np.array(out, dtype=float)


class LabPlotter(Configurable):
    """ Base class for the report figures

    The main function in this class is:
    __call__(prefix: str, **kwargs: Any) -> dict[str, Figure]

    The tables of a report bundle are passed in via the kwargs, each as a
    list of row dicts.  Sub-classes implement

    _make_plots(self, prefix: str, **kwargs: Any) -> dict[str, Figure]
    """

    plotter_classes: dict[str, type] = {}

    def __init_subclass__(cls) -> None:
        cls.plotter_classes[cls.__name__] = cls

    @classmethod
    def get_plotter_class(cls, name: str) -> type:
        try:
            return cls.plotter_classes[name]
        except KeyError as msg:
            raise KeyError(
                f"Could not find plotter class {name} in {list(cls.plotter_classes.keys())}"
            ) from msg

    def __call__(self, prefix: str, **kwargs: Any) -> dict[str, Figure]:
        self._validate_inputs(**kwargs)
        return self._make_plots(prefix, **kwargs)

    def _make_full_plot_name(self, prefix: str, plot_name: str) -> str:
        return f"{self._name}_{prefix}_{plot_name}"

    def _make_plots(self, prefix: str, **kwargs: Any) -> dict[str, Figure]:
        raise NotImplementedError()

    @staticmethod
    def write_plots(
        fig_dict: dict[str, Figure],
        outdir: str = ".",
        figtype: str = "png",
    ) -> list[str]:
        """ Write several figures to disk and close them

        Parameters
        ----------
        fig_dict: dict[str, Figure]
            Dictionary of figures to write

        outdir: str
            Directory to write figures in

        figtype: str
            Type of figures to write, e.g., png, pdf...
        """
        os.makedirs(outdir, exist_ok=True)
        paths = []
        for key, val in fig_dict.items():
            out_path = os.path.join(outdir, f"{key}.{figtype}")
            val.savefig(out_path)
            plt.close(val)
            paths.append(out_path)
        return paths


class BetaVsScalePlotter(LabPlotter):
    """Mean square beta against the radius, one line per graph"""

    config_options: dict[str, StageParameter] = dict(
        log_y=StageParameter(bool, True, msg="Logarithmic vertical axis"),
    )

    _inputs: dict = {
        "beta_vs_scale": list,
    }

    def _make_plots(self, prefix: str, **kwargs: Any) -> dict[str, Figure]:
        rows = kwargs["beta_vs_scale"]
        figure, axes = plt.subplots()
        for label in sorted({row["graph"] for row in rows}):
            sel = [row for row in rows if row["graph"] == label]
            axes.plot(_column(sel, "radius"), _column(sel, "beta_mean_square"), "o-", label=label)
        axes.set_xscale("log")
        if self.config.log_y:
            axes.set_yscale("log")
        axes.set_xlabel("radius r")
        axes.set_ylabel("mean beta^2")
        if rows:
            axes.legend()
        return {self._make_full_plot_name(prefix, "beta_vs_scale"): figure}


class DensityPlotter(LabPlotter):
    """Histogram of the parabolic measure density over the window cubes"""

    config_options: dict[str, StageParameter] = dict(
        n_bins=StageParameter(int, 30, fmt="%i", msg="Number of bins"),
    )

    _inputs: dict = {
        "densities": list,
    }

    def _make_plots(self, prefix: str, **kwargs: Any) -> dict[str, Figure]:
        density = _column(kwargs["densities"], "density")
        density = density[np.isfinite(density)]
        figure, axes = plt.subplots()
        axes.hist(density, bins=self.config.n_bins)
        axes.set_xlabel("omega(Q) / sigma(Q)")
        axes.set_ylabel("cubes")
        return {self._make_full_plot_name(prefix, "densities"): figure}


class CaseHistogramPlotter(LabPlotter):
    """Count of window cubes per case and generation side"""

    _inputs: dict = {
        "cases": list,
    }

    def _make_plots(self, prefix: str, **kwargs: Any) -> dict[str, Figure]:
        rows = kwargs["cases"]
        cases = _column(rows, "case")
        sides = _column(rows, "side")
        figure, axes = plt.subplots()
        bottom = np.zeros(4)
        for side in sorted(set(sides[np.isfinite(sides)]), reverse=True):
            counts = np.array([np.sum((cases == c) & (sides == side)) for c in (1, 2, 3, 4)], dtype=float)
            axes.bar([1, 2, 3, 4], counts, bottom=bottom, label=f"l(Q) = {side:.4g}")
            bottom += counts
        axes.set_xticks([1, 2, 3, 4])
        axes.set_xlabel("case")
        axes.set_ylabel("cubes")
        if rows:
            axes.legend()
        return {self._make_full_plot_name(prefix, "cases"): figure}


class JohnStrombergPlotter(LabPlotter):
    """Per-cube John-Stromberg ratios with the 1/3 threshold"""

    _inputs: dict = {
        "cases": list,
    }

    def _make_plots(self, prefix: str, **kwargs: Any) -> dict[str, Figure]:
        rows = kwargs["cases"]
        ratio = _column(rows, "js_ratio")
        sides = _column(rows, "side")
        figure, axes = plt.subplots()
        keep = np.isfinite(ratio)
        axes.scatter(sides[keep], ratio[keep], s=8)
        axes.axhline(1.0 / 3.0, color="k", linestyle="--")
        axes.set_xscale("log")
        axes.set_xlabel("l(Q)")
        axes.set_ylabel("level-set mass ratio")
        return {self._make_full_plot_name(prefix, "js_ratios"): figure}


def make_figures(tables: dict[str, list[dict[str, Any]]], prefix: str = "report") -> dict[str, Figure]:
    """Every figure whose table is present"""
    plotters: list[LabPlotter] = [
        BetaVsScalePlotter("beta"),
        DensityPlotter("density"),
        CaseHistogramPlotter("case"),
        JohnStrombergPlotter("js"),
    ]
    out: dict[str, Figure] = {}
    for plotter in plotters:
        needed = list(plotter._inputs)
        if all(tables.get(key) for key in needed):
            out.update(plotter(prefix, **{key: tables[key] for key in needed}))
        else:
            logger.debug("skipping %s, no rows in %s", plotter.name, needed)
    return out


write_plots = LabPlotter.write_plots
