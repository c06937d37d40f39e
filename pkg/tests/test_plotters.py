import os

import pytest

from purlab.plotters import BetaVsScalePlotter, DensityPlotter, LabPlotter, make_figures, write_plots

BETA_ROWS = [
    {"graph": "psi", "radius": r, "beta_mean_square": 0.01 * r, "packing": 0.1}
    for r in (0.25, 0.125, 0.0625)
]
DENSITY_ROWS = [{"cube": f"2:{i},0", "omega": 0.1, "sigma": 0.1, "density": 1.0 + 0.1 * i} for i in range(4)]
CASE_ROWS = [
    {"regime": "3:3,20", "cube": "3:3,20", "case": "2", "side": "0.125", "localized": "0.1", "js_ratio": "0.2"},
    {"regime": "3:3,20", "cube": "4:6,40", "case": "1", "side": "0.0625", "localized": "", "js_ratio": ""},
]


def test_make_figures_skips_missing_tables() -> None:
    figures = make_figures({"beta_vs_scale": BETA_ROWS, "densities": [], "cases": []})
    assert list(figures) == ["beta_report_beta_vs_scale"]


def test_write_all_figures(tmp_path) -> None:
    tables = {"beta_vs_scale": BETA_ROWS, "densities": DENSITY_ROWS, "cases": CASE_ROWS}
    figures = make_figures(tables, prefix="run")
    assert set(figures) == {
        "beta_run_beta_vs_scale",
        "density_run_densities",
        "case_run_cases",
        "js_run_js_ratios",
    }
    paths = write_plots(figures, str(tmp_path))
    assert len(paths) == 4
    assert all(os.path.getsize(p) > 0 for p in paths)


def test_plotter_configuration() -> None:
    plotter = DensityPlotter("density", n_bins=5)
    assert plotter.config.n_bins == 5
    with pytest.raises(KeyError):
        plotter("run")
    assert not BetaVsScalePlotter("beta", log_y=False).config.log_y
    assert LabPlotter.get_plotter_class("DensityPlotter") is DensityPlotter
    with pytest.raises(KeyError):
        LabPlotter.get_plotter_class("NoSuchPlotter")
