from __future__ import annotations

import logging
import math
import os
from typing import Any, Callable

import click
import numpy as np

from purlab import __version__, control
from purlab.analysis import SpaceTimeField, bmo_p_norm, half_time_derivative, john_stromberg, norm_equivalence_band
from purlab.geometry import top_corkscrew
from purlab.io import write_grid, write_json
from purlab.pde import SolutionField, solve_parabolic
from purlab.plotters import make_figures, write_plots
from purlab.scenario import Scenario
from purlab.stages import BetaStage

from . import lab_options

logger = logging.getLogger(__name__)


def _common(func: Callable) -> Callable:
    for option in (
        lab_options.verbose,
        lab_options.threads,
        lab_options.out_dir,
        lab_options.seed,
        lab_options.config_file,
    ):
        func = option()(func)
    return func


def _setup(
    config_file: str | None,
    seed: int | None,
    out_dir: str | None,
    threads: int | None,
    verbose: int,
) -> Scenario:
    logging.basicConfig(level=max(logging.DEBUG, logging.WARNING - 10 * verbose),
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    scenario = Scenario() if config_file is None else Scenario.load_yaml(config_file)
    return scenario.override(seed=seed, out=out_dir, threads=threads)


def _run_and_emit(scenario: Scenario, until: str | None, figures: bool = False) -> control.ReportBundle:
    bundle = control.run_pipeline(scenario, until=until)
    paths = control.emit_report(bundle, scenario.out)
    if figures:
        paths += write_plots(make_figures(bundle.tables), scenario.out)
    click.echo(f"{bundle.outcome}: wrote {len(paths)} files to {scenario.out}")
    return bundle


def _write_solution(path: str, u: SolutionField) -> None:
    lat = u.lattice
    write_grid(path, u.values, (lat.dt, lat.h_rho, lat.hx), (float(lat.t[0]), 0.0, float(lat.x[0])))


@click.group()
@click.version_option(__version__)
def lab_cli() -> None:
    """Parabolic uniform rectifiability laboratory"""


@lab_cli.command(name="geometry")
@_common
def geometry_command(**kwargs: Any) -> int:
    """Structural constants, the top cube and its corkscrew poles"""
    scenario = _setup(**kwargs)
    artifacts = scenario.artifacts()
    constants, q0, psi = artifacts["constants"], artifacts["q0"], artifacts["psi"]
    poles = {}
    for sign, label in ((+1, "plus"), (-1, "minus")):
        pole = top_corkscrew(q0, psi, sign, constants)
        poles[label] = [pole.x0, *pole.x, pole.t]
    lo, hi = q0.bounds()
    data = {
        "constants": constants.ledger(),
        "q0": {"key": q0.key, "lo": lo, "hi": hi, "side": q0.side, "diameter": q0.diameter},
        "poles": poles,
        "lip": artifacts["domain"].lip.combined,
    }
    write_json(os.path.join(scenario.out, "geometry.json"), data)
    click.echo(f"Q0 {q0.key}, M0 {constants.m0:.4g}, kappa {constants.kappa:.4g}")
    return 0


@lab_cli.command(name="beta")
@_common
def beta_command(**kwargs: Any) -> int:
    """beta numbers and Carleson packing of the scenario graph"""
    scenario = _setup(**kwargs)
    bundle = control.run_pipeline(scenario, stages=[BetaStage("beta")])
    control.emit_report(bundle, scenario.out, ("json", "csv"))
    for label, block in bundle.summary["beta"].items():
        click.echo(f"{label}: packing {block['packing']:.4g}")
    return 0


@lab_cli.command(name="analysis")
@_common
def analysis_command(**kwargs: Any) -> int:
    """BMO norms and the John-Stromberg verdict of the half time derivatives of the graph"""
    scenario = _setup(**kwargs)
    psi = scenario.build_graph()
    f = SpaceTimeField.from_graph(psi)
    data: dict[str, Any] = {"norm_equivalence_band": norm_equivalence_band(psi)}
    for kind in ("Dt", "D12"):
        derivative = half_time_derivative(f, kind)
        bmo = bmo_p_norm(derivative)
        verdict = john_stromberg(derivative, max(bmo, 1e-12))
        data[kind] = {"bmo": bmo, "js_ratio": verdict.ratio, "js_minimal_m": verdict.minimal_m}
    write_json(os.path.join(scenario.out, "analysis.json"), data)
    click.echo(f"BMO of Dt psi {data['Dt']['bmo']:.4g}, band {data['norm_equivalence_band']:.4g}")
    return 0


@lab_cli.command(name="solve")
@_common
def solve_command(**kwargs: Any) -> int:
    """Solve the Dirichlet problem with data 1 on the top cube and 0 elsewhere"""
    scenario = _setup(**kwargs)
    artifacts = scenario.artifacts()
    q0 = artifacts["q0"]
    config = artifacts["solver_config"]
    lo, hi = q0.bounds()
    t_start = float(lo[-1]) - q0.side**2
    dt = artifacts["psi"].ht / config.time_refinement
    n_steps = int(math.ceil((float(hi[-1]) + q0.side**2 - t_start) / dt))

    def data(x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return q0.contains_points(x[..., None], t).astype(float)

    u = solve_parabolic(artifacts["domain"], artifacts["A"], data, "forward", config, t_start, n_steps)
    _write_solution(os.path.join(scenario.out, "solution.grid"), u)
    summary = {"min": float(u.values.min()), "max": float(u.values.max()), **u.metadata}
    write_json(os.path.join(scenario.out, "solve.json"), summary)
    click.echo(f"solution range [{summary['min']:.4g}, {summary['max']:.4g}]")
    return 0


@lab_cli.command(name="green")
@_common
def green_command(**kwargs: Any) -> int:
    """Green function with pole at the corkscrew above the top cube"""
    scenario = _setup(**kwargs)
    bundle = _run_and_emit(scenario, "green")
    _write_solution(os.path.join(scenario.out, "green.grid"), bundle.artifacts["green"])
    return 0


@lab_cli.command(name="measure")
@_common
def measure_command(**kwargs: Any) -> int:
    """Parabolic measure of the boundary cells, written as a density grid"""
    scenario = _setup(**kwargs)
    bundle = _run_and_emit(scenario, "green")
    measure = bundle.artifacts["measure"]
    ht = float(measure.t[1] - measure.t[0]) if measure.t.size > 1 else 1.0
    hx = float(measure.x[1] - measure.x[0]) if measure.x.size > 1 else 1.0
    write_grid(os.path.join(scenario.out, "density.grid"), measure.density, (ht, hx),
               (float(measure.t[0]), float(measure.x[0])))
    return 0


@lab_cli.command(name="ainfty")
@_common
def ainfty_command(**kwargs: Any) -> int:
    """Reverse Hoelder constant of the parabolic measure"""
    _run_and_emit(_setup(**kwargs), "ainfty")
    return 0


@lab_cli.command(name="corona")
@_common
def corona_command(**kwargs: Any) -> int:
    """Measure corona, nondegeneracy refinement and the good regimes"""
    _run_and_emit(_setup(**kwargs), "regimes")
    return 0


@lab_cli.command(name="levelset")
@_common
def levelset_command(**kwargs: Any) -> int:
    """Approximating graphs of the good regimes"""
    _run_and_emit(_setup(**kwargs), "levelset")
    return 0


@lab_cli.command(name="regularity")
@_common
def regularity_command(**kwargs: Any) -> int:
    """Case classification and John-Stromberg verdict of the approximating graphs"""
    _run_and_emit(_setup(**kwargs), "regularity")
    return 0


@lab_cli.command(name="pipeline")
@_common
@lab_options.figures()
def pipeline_command(figures: bool, **kwargs: Any) -> int:
    """Run every stage and write the full report"""
    _run_and_emit(_setup(**kwargs), None, figures)
    return 0


@lab_cli.command(name="report")
@click.argument("report_dir", type=click.Path(exists=True, file_okay=False))
@lab_options.figures()
@lab_options.verbose()
def report_command(report_dir: str, figures: bool, verbose: int) -> int:
    """Validate a written report, rewrite its text summary and optionally its figures"""
    logging.basicConfig(level=max(logging.DEBUG, logging.WARNING - 10 * verbose))
    bundle = control.load_report(report_dir)
    control.emit_report(bundle, report_dir, ("text",))
    if figures:
        write_plots(make_figures(bundle.tables), report_dir)
    click.echo(control.summary_text(bundle), nl=False)
    return 0
