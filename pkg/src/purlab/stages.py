"""The pipeline stages of a laboratory run

Each stage takes the artifacts of the earlier stages as keyword inputs and
returns new artifacts, a summary block and plot-ready table rows.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Any

import numpy as np
from ceci.config import StageParameter

from .corona import (
    CoronaDecomposition,
    StoppingTimeRegime,
    measure_corona,
    nondegeneracy_refinement,
    split_regimes,
    sweep_m_prime,
    window_cubes,
)
from .geometry import DyadicCube, StructuralConstants, top_corkscrew
from .graph import GraphDomain, GraphFunction, beta_field, carleson_packing_norm
from .levelset import (
    build_psi_s,
    level_set_map,
    regime_green,
    regularity_report,
    smoothed_family,
    transference_check,
)
from .pde import (
    BoundaryMeasure,
    CoefficientField,
    SolverConfig,
    check_coefficients,
    normalized_green,
    parabolic_measure,
    reverse_holder,
)
from .scenario import Scenario
from .stage import LabStage, StageResult

logger = logging.getLogger(__name__)

NO_GOOD_REGIMES = "no good regimes"


class CoefficientCheckStage(LabStage):
    """Ellipticity and Carleson conditions of the coefficients"""

    config_options: dict[str, StageParameter] = dict(
        n_steps=StageParameter(int, 16, fmt="%i", msg="Time steps of the sampling lattice"),
    )

    _inputs: dict = {
        "domain": GraphDomain,
        "A": CoefficientField,
        "solver_config": SolverConfig,
    }

    def _run(self, **kwargs: Any) -> StageResult:
        report = check_coefficients(kwargs["domain"], kwargs["A"], kwargs["solver_config"],
                                    n_steps=self.config.n_steps)
        return StageResult(artifacts={"coefficient_report": report}, summary=dataclasses.asdict(report))


class GreenStage(LabStage):
    """Parabolic measure and adjoint Green function with pole at the corkscrew above Q0"""

    config_options: dict[str, StageParameter] = dict(
        margin=StageParameter(float, 1.0, fmt="%0.2f", msg="Time margin before Q0 in units of l(Q0)^2"),
    )

    _inputs: dict = {
        "domain": GraphDomain,
        "A": CoefficientField,
        "constants": StructuralConstants,
        "solver_config": SolverConfig,
        "q0": DyadicCube,
    }

    def _run(self, **kwargs: Any) -> StageResult:
        domain: GraphDomain = kwargs["domain"]
        config: SolverConfig = kwargs["solver_config"]
        q0: DyadicCube = kwargs["q0"]
        pole = top_corkscrew(q0, domain.psi, +1, kwargs["constants"])
        lo, _ = q0.bounds()
        dt = domain.psi.ht / config.time_refinement
        n_steps = int(math.ceil((pole.t - (lo[-1] - self.config.margin * q0.side**2)) / dt))
        measure, green = parabolic_measure(domain, kwargs["A"], pole, config, n_steps, with_green=True)
        summary = {
            "pole": [pole.x0, pole.x[0], pole.t],
            "n_steps": n_steps,
            "total_mass": measure.total(),
            "initial_mass": float(measure.initial.sum()),
            "omega_q0": measure.measure(q0),
            "sigma_q0": measure.sigma_of(q0),
        }
        return StageResult(artifacts={"measure": measure, "green": green}, summary=summary)


class AinftyStage(LabStage):
    """Reverse Hoelder constant of the parabolic measure over the window below Q0"""

    config_options: dict[str, StageParameter] = dict(
        depth=StageParameter(int, 2, fmt="%i", msg="Generations below Q0"),
        q=StageParameter(float, 2.0, fmt="%0.2f", msg="Reverse Hoelder exponent"),
    )

    _inputs: dict = {
        "measure": BoundaryMeasure,
        "q0": DyadicCube,
        "constants": StructuralConstants,
        "psi": GraphFunction,
    }

    def _run(self, **kwargs: Any) -> StageResult:
        measure: BoundaryMeasure = kwargs["measure"]
        cubes = window_cubes(kwargs["q0"], self.config.depth)
        report = reverse_holder(measure, self.config.q, cubes, kwargs["constants"], kwargs["psi"])
        rows = []
        for cube in cubes:
            sigma = measure.sigma_of(cube)
            omega = measure.measure(cube)
            rows.append({"cube": cube.key, "omega": omega, "sigma": sigma,
                         "density": omega / sigma if sigma > 0 else math.nan})
        summary = {
            "c_star": report.c_star,
            "q": report.q,
            "doubling": list(report.doubling),
            "pole_in_parabola": all(report.pole_in_parabola.values()) if report.pole_in_parabola else None,
        }
        return StageResult(summary=summary, tables={"densities": rows})


class MeasureCoronaStage(LabStage):
    """Corona decomposition of the window below Q0 driven by the parabolic measure"""

    config_options: dict[str, StageParameter] = dict(
        depth=StageParameter(int, 2, fmt="%i", msg="Generations below Q0"),
        m_prime=StageParameter(float, 4.0, fmt="%0.2f", msg="Density comparability M'"),
        sweep=StageParameter(list, [], msg="M' values to sweep for the contact bound"),
    )

    _inputs: dict = {
        "measure": BoundaryMeasure,
        "q0": DyadicCube,
    }

    def _run(self, **kwargs: Any) -> StageResult:
        measure: BoundaryMeasure = kwargs["measure"]
        q0: DyadicCube = kwargs["q0"]
        corona = measure_corona(q0, measure, self.config.m_prime, self.config.depth)
        summary = corona.to_dict()
        summary["n_regimes"] = len(corona.regimes)
        summary["partition"] = corona.is_partition()
        if self.config.sweep:
            best, fractions = sweep_m_prime(q0, measure, self.config.depth, [float(m) for m in self.config.sweep])
            summary["sweep"] = {"minimal_m_prime": best, "contact_fractions": {str(k): v for k, v in fractions.items()}}
        return StageResult(artifacts={"corona": corona}, summary=summary)


class RefinementStage(LabStage):
    """Nondegeneracy refinement of the largest corona regimes with their normalized Green functions"""

    config_options: dict[str, StageParameter] = dict(
        max_regimes=StageParameter(int, 1, fmt="%i", msg="Regimes to refine, largest first"),
        eps=StageParameter(float, -1.0, fmt="%0.3g", msg="Oscillation threshold, negative for the default"),
        excluded_generations=StageParameter(int, 1, fmt="%i", msg="Top generations always marked bad"),
        margin=StageParameter(float, 1.0, fmt="%0.2f", msg="Green function time margin in units of l^2"),
    )

    _inputs: dict = {
        "corona": CoronaDecomposition,
        "domain": GraphDomain,
        "A": CoefficientField,
        "constants": StructuralConstants,
        "solver_config": SolverConfig,
    }

    def _run(self, **kwargs: Any) -> StageResult:
        corona: CoronaDecomposition = kwargs["corona"]
        constants: StructuralConstants = kwargs["constants"]
        eps = self.config.eps if self.config.eps >= 0 else None
        regimes = sorted(corona.regimes, key=lambda r: (-len(r), r.top))[: self.config.max_regimes]
        refinements = []
        summary: dict[str, Any] = {}
        for regime in regimes:
            green = normalized_green(kwargs["domain"], kwargs["A"], regime.top, constants,
                                     kwargs["solver_config"], self.config.margin)
            refinement = nondegeneracy_refinement(regime, green.u, constants, eps,
                                                  self.config.excluded_generations)
            refinements.append((regime, refinement, green))
            summary[regime.top.key] = {
                "good": len(refinement.good),
                "bad": len(refinement.bad),
                "skipped": len(refinement.skipped),
                "eps": refinement.eps,
                "min_du0": refinement.min_du0,
                "nondegenerate": refinement.nondegenerate,
                "bad_packing": refinement.bad_packing.max_ratio,
                "M1": green.report.get("M1"),
                "M2": green.report.get("M2"),
            }
        return StageResult(artifacts={"refinements": refinements}, summary=summary)


class RegimeStage(LabStage):
    """Split the good cubes of every refined regime into stopping-time regimes"""

    _inputs: dict = {
        "refinements": list,
    }

    def _run(self, **kwargs: Any) -> StageResult:
        regimes: list[tuple[StoppingTimeRegime, float]] = []
        for _, refinement, green in kwargs["refinements"]:
            m2 = float(green.report.get("M2", math.inf))
            regimes.extend((regime, m2) for regime in split_regimes(refinement.good))
        summary: dict[str, Any] = {"n_regimes": len(regimes),
                                   "tops": [regime.top.key for regime, _ in regimes]}
        if not regimes:
            summary["outcome"] = NO_GOOD_REGIMES
            logger.warning("refinement left no good regimes")
        return StageResult(artifacts={"regimes": regimes}, summary=summary)


class LevelSetStage(LabStage):
    """Approximating graphs psi_S of the largest good regimes"""

    config_options: dict[str, StageParameter] = dict(
        max_regimes=StageParameter(int, 1, fmt="%i", msg="Regimes to build, largest first"),
        pole_lag=StageParameter(float, 4.0, fmt="%0.2f", msg="Pole lag after 4Q(S) in units of l^2"),
        max_failure_rate=StageParameter(float, 0.01, fmt="%0.3f", msg="Accepted share of failed level solves"),
        smoothed=StageParameter(bool, True, msg="Also build the smoothed family"),
        gamma=StageParameter(float, -1.0, fmt="%0.4g", msg="Smoothing aperture gamma, negative for the default"),
        transference=StageParameter(bool, False, msg="Also run the transference check"),
        strict=StageParameter(bool, True, msg="Raise on a failed regime instead of recording it"),
    )

    _inputs: dict = {
        "regimes": list,
        "domain": GraphDomain,
        "A": CoefficientField,
        "constants": StructuralConstants,
        "solver_config": SolverConfig,
    }

    def _run(self, **kwargs: Any) -> StageResult:
        regimes = kwargs["regimes"]
        if not regimes:
            return StageResult(artifacts={"approx_graphs": []}, summary={"skipped": NO_GOOD_REGIMES})
        domain: GraphDomain = kwargs["domain"]
        constants: StructuralConstants = kwargs["constants"]
        chosen = sorted(regimes, key=lambda item: (-len(item[0]), item[0].top))[: self.config.max_regimes]
        approx_graphs = []
        summary: dict[str, Any] = {}
        for regime, m2 in chosen:
            try:
                u = regime_green(domain, kwargs["A"], regime, constants, kwargs["solver_config"],
                                 self.config.pole_lag)
                approx = build_psi_s(regime, u, domain.psi, constants, m2=m2, normalize=True,
                                     max_failure_rate=self.config.max_failure_rate)
            except ValueError as err:
                if self.config.strict:
                    raise
                summary[regime.top.key] = {"error": str(err)}
                continue
            block = approx.to_dict()
            if self.config.smoothed:
                family = smoothed_family(approx, gamma=self.config.gamma if self.config.gamma > 0 else None)
                block["smoothed"] = {
                    "gamma": family.gamma,
                    "margin": family.margin,
                    "zero_agreement": family.zero_agreement,
                    "pointwise_bound": family.pointwise_bound,
                    **{f"square_{k}": v for k, v in family.square_integrals.items()},
                    **{f"ph_{k}": v for k, v in family.ph_square.items()},
                }
            if self.config.transference:
                lmap = level_set_map(regime, approx.level, domain.psi, constants)
                report = transference_check(lmap, rng=kwargs.get("rng"))
                block["transference"] = {"rel_error": report.rel_error, "bound": report.bound_constant,
                                         "monotone": lmap.monotone()}
            summary[regime.top.key] = block
            approx_graphs.append(approx)
        return StageResult(artifacts={"approx_graphs": approx_graphs}, summary=summary)


class RegularityStage(LabStage):
    """Case classification and John-Stromberg verdict for every psi_S"""

    config_options: dict[str, StageParameter] = dict(
        depth=StageParameter(int, 2, fmt="%i", msg="Generations below Q(S) to classify"),
        max_pairings=StageParameter(int, 8, fmt="%i", msg="Case-1 pairing decompositions per graph"),
    )

    _inputs: dict = {
        "approx_graphs": list,
        "constants": StructuralConstants,
    }

    def _run(self, **kwargs: Any) -> StageResult:
        approx_graphs = kwargs["approx_graphs"]
        if not approx_graphs:
            return StageResult(summary={"skipped": NO_GOOD_REGIMES})
        cases: list[dict[str, Any]] = []
        js_rows: list[dict[str, Any]] = []
        summary: dict[str, Any] = {}
        for approx in approx_graphs:
            top = approx.regime.top.key
            report = regularity_report(approx, kwargs["constants"], self.config.depth, self.config.max_pairings)
            cases.extend({"regime": top, **row} for row in report.to_rows())
            js_rows.append({"regime": top, "m_star": report.js_minimal_m, "ratio": report.js_ratio,
                            "bmo": report.bmo})
            summary[top] = {
                "bmo": report.bmo,
                "js_minimal_m": report.js_minimal_m,
                "js_ratio": report.js_ratio,
                "case_counts": {str(c): sum(1 for v in report.cases.values() if v == c) for c in (1, 2, 3, 4)},
                "case_max": {str(k): v for k, v in report.case_max.items()},
                "b12_constant": report.b12_constant,
                "max_relative_residual": max((p["relative_residual"] for p in report.pairings), default=0.0),
            }
        return StageResult(summary=summary, tables={"cases": cases, "js_ratios": js_rows})


class BetaStage(LabStage):
    """beta numbers and Carleson packing of psi and of every psi_S"""

    config_options: dict[str, StageParameter] = dict(
        n_scales=StageParameter(int, 4, fmt="%i", msg="Dyadic scales below the top radius"),
        top_radius=StageParameter(float, 0.25, fmt="%0.3f", msg="Largest radius"),
    )

    _inputs: dict = {
        "psi": GraphFunction,
    }

    def _run(self, **kwargs: Any) -> StageResult:
        graphs: list[tuple[str, GraphFunction]] = [("psi", kwargs["psi"])]
        graphs += [(f"psi_S:{a.regime.top.key}", a.graph) for a in kwargs.get("approx_graphs", [])]
        radii = [self.config.top_radius * 2.0**-k for k in range(self.config.n_scales)]
        rows: list[dict[str, Any]] = []
        summary: dict[str, Any] = {}
        for label, graph in graphs:
            usable = [r for r in radii if r >= graph.hx]
            if not usable:
                logger.warning("no beta scale of %s is resolved by the lattice", label)
                continue
            field_ = beta_field(graph, usable)
            packing = carleson_packing_norm(graph, self.config.top_radius, len(usable))
            summary[label] = {"packing": packing, "beta_max": float(max(np.max(v) for v in field_.values))}
            for r, ms in zip(field_.radii, field_.mean_square()):
                rows.append({"graph": label, "radius": float(r), "beta_mean_square": float(ms), "packing": packing})
        return StageResult(summary=summary, tables={"beta_vs_scale": rows})


def default_stages(scenario: Scenario | None = None) -> list[LabStage]:
    """The stage list of a full run, configured from a scenario"""
    s = Scenario() if scenario is None else scenario
    unset = -1.0
    return [
        CoefficientCheckStage("coefficients"),
        GreenStage("green"),
        AinftyStage("ainfty", depth=s.depth, q=s.q),
        MeasureCoronaStage("corona", depth=s.depth, m_prime=s.m_prime, sweep=list(s.m_prime_sweep)),
        RefinementStage("refinement", max_regimes=s.max_regimes, eps=unset if s.eps is None else s.eps),
        RegimeStage("regimes"),
        LevelSetStage("levelset", max_regimes=s.max_regimes, pole_lag=s.pole_lag,
                      gamma=unset if s.gamma is None else s.gamma),
        RegularityStage("regularity"),
        BetaStage("beta"),
    ]
