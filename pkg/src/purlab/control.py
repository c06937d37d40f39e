"""Functions to run the laboratory pipeline and write its reports"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import fft

from . import __version__
from .io import read_csv, read_json, to_json, write_csv, write_graph, write_json
from .scenario import Scenario
from .stage import LabStage
from .stage_factory import LabStageFactory
from .stages import NO_GOOD_REGIMES, default_stages

logger = logging.getLogger(__name__)

# Lift the LabStageFactory class methods

load_stage_yaml = LabStageFactory.load_yaml

print_stage_contents = LabStageFactory.print_contents

get_stage_dict = LabStageFactory.get_stage_dict

get_stage_names = LabStageFactory.get_stage_names

get_stage_list_dict = LabStageFactory.get_stage_list_dict

get_stage_list_names = LabStageFactory.get_stage_list_names

get_stage = LabStageFactory.get_stage

get_stage_list = LabStageFactory.get_stage_list


# Lift methods from LabStage

print_stage_classes = LabStage.print_classes


TABLE_SCHEMAS: dict[str, list[str]] = {
    "beta_vs_scale": ["graph", "radius", "beta_mean_square", "packing"],
    "densities": ["cube", "omega", "sigma", "density"],
    "cases": ["regime", "cube", "case", "side", "localized", "js_ratio"],
    "js_ratios": ["regime", "m_star", "ratio", "bmo"],
}

SUMMARY_KEYS = ("format", "outcome", "scenario", "constants", "stages")

# What the measured constants of the summary stand for
CONSTANT_DESCRIPTIONS: dict[str, str] = {
    "constants.m0": "M0 = 2 + Lip(1,1/2) norm of psi",
    "constants.kappa": "aperture of the space-time parabolas",
    "coefficients.margin": "ellipticity margin of A",
    "coefficients.mu_carleson": "Carleson norm of the coefficient oscillation measure",
    "coefficients.l2_carleson": "L2 Carleson norm of the coefficient oscillation measure",
    "green.total_mass": "total parabolic measure including the initial slice",
    "ainfty.c_star": "reverse Hoelder constant of the parabolic measure density",
    "corona.packing.max_ratio": "packing of the corona tops",
    "refinement.*.M1": "Green comparability on the elevated set",
    "refinement.*.M2": "Green comparability near the boundary",
    "refinement.*.min_du0": "smallest vertical derivative of u on good Whitney regions",
    "refinement.*.bad_packing": "packing of the bad cubes",
    "levelset.*.closeness_ratio": "largest (psi_S - psi) / h on 4Q(S), both in the frame centred at x_Q(S)",
    "levelset.*.closeness_core_ratio": "the same ratio where phi = 1",
    "levelset.*.lip": "Lip(1,1/2) estimate of psi_S",
    "regularity.*.bmo": "parabolic BMO norm of the half time derivative of psi_S",
    "regularity.*.js_minimal_m": "smallest M with John-Stromberg ratio at most 1/3",
    "regularity.*.b12_constant": "end terms of the Case-1 pairing against |Q|^(1/2)",
    "beta.*.packing": "Carleson packing norm of beta^2",
}


@dataclass
class ReportBundle:
    """Everything a run produced: the scenario, a summary per stage, tables and live artifacts"""

    scenario: dict[str, Any] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    tables: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    artifacts: dict[str, Any] = field(default_factory=dict)
    outcome: str = "empty"
    constants: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": f"purlab-report/{__version__}",
            "outcome": self.outcome,
            "scenario": self.scenario,
            "constants": self.constants,
            "stages": self.summary,
        }

    def to_json(self) -> str:
        return to_json(self.to_dict())


def scenario_stages(scenario: Scenario) -> list[LabStage]:
    """The stages of a scenario: its stage yaml file if given, the default list otherwise

    A stage yaml file must define a StageList named ``pipeline``.
    """
    if scenario.stages is None:
        return default_stages(scenario)
    LabStageFactory.clear()
    LabStageFactory.load_yaml(scenario.stages)
    return LabStageFactory.get_stage_list("pipeline")


def run_pipeline(
    scenario: Scenario,
    stages: list[LabStage] | None = None,
    until: str | None = None,
) -> ReportBundle:
    """ Run the stages in order, feeding each the artifacts of the ones before

    Parameters
    ----------
    scenario: Scenario
        What to run

    stages: list[LabStage] | None
        Stages to run, `scenario_stages` by default

    until: str | None
        Name of the last stage to run

    Returns
    -------
    bundle: ReportBundle
        Summaries, tables and artifacts of the run

    Raises
    ------
    RuntimeError
        Chained to the error of the failing stage
    """
    stages = scenario_stages(scenario) if stages is None else stages
    if until is not None:
        names = [stage.name for stage in stages]
        if until not in names:
            raise KeyError(f"Stage {until} not found in {names}")
        stages = stages[: names.index(until) + 1]
    bundle = ReportBundle(scenario=scenario.to_dict(), outcome="complete")
    with fft.set_workers(scenario.threads):
        artifacts = scenario.artifacts()
        bundle.constants = artifacts["constants"].ledger()
        for stage in stages:
            logger.info("running stage %s (%s)", stage.name, type(stage).__name__)
            try:
                result = stage(**artifacts)
            except Exception as err:
                raise RuntimeError(f"stage {stage.name} failed: {err}") from err
            artifacts.update(result.artifacts)
            bundle.summary[stage.name] = result.summary
            for key, rows in result.tables.items():
                bundle.tables.setdefault(key, []).extend(rows)
            if result.summary.get("outcome") == NO_GOOD_REGIMES:
                bundle.outcome = NO_GOOD_REGIMES
    bundle.artifacts = artifacts
    logger.info("pipeline finished: %s", bundle.outcome)
    return bundle


def _leaves(data: Any, prefix: str = "") -> list[tuple[str, Any]]:
    if isinstance(data, dict):
        out = []
        for key in sorted(data):
            out += _leaves(data[key], f"{prefix}.{key}" if prefix else str(key))
        return out
    return [(prefix, data)]


def _describe(path: str) -> str:
    if path in CONSTANT_DESCRIPTIONS:
        return CONSTANT_DESCRIPTIONS[path]
    tokens = path.split(".")
    for pattern, text in CONSTANT_DESCRIPTIONS.items():
        parts = pattern.split(".")
        if len(parts) == 3 and parts[1] == "*" and len(tokens) == 3 and tokens[0] == parts[0] \
                and tokens[2] == parts[2]:
            return text
    return ""


def summary_text(bundle: ReportBundle) -> str:
    """One line per numeric entry of the summary, with a description where one is known"""
    lines = [f"outcome: {bundle.outcome}"]
    for path, value in _leaves({"constants": bundle.constants, **bundle.summary}):
        if isinstance(value, bool) or not isinstance(value, (int, float, np.floating, np.integer)):
            continue
        text = _describe(path)
        lines.append(f"{path} = {float(value):.6g}" + (f"  # {text}" if text else ""))
    return "\n".join(lines) + "\n"


def emit_report(
    bundle: ReportBundle,
    out_dir: str,
    formats: tuple[str, ...] = ("json", "csv", "text"),
) -> list[str]:
    """ Write a report bundle to disk

    Parameters
    ----------
    bundle: ReportBundle
        What to write

    out_dir: str
        Directory to write into, created if needed

    formats: tuple[str, ...]
        Any of json (summary.json), csv (one file per table schema) and text
        (summary.txt); with json the approximating graphs are written as grid files too

    Returns
    -------
    paths: list[str]
        Files written
    """
    unknown = set(formats) - {"json", "csv", "text"}
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    os.makedirs(out_dir, exist_ok=True)
    paths: list[str] = []
    if "json" in formats:
        path = os.path.join(out_dir, "summary.json")
        write_json(path, bundle.to_dict())
        paths.append(path)
        for approx in bundle.artifacts.get("approx_graphs", []):
            path = os.path.join(out_dir, f"psi_S_{approx.regime.top.key}.grid")
            write_graph(path, approx.graph)
            paths.append(path)
    if "csv" in formats:
        for name, columns in TABLE_SCHEMAS.items():
            path = os.path.join(out_dir, f"{name}.csv")
            write_csv(path, bundle.tables.get(name, []), columns)
            paths.append(path)
    if "text" in formats:
        path = os.path.join(out_dir, "summary.txt")
        with open(path, "w", encoding="utf-8") as fout:
            fout.write(summary_text(bundle))
        paths.append(path)
    logger.info("wrote %d report files to %s", len(paths), out_dir)
    return paths


def validate_report(data: dict[str, Any]) -> None:
    """Check a loaded summary against the report layout

    Raises
    ------
    ValueError
        On missing or mistyped entries
    """
    if not isinstance(data, dict):
        raise ValueError(f"report must be a mapping, got {type(data)}")
    missing = [key for key in SUMMARY_KEYS if key not in data]
    if missing:
        raise ValueError(f"report is missing {missing}")
    if not str(data["format"]).startswith("purlab-report/"):
        raise ValueError(f"unknown report format {data['format']!r}")
    if data["outcome"] not in ("empty", "complete", NO_GOOD_REGIMES):
        raise ValueError(f"unknown outcome {data['outcome']!r}")
    for key in ("scenario", "constants", "stages"):
        if not isinstance(data[key], dict):
            raise ValueError(f"report entry {key} must be a mapping, got {type(data[key])}")
    for name, block in data["stages"].items():
        if not isinstance(block, dict):
            raise ValueError(f"summary of stage {name} must be a mapping")


def validate_table(name: str, columns: list[str]) -> None:
    try:
        expected = TABLE_SCHEMAS[name]
    except KeyError as msg:
        raise KeyError(f"Table {name} not found in {list(TABLE_SCHEMAS.keys())}") from msg
    if columns != expected:
        raise ValueError(f"table {name} has columns {columns}, expected {expected}")


def load_report(out_dir: str) -> ReportBundle:
    """Read back the summary and tables written by `emit_report`"""
    data = read_json(os.path.join(out_dir, "summary.json"))
    validate_report(data)
    bundle = ReportBundle(scenario=data["scenario"], summary=data["stages"], outcome=data["outcome"],
                          constants=data["constants"])
    for name in TABLE_SCHEMAS:
        path = os.path.join(out_dir, f"{name}.csv")
        if os.path.exists(path):
            columns, rows = read_csv(path)
            validate_table(name, columns)
            bundle.tables[name] = rows
    return bundle
