"""Scenario description: everything a pipeline run depends on"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import yaml

from .coeffs import make_coefficients
from .geometry import DyadicCube, StructuralConstants
from .graph import GraphDomain, GraphFunction, make_graph
from .pde import CoefficientField, SolverConfig

logger = logging.getLogger(__name__)


@dataclass
class Scenario:
    """Flat description of a pipeline run

    Keys prefixed ``graph_`` (other than ``graph_kind``) are passed to the
    graph generator and keys prefixed ``coeff_`` to the coefficient builder,
    with the prefix removed.
    """

    graph_kind: str = "flat"
    graph_params: dict[str, Any] = field(default_factory=dict)
    n: int = 2
    n_x: int = 64
    length: float = 1.0
    n_t: int | None = None
    coefficient_kind: str = "heat"
    coefficient_params: dict[str, Any] = field(default_factory=dict)
    n_rho: int = 32
    height: float = 1.0
    time_refinement: int = 1
    k_whitney: int = 8
    corkscrew_factor: float = 2.0
    m_prime: float = 4.0
    m_prime_sweep: list[float] = field(default_factory=lambda: [2.0, 4.0, 8.0, 16.0])
    eps: float | None = None
    eps0: float = 1.0 / 64.0
    gamma: float | None = None
    q: float = 2.0
    top_generation: int = 3
    top_index: list[int] = field(default_factory=lambda: [3, 20])
    depth: int = 3
    pole_lag: float = 4.0
    max_regimes: int = 1
    seed: int = 0
    out: str = "purlab_out"
    threads: int = 1
    stages: str | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Scenario:
        """Build a scenario from a flat mapping

        Raises
        ------
        ValueError
            On keys that are neither fields nor prefixed parameters
        """
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        graph_params: dict[str, Any] = dict(data.get("graph_params", {}) or {})
        coeff_params: dict[str, Any] = dict(data.get("coefficient_params", {}) or {})
        unknown = []
        for key, value in data.items():
            if key in ("graph_params", "coefficient_params"):
                continue
            if key in names:
                kwargs[key] = value
            elif key.startswith("graph_"):
                graph_params[key[len("graph_"):]] = value
            elif key.startswith("coeff_"):
                coeff_params[key[len("coeff_"):]] = value
            else:
                unknown.append(key)
        if unknown:
            raise ValueError(f"Unrecognized scenario keys {sorted(unknown)}")
        return cls(graph_params=graph_params, coefficient_params=coeff_params, **kwargs)

    @classmethod
    def load_yaml(cls, yaml_file: str) -> Scenario:
        """Read a scenario from a yaml mapping of flat ``key: value`` pairs"""
        with open(yaml_file, encoding="utf-8") as fin:
            data = yaml.safe_load(fin) or {}
        if not isinstance(data, dict):
            raise ValueError(f"scenario file {yaml_file} must hold a mapping, got {type(data)}")
        return cls.from_dict(data)

    def override(self, **kwargs: Any) -> Scenario:
        """Copy with the given keys replaced, ``None`` values are ignored"""
        return dataclasses.replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def build_graph(self) -> GraphFunction:
        return make_graph(self.graph_kind, n=self.n, n_x=self.n_x, length=self.length, n_t=self.n_t,
                          **self.graph_params)

    def build_coefficients(self, psi: GraphFunction) -> CoefficientField:
        return make_coefficients(self.coefficient_kind, n=self.n, psi=psi, **self.coefficient_params)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(n_rho=self.n_rho, height=self.height, time_refinement=self.time_refinement)

    def constants(self, domain: GraphDomain, A: CoefficientField) -> StructuralConstants:
        return StructuralConstants.for_graph(
            domain.lip.combined,
            n=self.n,
            lam=max(1.0, A.lam),
            k_whitney=self.k_whitney,
            corkscrew_factor=self.corkscrew_factor,
            m_prime=self.m_prime,
            eps0=self.eps0,
            q=self.q,
        )

    def top_cube(self) -> DyadicCube:
        if len(self.top_index) != self.n:
            raise ValueError(f"top_index needs {self.n} entries, got {self.top_index}")
        return DyadicCube(self.top_generation, tuple(self.top_index), self.length)

    def artifacts(self) -> dict[str, Any]:
        """The initial artifacts of a run: graph, domain, coefficients, constants and solver settings"""
        psi = self.build_graph()
        domain = GraphDomain.from_graph(psi)
        A = self.build_coefficients(psi)
        constants = self.constants(domain, A)
        logger.info("scenario %s/%s with M0 %.4g", self.graph_kind, self.coefficient_kind, constants.m0)
        return {
            "scenario": self,
            "psi": psi,
            "domain": domain,
            "A": A,
            "constants": constants,
            "solver_config": self.solver_config(),
            "q0": self.top_cube(),
            "rng": self.rng(),
        }
