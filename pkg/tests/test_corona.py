import math

import numpy as np
import pytest

from purlab.corona import (
    StoppingTimeRegime,
    divergence_identity_residual,
    ibp_identity_check,
    initial_coronization,
    is_semi_coherent,
    measure_corona,
    measure_corona_step,
    nondegeneracy_refinement,
    packing_statistics,
    sawtooth,
    sawtooth_cutoff,
    split_regimes,
    square_function_report,
    sweep_m_prime,
    window_cubes,
)
from purlab.coeffs import make_coefficients
from purlab.geometry import DyadicCube, StructuralConstants, cube_containing, whitney_region
from purlab.graph import make_graph
from purlab.pde import BoundaryMeasure, CoefficientField, FlatLattice, SolutionField, SolverConfig

Q0 = DyadicCube(1, (0, 0))
SPIKE = (10, 3)


def _grid_measure(density: np.ndarray) -> BoundaryMeasure:
    x = np.arange(16) / 16.0
    t = np.arange(256) / 256.0
    sigma = np.full((256, 16), 1.0 / (16 * 256))
    return BoundaryMeasure.from_density(x, t, density, sigma)


@pytest.fixture(name="uniform")
def uniform_fixture() -> BoundaryMeasure:
    return _grid_measure(np.ones((256, 16)))


@pytest.fixture(name="spiky")
def spiky_fixture() -> BoundaryMeasure:
    density = np.ones((256, 16))
    density[SPIKE] = 1000.0
    return _grid_measure(density)


@pytest.fixture(name="lattice")
def lattice_fixture() -> FlatLattice:
    return FlatLattice(make_graph("flat", n_x=16, n_t=256), SolverConfig(n_rho=16, height=1.0), 0.25, 64)


def _spike_cube(generation: int) -> DyadicCube:
    k, i = SPIKE
    return cube_containing((i / 16.0,), k / 256.0, generation)


def test_regime_basics() -> None:
    regime = StoppingTimeRegime.from_cubes(window_cubes(Q0, 2))
    assert regime.top == Q0
    assert len(regime) == 1 + 8 + 64
    assert regime.coherent
    assert Q0.children()[0] in regime
    assert len(regime.minimal_cubes()) == 64
    assert regime.to_dict()["top"] == Q0.key
    with pytest.raises(ValueError):
        StoppingTimeRegime.from_cubes([])


def test_regime_truncate() -> None:
    regime = StoppingTimeRegime.from_cubes(window_cubes(Q0, 2))
    lower = regime.truncate(1)
    assert len(lower) == 8 + 64
    assert lower.top == Q0
    assert len(regime.truncate(1, 1)) == 8
    with pytest.raises(ValueError):
        regime.truncate(3)


def test_semi_coherence() -> None:
    cubes = window_cubes(Q0, 2)
    assert is_semi_coherent(cubes)
    middle = Q0.children()[2]
    assert not is_semi_coherent([c for c in cubes if c != middle])
    assert not is_semi_coherent([])


def test_packing_statistics() -> None:
    family = [Q0] + Q0.children()
    stats = packing_statistics(family, window_cubes(Q0, 1))
    assert stats.max_ratio == pytest.approx(2.0)
    assert stats.worst == Q0.key
    assert packing_statistics([], window_cubes(Q0, 1)).max_ratio == 0.0


def test_uniform_measure_has_one_regime(uniform: BoundaryMeasure) -> None:
    corona = measure_corona(Q0, uniform, 4.0, 3)
    assert len(corona.regimes) == 1
    assert corona.steps[0].stopped == []
    assert corona.steps[0].contact_ok
    assert corona.bad == []
    assert corona.is_partition()
    assert corona.packing.max_ratio == pytest.approx(1.0)
    assert corona.packing_bound == pytest.approx(4.0 / 3.0)


def test_spike_stops_along_its_ancestors(spiky: BoundaryMeasure) -> None:
    step = measure_corona_step(Q0, spiky, 4.0, 1)
    assert [c.key for c in step.stopped] == [_spike_cube(2).key]
    assert step.stopped_fraction == pytest.approx(0.125)
    assert step.small_stopping
    corona = measure_corona(Q0, spiky, 4.0, 3)
    tops = {c.key for c in corona.tops}
    assert _spike_cube(2).key in tops
    assert _spike_cube(3).key in tops
    assert corona.is_partition()
    assert corona.to_dict()["q0"] == Q0.key


def test_two_measure_corona(uniform: BoundaryMeasure, spiky: BoundaryMeasure) -> None:
    corona = measure_corona(Q0, uniform, 4.0, 2, measure2=spiky)
    assert corona.packing_bound == pytest.approx(2.0)
    assert corona.is_partition()


def test_corona_step_errors(uniform: BoundaryMeasure) -> None:
    with pytest.raises(ValueError):
        measure_corona_step(Q0, uniform, 1.0, 2)
    with pytest.raises(ValueError):
        measure_corona_step(Q0, _grid_measure(np.zeros((256, 16))), 4.0, 2)


def test_sweep_m_prime(spiky: BoundaryMeasure) -> None:
    chosen, fractions = sweep_m_prime(Q0, spiky, 1, (2.0, 4.0, 8.0))
    assert chosen == 4.0
    assert fractions[2.0] == pytest.approx(0.0)
    assert fractions[4.0] == pytest.approx(0.875)
    assert fractions[8.0] == pytest.approx(1.0)


def test_initial_coronization() -> None:
    corona = initial_coronization(Q0, 2)
    assert len(corona.regimes) == 1
    assert corona.is_partition()
    assert corona.packing.max_ratio == pytest.approx(1.0)


def test_split_regimes() -> None:
    first, second = Q0.children()[:2]
    good = list(first.descendants(1)) + list(second.descendants(1))
    regimes = split_regimes(good)
    assert [r.top for r in regimes] == sorted([first, second])
    assert all(len(r) == 9 for r in regimes)


def _linear_field(lattice: FlatLattice) -> SolutionField:
    values = np.broadcast_to(lattice.rho[None, :, None], lattice.shape).copy()
    return SolutionField(lattice, values, "forward")


def _quadratic_field(lattice: FlatLattice) -> SolutionField:
    values = np.broadcast_to(lattice.rho[None, :, None] ** 2, lattice.shape).copy()
    return SolutionField(lattice, values, "forward")


def test_refinement_of_linear_solution(lattice: FlatLattice) -> None:
    top = DyadicCube(2, (1, 5))
    regime = StoppingTimeRegime.from_cubes(window_cubes(top, 2))
    constants = StructuralConstants()
    refinement = nondegeneracy_refinement(regime, _linear_field(lattice), constants, eps=1e-6)
    assert [c.key for c in refinement.bad] == [top.key]
    assert len(refinement.good) == 8 + 64
    assert refinement.nondegenerate
    assert refinement.min_du0 >= 0.99
    assert max(refinement.oscillation.values()) == pytest.approx(0.0, abs=1e-12)
    assert len(split_regimes(refinement.good)) == 8
    deeper = nondegeneracy_refinement(regime, _linear_field(lattice), constants, eps=1e-6,
                                      excluded_generations=2)
    assert len(deeper.bad) == 9
    assert len(deeper.good) == 64


def test_sawtooth(lattice: FlatLattice) -> None:
    regime = StoppingTimeRegime.from_cubes(window_cubes(DyadicCube(2, (1, 5)), 1))
    constants = StructuralConstants()
    region = sawtooth(regime, "plain", constants, lattice.psi)
    assert len(region.regions()) == 9
    rng = np.random.default_rng(4)
    x0, x, t = whitney_region(regime.top, "plain", constants.k_whitney, lattice.psi).sample(rng, 50)
    assert region.contains(x0, x, t).all()
    with pytest.raises(ValueError):
        sawtooth(regime, "****", constants, lattice.psi)


def test_sawtooth_cutoff(lattice: FlatLattice) -> None:
    regime = StoppingTimeRegime.from_cubes(window_cubes(DyadicCube(2, (1, 5)), 1))
    report = sawtooth_cutoff(regime, lattice, StructuralConstants(), verify=False)
    assert report.eta.shape == lattice.shape
    assert report.eta.min() >= 0.0
    assert report.eta.max() <= 1.0
    assert report.eta.max() == pytest.approx(1.0)
    assert np.isfinite(report.derivative_bound)
    assert set(report.f_accounting) == {"F1", "F2", "F3"}
    assert report.boundary_packing >= 0.0
    bad = StoppingTimeRegime.from_cubes([DyadicCube(0, (0, 0, 0))])
    with pytest.raises(ValueError):
        sawtooth_cutoff(bad, lattice, StructuralConstants())


def test_square_function_report(lattice: FlatLattice) -> None:
    top = DyadicCube(2, (1, 5))
    region = np.ones(lattice.shape, dtype=bool)
    flat = square_function_report(_linear_field(lattice), region, top)
    assert flat.main == pytest.approx(0.0, abs=1e-10)
    assert flat.masked > 0
    curved = square_function_report(_quadratic_field(lattice), region, top, v=_linear_field(lattice))
    assert curved.main > 0
    assert curved.terms["hessian"] == pytest.approx(curved.main, rel=1e-9)
    assert curved.terms["gradient_cutoff"] == pytest.approx(0.0, abs=1e-12)
    assert curved.main_v == pytest.approx(0.0, abs=1e-10)
    assert curved.normalization == pytest.approx(top.volume)


def test_divergence_identity_on_quadratic(lattice: FlatLattice) -> None:
    matrix = np.array([[2.0, 0.5], [0.5, 1.0]])
    residual = divergence_identity_residual(_quadratic_field(lattice).values, lattice, matrix)
    assert residual < 1e-8


def test_ibp_identity(lattice: FlatLattice) -> None:
    u = _quadratic_field(lattice)
    region = np.ones(lattice.shape, dtype=bool)
    eta = np.ones(lattice.shape)
    top = DyadicCube(2, (1, 5))
    report = ibp_identity_check(u, CoefficientField.identity(), eta, region, top)
    assert report.alpha > 0
    assert report.ratio == pytest.approx(1.0, rel=1e-9)
    assert report.beta == pytest.approx(0.0, abs=1e-12)
    assert report.divergence_identity_residual < 1e-8
    skew = CoefficientField.constant(np.array([[1.0, 0.5], [-0.5, 1.0]]))
    with pytest.raises(ValueError):
        ibp_identity_check(u, skew, eta, region, top)


def test_ibp_identity_unchecked_for_varying_coefficients(lattice: FlatLattice) -> None:
    u = _quadratic_field(lattice)
    region = np.ones(lattice.shape, dtype=bool)
    eta = np.ones(lattice.shape)
    report = ibp_identity_check(u, make_coefficients("jump", jump=0.5), eta, region, DyadicCube(2, (1, 5)))
    assert math.isnan(report.divergence_identity_residual)
    assert report.alpha > 0
