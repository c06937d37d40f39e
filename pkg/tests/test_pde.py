import numpy as np
import pytest

from purlab.geometry import AmbientPoint, DyadicCube, StructuralConstants
from purlab.graph import GraphDomain, make_graph
from purlab.pde import (
    BoundaryMeasure,
    CoefficientField,
    FlatLattice,
    SolverConfig,
    boundary_distance,
    boundary_estimates_report,
    check_coefficients,
    green_function,
    heat_green_oracle,
    heat_poisson_oracle,
    normalized_green,
    parabolic_measure,
    reverse_holder,
    riesz_check,
    sample_point,
    solve_parabolic,
)

CONFIG = SolverConfig(n_rho=16, height=1.0)


@pytest.fixture(name="flat_domain")
def flat_domain_fixture() -> GraphDomain:
    return GraphDomain.from_graph(make_graph("flat", n_x=16, n_t=256))


@pytest.fixture(name="heat")
def heat_fixture() -> CoefficientField:
    return CoefficientField.identity()


def test_solver_config_errors() -> None:
    with pytest.raises(ValueError):
        SolverConfig(n_rho=2)
    with pytest.raises(ValueError):
        SolverConfig(height=0.0)
    with pytest.raises(ValueError):
        SolverConfig(time_refinement=0)


def test_lattice(flat_domain: GraphDomain) -> None:
    lattice = FlatLattice(flat_domain.psi, CONFIG, 0.25, 8)
    assert lattice.shape == (9, 17, 16)
    assert lattice.dt == pytest.approx(1.0 / 256.0)
    assert lattice.static
    k, i, j = lattice.snap(AmbientPoint.make(0.5, 0.5, 0.25 + 4.0 / 256.0))
    assert (k, i, j) == (4, 8, 8)
    with pytest.raises(ValueError):
        lattice.snap(AmbientPoint.make(0.5, 0.5, 2.0))
    dist = boundary_distance(lattice)
    np.testing.assert_allclose(dist[:, :, 0], np.broadcast_to(lattice.rho, (9, 17)), atol=1e-12)
    with pytest.raises(ValueError):
        FlatLattice(make_graph("flat", n=3, n_x=8), CONFIG, 0.0, 4)


def test_constants_are_preserved(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    u = solve_parabolic(flat_domain, heat, 1.0, "forward", CONFIG, 0.0, 16)
    np.testing.assert_allclose(u.values, 1.0, atol=1e-10)
    assert u.metadata["factorizations"] == 1
    assert u.metadata["max_relative_residual"] < 1e-10


def test_maximum_principle(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    cube = DyadicCube(2, (1, 5))

    def data(x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return cube.contains_points(x[..., None], t).astype(float)

    u = solve_parabolic(flat_domain, heat, data, "forward", CONFIG, 0.25, 48)
    assert u.values.min() >= -1e-12
    assert u.values.max() <= 1.0 + 1e-12
    assert u.values[:, 1:, :].max() > 0.0
    point = sample_point(flat_domain.psi, 0.3, 0.4, 0.2)
    assert 0.0 <= u.at(point) <= 1.0


def test_adjoint_direction(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    u = solve_parabolic(flat_domain, heat, 1.0, "adjoint", CONFIG, 0.0, 8)
    np.testing.assert_allclose(u.values, 1.0, atol=1e-10)
    with pytest.raises(ValueError):
        solve_parabolic(flat_domain, heat, 1.0, "sideways", CONFIG, 0.0, 8)


def test_parabolic_measure_is_a_probability(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    pole = AmbientPoint.make(0.5, 0.5, 0.5)
    measure = parabolic_measure(flat_domain, heat, pole, CONFIG, 64)
    assert measure.mass.min() >= -1e-14
    assert measure.initial.min() >= -1e-14
    assert measure.total() == pytest.approx(1.0, abs=1e-9)
    assert measure.mass.sum() > 0.1


def test_parabolic_measure_matches_heat_oracle(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    pole = AmbientPoint.make(0.5, 0.5, 0.5)
    measure = parabolic_measure(flat_domain, heat, pole, CONFIG, 64)
    tt, xx = np.meshgrid(measure.t[1:], measure.x, indexing="ij")
    density = heat_poisson_oracle(xx, tt, pole, CONFIG.height, 1.0)
    expected = float(np.sum(density * measure.sigma[1:]))
    assert measure.mass.sum() == pytest.approx(expected, rel=0.15)


def test_green_function(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    pole = AmbientPoint.make(0.5, 0.5, 0.5)
    forward = green_function(flat_domain, heat, pole, "forward", CONFIG, 16)
    adjoint = green_function(flat_domain, heat, pole, "adjoint", CONFIG, 16)
    assert forward.values.min() >= -1e-12
    assert adjoint.values.min() >= -1e-12
    for green in (forward, adjoint):
        assert green.metadata["checks"]["nonnegative"]
        assert 1.0 - 1e-9 <= green.metadata["checks"]["max_slice_mass"] <= 1.05
    assert forward.lattice.t[0] == pytest.approx(pole.t)
    assert adjoint.lattice.t[-1] == pytest.approx(pole.t)
    np.testing.assert_allclose(forward.values[:, 0, :], 0.0)
    later = AmbientPoint.make(0.5, 0.5, 0.5 + 8.0 / 256.0)
    assert forward.at(later) > 0.0
    with pytest.raises(ValueError):
        green_function(flat_domain, heat, AmbientPoint.make(0.1, 0.5, 0.5), "forward", CONFIG, 16)
    with pytest.raises(ValueError):
        green_function(flat_domain, heat, pole, "sideways", CONFIG, 16)


def test_heat_oracles() -> None:
    pole = AmbientPoint.make(0.5, 0.5, 0.5)
    before = heat_green_oracle(np.array(0.5), np.array(0.5), np.array(0.4), pole, 1.0, 1.0)
    after = heat_green_oracle(np.array(0.5), np.array(0.5), np.array(0.6), pole, 1.0, 1.0)
    assert float(before) == 0.0
    assert float(after) > 0.0
    assert float(heat_poisson_oracle(np.array(0.5), np.array(0.6), pole, 1.0, 1.0)) == 0.0
    assert float(heat_poisson_oracle(np.array(0.5), np.array(0.3), pole, 1.0, 1.0)) > 0.0


def test_coefficient_check(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    report = check_coefficients(flat_domain, heat, CONFIG, 0.0, 4)
    assert report.margin == pytest.approx(0.0, abs=1e-12)
    assert report.mu_carleson == pytest.approx(0.0, abs=1e-12)
    assert report.symmetric
    degenerate = CoefficientField.constant(np.diag([0.5, 1.0]), lam=1.0)
    with pytest.raises(ValueError):
        check_coefficients(flat_domain, degenerate, CONFIG, 0.0, 4)


def test_coefficient_field() -> None:
    A = CoefficientField.constant(np.array([[2.0, 0.5], [-0.5, 1.0]]))
    assert not A.symmetric
    sample = A.sample(np.zeros(3), np.zeros((3, 1)), np.zeros(3))
    assert sample.shape == (3, 2, 2)
    np.testing.assert_allclose(A.transpose().sample(0.0, np.zeros(1), 0.0), sample[0].T)
    identity = CoefficientField.identity()
    assert identity.transpose() is identity


def _grid_measure(density: np.ndarray) -> BoundaryMeasure:
    x = np.arange(16) / 16.0
    t = np.arange(256) / 256.0
    sigma = np.full((256, 16), 1.0 / (16 * 256))
    return BoundaryMeasure.from_density(x, t, density, sigma)


def test_reverse_holder() -> None:
    cubes = list(DyadicCube(0, (0, 0)).descendants(1))
    flat = reverse_holder(_grid_measure(np.ones((256, 16))), 2.0, cubes)
    assert flat.c_star == pytest.approx(1.0)
    spiky = np.ones((256, 16))
    spiky[10, 3] = 100.0
    assert reverse_holder(_grid_measure(spiky), 2.0, cubes).c_star > 1.5
    with pytest.raises(ValueError):
        reverse_holder(_grid_measure(spiky), 1.0, cubes)
    with pytest.raises(ValueError):
        reverse_holder(_grid_measure(spiky), 2.0, [])


def test_normalized_green(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    cube = DyadicCube(3, (3, 20))
    constants = StructuralConstants(corkscrew_factor=2.0)
    green = normalized_green(flat_domain, heat, cube, constants, CONFIG)
    assert green.sigma_q == pytest.approx(1.0 / 512.0)
    assert green.report["M1"] >= 1.0
    assert np.isfinite(green.report["M1"])
    assert green.u.values.min() >= -1e-12
    assert green.v.values.min() >= -1e-12


def _riesz_phi(x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    low = np.where(x0 < 0.5, np.cos(np.pi * x0) ** 2, 0.0)
    phase = np.clip((t - 0.27) / 0.18, 0.0, 1.0)
    return low * np.sin(np.pi * phase) ** 2


def _riesz_dphi(x0: np.ndarray, x: np.ndarray, t: np.ndarray):
    low = np.where(x0 < 0.5, np.cos(np.pi * x0) ** 2, 0.0)
    d_low = np.where(x0 < 0.5, -np.pi * np.sin(2.0 * np.pi * x0), 0.0)
    phase = np.clip((t - 0.27) / 0.18, 0.0, 1.0)
    bump = np.sin(np.pi * phase) ** 2
    d_bump = np.where((t > 0.27) & (t < 0.45), np.pi / 0.18 * np.sin(2.0 * np.pi * phase), 0.0)
    return d_low * bump, np.zeros_like(x0), low * d_bump


def test_riesz_identity(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    pole = AmbientPoint.make(0.5, 0.5, 0.5)
    measure, green = parabolic_measure(flat_domain, heat, pole, CONFIG, 64, with_green=True)
    assert green.direction == "adjoint"
    lhs, rhs = riesz_check(green, measure, heat, _riesz_phi, _riesz_dphi)
    assert lhs > 0.0
    assert rhs == pytest.approx(lhs, rel=0.35)


def test_boundary_estimates(flat_domain: GraphDomain, heat: CoefficientField) -> None:
    report = boundary_estimates_report(flat_domain, heat, [(0.5, 0.5)], [0.0625, 0.125], config=CONFIG)
    assert len(report.rows) == 2
    assert report.doubling[0] >= 1.0
    assert report.cfms[0] > 0.0
    assert 0.0 < report.bourgain[0] <= 1.0 + 1e-9
    assert report.backward_harnack[0] >= 0.0
