import numpy as np
import pytest

from purlab.corona import StoppingTimeRegime, window_cubes
from purlab.geometry import DyadicCube, StructuralConstants
from purlab.graph import GraphDomain, GraphFunction, make_graph
from purlab.levelset import (
    ApproxGraph,
    build_psi_s,
    classify_cube,
    cutoff,
    distance_lip,
    heart_square_function,
    level_set_map,
    level_solve,
    regime_green,
    regularity_report,
    smoothed_family,
    stopping_distance,
    stopping_distance_field,
    transference_check,
    window_family,
)
from purlab.pde import CoefficientField, SolverConfig

TOP = DyadicCube(2, (1, 5))
RADII = [0.02, 0.05, 0.1]


def _height(x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.asarray(x0, dtype=float) + 0.0 * np.asarray(t, dtype=float)


def _tilted(x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.asarray(x0, dtype=float) - 0.5 * np.asarray(x, dtype=float)


@pytest.fixture(name="psi")
def psi_fixture() -> GraphFunction:
    return make_graph("flat", n_x=16, n_t=256)


@pytest.fixture(name="regime")
def regime_fixture() -> StoppingTimeRegime:
    return StoppingTimeRegime.from_cubes(window_cubes(TOP, 1))


@pytest.fixture(name="approx")
def approx_fixture(regime: StoppingTimeRegime, psi: GraphFunction) -> ApproxGraph:
    return build_psi_s(regime, _height, psi, StructuralConstants())


def test_level_solve() -> None:
    def square(x0, x, t):
        return np.asarray(x0) ** 2

    assert level_solve(square, 0.3, 0.1, 0.25, (0.0, 1.0)) == pytest.approx(0.5, abs=1e-9)
    with pytest.raises(ValueError):
        level_solve(square, 0.3, 0.1, 4.0, (0.0, 1.0))
    with pytest.raises(ValueError):
        level_solve(square, 0.3, 0.1, 0.25, (1.0, 1.0))


def test_stopping_distance(regime: StoppingTimeRegime, psi: GraphFunction) -> None:
    child = TOP.children()[0]
    center = child.center()
    inside = stopping_distance(regime, np.array([[center.x[0]]]), np.array([center.t]))
    assert inside[0] == pytest.approx(child.diameter)
    far = stopping_distance(regime, np.array([[0.9]]), np.array([center.t]))
    assert far[0] > child.diameter
    field = stopping_distance_field(regime, psi)
    assert field.values.shape == psi.shape
    assert field.values.min() == pytest.approx(child.diameter)
    assert 0 < distance_lip(field) <= 1.0 + 1e-9


def test_cutoff() -> None:
    center = TOP.center()
    x = np.array([center.x[0], center.x[0] + TOP.side, center.x[0] + 2.5 * TOP.side])
    t = np.full(3, center.t)
    np.testing.assert_allclose(cutoff(TOP, x, t), [1.0, 1.0, 0.0])


def test_level_set_map_of_height(regime: StoppingTimeRegime, psi: GraphFunction) -> None:
    lmap = level_set_map(regime, _height, psi, StructuralConstants(), radii=RADII)
    assert lmap.failure_rate == 0.0
    assert lmap.monotone()
    assert lmap.residual() < 1e-9
    np.testing.assert_allclose(lmap.values[1], 0.05, atol=1e-9)
    with pytest.raises(ValueError):
        level_set_map(regime, _height, psi, StructuralConstants(), radii=[0.1, 0.2])


def test_transference_of_tilted_level(regime: StoppingTimeRegime, psi: GraphFunction) -> None:
    lmap = level_set_map(regime, _tilted, psi, StructuralConstants(), radii=RADII)
    assert lmap.failure_rate == 0.0
    report = transference_check(lmap, n_points=32)
    assert report.rel_error < 1e-6
    assert report.errors["x"] < 1e-6
    assert report.bound_constant < 1e-6
    assert report.n_points == 32


def test_heart_square_function(regime: StoppingTimeRegime, psi: GraphFunction) -> None:
    lmap = level_set_map(regime, _height, psi, StructuralConstants(), radii=RADII)
    assert heart_square_function(lmap, TOP) == pytest.approx(0.0, abs=1e-10)
    with pytest.raises(ValueError):
        heart_square_function(lmap, DyadicCube(6, (20, 400)))


def test_psi_s_of_height_is_the_distance(approx: ApproxGraph) -> None:
    solved = approx.support & ~approx.failed
    assert approx.failed.sum() == 0
    np.testing.assert_allclose(approx.raw[solved], approx.h.values[solved], atol=1e-8)
    assert approx.checks["closeness_ok"]
    assert approx.checks["closeness_core_ratio"] == pytest.approx(1.0, abs=1e-6)
    assert approx.checks["closeness_ratio"] >= 1.0 - 1e-6
    assert np.all(approx.values[~approx.support] == 0.0)
    center = TOP.center()
    assert float(approx.graph(np.array([[center.x[0]]]), np.array([center.t]))[0]) == pytest.approx(0.0, abs=1e-6)
    assert approx.to_dict()["top"] == TOP.key


def test_psi_s_stays_above_the_graph_on_uneven_regimes() -> None:
    psi = make_graph("flat", n_x=32, n_t=1024)
    deep = TOP.children()[0]
    regime = StoppingTimeRegime.from_cubes([TOP, *TOP.children(), *deep.descendants(2)])
    approx = build_psi_s(regime, _height, psi, StructuralConstants())
    solved = approx.support & ~approx.failed
    h = approx.h.values
    assert np.any(h[solved] < approx.offset - 1e-3)
    gap = approx.values - approx.frame.full_values()
    assert gap[solved].min() >= -1e-8
    assert approx.checks["closeness_min"] == pytest.approx(gap[solved].min(), abs=1e-12)
    assert approx.checks["closeness_min"] >= -approx.tol
    core = solved & (approx.phi >= 1.0)
    np.testing.assert_allclose(gap[core], h[core], atol=1e-8)
    np.testing.assert_allclose(approx.frame.full_values(), -approx.offset)


def test_normalized_psi_s(regime: StoppingTimeRegime, psi: GraphFunction, approx: ApproxGraph) -> None:
    def steep(x0, x, t):
        return 2.0 * _height(x0, x, t)

    normalized = build_psi_s(regime, steep, psi, StructuralConstants(), normalize=True)
    np.testing.assert_allclose(normalized.values, approx.values, atol=1e-7)


def test_psi_s_errors(regime: StoppingTimeRegime, psi: GraphFunction) -> None:
    def unreachable(x0, x, t):
        return _height(x0, x, t) - 100.0

    with pytest.raises(ValueError):
        build_psi_s(regime, unreachable, psi, StructuralConstants())
    with pytest.raises(ValueError):
        build_psi_s(regime, _height, make_graph("flat", n=3, n_x=8), StructuralConstants())


def test_smoothed_family(approx: ApproxGraph) -> None:
    family = smoothed_family(approx)
    assert family.radii[0] == 0.0
    assert family.margin <= 0.25
    assert family.containment_violation == 0.0
    assert family.zero_agreement < 1e-8
    assert family.gamma <= 0.5
    assert np.isfinite(family.square_integrals["total"])


def test_classify_cube(approx: ApproxGraph) -> None:
    constants = StructuralConstants()
    assert classify_cube(TOP.parent(), approx, constants) == 4
    assert classify_cube(TOP.children()[3], approx, constants) == 2
    assert classify_cube(DyadicCube(3, (3, 60)), approx, constants) == 3
    family = window_family(approx, depth=1)
    assert TOP in family
    assert {c.generation for c in family} == {1, 2, 3}


def test_regularity_report(approx: ApproxGraph) -> None:
    report = regularity_report(approx, StructuralConstants(), depth=1)
    assert len(report.rows) == len(window_family(approx, depth=1))
    assert set(report.cases.values()) <= {1, 2, 3, 4}
    assert report.bmo >= 0.0
    assert report.js_minimal_m >= 0.0
    assert all(row["case"] == report.cases[row["cube"]] for row in report.to_rows())


def test_regime_green(regime: StoppingTimeRegime, psi: GraphFunction) -> None:
    config = SolverConfig(n_rho=16, height=1.0)
    green = regime_green(GraphDomain.from_graph(psi), CoefficientField.identity(), regime,
                         StructuralConstants(), config)
    assert green.direction == "adjoint"
    assert green.metadata["sigma_normalization"] == pytest.approx(TOP.side * TOP.time_side)
    assert green.values.min() >= -1e-12
    lo, hi = TOP.dilate(4.0)
    assert green.lattice.t[0] <= lo[1]
    assert green.pole.x0 == pytest.approx(0.5)
