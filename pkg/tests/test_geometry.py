import math

import numpy as np
import pytest

from purlab.geometry import (
    AmbientCube,
    AmbientPoint,
    DyadicCube,
    ParabolicCube,
    SpaceTimePoint,
    StructuralConstants,
    corkscrew,
    cube_containing,
    dist_to_graph,
    in_parabola,
    parabolic_norm,
    parabolic_norm_array,
    smooth_quasinorm,
    smooth_quasinorm_array,
    top_corkscrew,
    whitney_region,
)
from purlab.graph import make_graph


def test_parabolic_norm() -> None:
    assert parabolic_norm(SpaceTimePoint((3.0,), 16.0)) == pytest.approx(7.0)
    assert parabolic_norm(SpaceTimePoint((3.0,), -16.0)) == pytest.approx(7.0)
    assert parabolic_norm(AmbientPoint.make(4.0, 3.0, 0.0)) == pytest.approx(5.0)
    values = parabolic_norm_array(np.array([[3.0], [0.0]]), np.array([16.0, 4.0]))
    np.testing.assert_allclose(values, [7.0, 2.0])


@pytest.mark.parametrize(
    "point,expected",
    [
        (SpaceTimePoint((1.0,), 0.0), 1.0),
        (SpaceTimePoint((0.0,), 4.0), 2.0),
        (SpaceTimePoint((0.0,), -9.0), 3.0),
    ],
)
def test_smooth_quasinorm_axes(point: SpaceTimePoint, expected: float) -> None:
    assert smooth_quasinorm(point) == pytest.approx(expected, rel=1e-10)


def test_smooth_quasinorm_closed_form_and_scaling() -> None:
    point = SpaceTimePoint((0.3,), 0.2)
    rho = smooth_quasinorm(point)
    assert 0.3**2 / rho**2 + 0.2**2 / rho**4 == pytest.approx(1.0, rel=1e-9)
    assert float(smooth_quasinorm_array(0.09, 0.2)) == pytest.approx(rho, rel=1e-9)
    scaled = smooth_quasinorm(SpaceTimePoint((0.3 * 5.0,), 0.2 * 25.0))
    assert scaled == pytest.approx(5.0 * rho, rel=1e-9)
    norm = parabolic_norm(point)
    assert 0.5 * norm <= rho <= norm


def test_smooth_quasinorm_origin() -> None:
    with pytest.raises(ValueError):
        smooth_quasinorm(SpaceTimePoint((0.0,), 0.0))


def test_parabolic_cube() -> None:
    cube = ParabolicCube(SpaceTimePoint((0.5,), 0.5), 0.25)
    assert cube.volume > 0
    inside = cube.contains(np.array([[0.6], [0.9]]), np.array([0.52, 0.5]))
    assert inside.tolist() == [True, False]
    with pytest.raises(ValueError):
        ParabolicCube(SpaceTimePoint((0.0,), 0.0), 0.0)


def test_dyadic_children_tile_parent() -> None:
    cube = DyadicCube(2, (1, 5))
    children = cube.children()
    assert len(children) == 8
    assert sum(c.volume for c in children) == pytest.approx(cube.volume)
    assert all(cube.contains_cube(c) for c in children)
    assert all(c.parent() == cube for c in children)
    assert len({c.key for c in children}) == 8


def test_dyadic_descendants_and_ancestors() -> None:
    cube = DyadicCube(1, (0, 0))
    assert len(list(cube.descendants(2))) == 1 + 8 + 64
    leaf = DyadicCube(4, (5, 100))
    chain = leaf.ancestors(1)
    assert [c.generation for c in chain] == [3, 2, 1]
    assert all(c.contains_cube(leaf) for c in chain)


def test_dyadic_geometry() -> None:
    cube = DyadicCube(3, (3, 20))
    assert cube.side == pytest.approx(1.0 / 8.0)
    assert cube.time_side == pytest.approx(1.0 / 64.0)
    assert cube.diameter == pytest.approx(2.0 / 8.0)
    assert DyadicCube.from_key(cube.key) == cube
    lo, hi = cube.bounds()
    np.testing.assert_allclose(lo, [3.0 / 8.0, 20.0 / 64.0])
    np.testing.assert_allclose(hi, [4.0 / 8.0, 21.0 / 64.0])
    lo2, hi2 = cube.dilate(2.0)
    np.testing.assert_allclose(hi2 - lo2, [0.25, 0.0625])
    assert cube.distance_to_cube(cube) == 0.0
    far = DyadicCube(3, (7, 20))
    assert cube.distance_to_cube(far) == pytest.approx(3.0 / 8.0)
    with pytest.raises(ValueError):
        DyadicCube(1, (0,))


def test_cube_containing() -> None:
    cube = cube_containing((0.3,), 0.2, 2)
    assert cube.index == (1, 3)
    assert bool(cube.contains_points(np.array([0.3]), 0.2))
    assert float(cube.distance_to_points(np.array([0.3]), 0.2)) == 0.0


def test_structural_constants() -> None:
    constants = StructuralConstants()
    assert constants.kappa == pytest.approx(40.0 * 2.0 * math.sqrt(2.0))
    assert StructuralConstants.for_graph(0.5).m0 == pytest.approx(2.5)
    ledger = constants.ledger()
    assert ledger["kappa"] == pytest.approx(constants.kappa)
    assert ledger["whitney_dilations"] == [2.0, 4.0, 8.0]
    assert constants.replace(m_prime=8.0).m_prime == 8.0


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n=1),
        dict(lam=0.5),
        dict(m0=1.5),
        dict(k_whitney=6),
        dict(k_whitney=2),
        dict(q=1.0),
        dict(c1=0.0),
        dict(whitney_dilations=(4.0, 2.0, 8.0)),
    ],
)
def test_structural_constants_errors(kwargs: dict) -> None:
    with pytest.raises(ValueError):
        StructuralConstants(**kwargs)


def test_corkscrew_points() -> None:
    constants = StructuralConstants()
    X = AmbientPoint.make(0.0, 0.5, 0.5)
    plus = corkscrew(X, 0.1, +1, constants)
    minus = corkscrew(X, 0.1, "-", constants)
    assert plus.x0 == pytest.approx(0.4)
    assert plus.t == pytest.approx(0.52)
    assert minus.t == pytest.approx(0.48)
    assert plus.x == (0.5,)
    with pytest.raises(ValueError):
        corkscrew(X, 0.0, +1, constants)
    with pytest.raises(ValueError):
        corkscrew(X, 0.1, 2, constants)


def test_corkscrew_checks_graph() -> None:
    psi = make_graph("affine", n_x=16, slope=0.5)
    constants = StructuralConstants()
    with pytest.raises(ValueError):
        corkscrew(AmbientPoint.make(1.0, 0.5, 0.5), 0.1, +1, constants, psi)
    on_graph = AmbientPoint.make(0.25, 0.5, 0.5)
    assert corkscrew(on_graph, 0.1, +1, constants, psi).x0 == pytest.approx(0.65)


def test_top_corkscrew_above_center() -> None:
    psi = make_graph("flat", n_x=16)
    cube = DyadicCube(3, (3, 20))
    constants = StructuralConstants(corkscrew_factor=2.0)
    pole = top_corkscrew(cube, psi, +1, constants)
    center = cube.center()
    assert pole.x == center.x
    assert pole.x0 == pytest.approx(2.0 * 2.0 * cube.side)
    assert pole.t == pytest.approx(center.t + 2.0 * cube.side**2)


def test_in_parabola() -> None:
    X = AmbientPoint.make(0.0, 0.0, 0.0)
    Y = AmbientPoint.make(0.1, 0.0, 1.0)
    assert in_parabola(Y, X, 0.01, +1, 1.0)
    assert not in_parabola(Y, X, 0.3, +1, 1.0)
    assert not in_parabola(Y, X, 0.01, -1, 1.0)
    assert not in_parabola(AmbientPoint.make(5.0, 0.0, 1.0), X, 0.01, +1, 1.0)


def test_dist_to_graph() -> None:
    psi = make_graph("flat", n_x=16)
    assert dist_to_graph(AmbientPoint.make(0.3, 0.5, 0.5), psi) == pytest.approx(0.3, rel=1e-6)
    assert dist_to_graph(AmbientPoint.make(0.0, 0.5, 0.5), psi) == 0.0
    with pytest.raises(ValueError):
        dist_to_graph(AmbientPoint.make(-0.1, 0.5, 0.5), psi)


def test_whitney_regions_nest() -> None:
    psi = make_graph("flat", n_x=16)
    cube = DyadicCube(3, (3, 20))
    rng = np.random.default_rng(3)
    plain = whitney_region(cube, "plain", 8, psi)
    star = whitney_region(cube, "*", 8, psi)
    double = whitney_region(cube, "**", 8, psi)
    triple = whitney_region(cube, "***", 8, psi)
    x0, x, t = plain.sample(rng, 200)
    assert plain.contains(x0, x, t).all()
    assert star.contains(x0, x, t).all()
    x0, x, t = double.sample(rng, 200)
    assert double.contains(x0, x, t).all()
    assert triple.contains(x0, x, t).all()
    low, high = plain.height_range
    assert low == pytest.approx(cube.side / 8.0)
    assert high == pytest.approx(8.0 * cube.side)


def test_whitney_region_errors() -> None:
    psi = make_graph("flat", n_x=16)
    cube = DyadicCube(3, (3, 20))
    with pytest.raises(ValueError):
        whitney_region(cube, "****", 8, psi)
    with pytest.raises(ValueError):
        whitney_region(cube, "plain", 12, psi)


def test_ambient_cube() -> None:
    cube = AmbientCube(AmbientPoint.make(0.5, 0.5, 0.5), 0.25)
    assert cube.side_length == pytest.approx(0.5)
    inside = cube.contains(np.array([0.6, 0.9, 0.5]), np.array([[0.5], [0.5], [0.5]]), np.array([0.55, 0.5, 0.6]))
    np.testing.assert_array_equal(inside, [True, False, False])
    with pytest.raises(ValueError):
        AmbientCube(AmbientPoint.make(0.0, 0.0, 0.0), 0.0)
