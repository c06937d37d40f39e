import numpy as np
import pytest

from purlab.geometry import DyadicCube, SpaceTimePoint
from purlab.graph import (
    GRAPH_KINDS,
    GraphDomain,
    beta_field,
    beta_fit,
    beta_number,
    carleson_packing_norm,
    cube_mask,
    dyadic_mask,
    lip_norm_estimate,
    make_graph,
    rescale,
    surface_measure,
)


@pytest.mark.parametrize("kind", GRAPH_KINDS)
def test_make_graph_kinds(kind: str) -> None:
    psi = make_graph(kind, n_x=16, n_t=256)
    assert psi.shape == (16, 256)
    assert psi.ht == pytest.approx(psi.hx**2)
    np.testing.assert_allclose(psi.box_lengths, [1.0, 1.0])
    assert np.isfinite(psi.full_values()).all()


def test_make_graph_errors() -> None:
    with pytest.raises(ValueError):
        make_graph("spiky", n_x=16)
    with pytest.raises(ValueError):
        make_graph("flat", n=1, n_x=16)
    with pytest.raises(ValueError):
        make_graph("affine", n_x=16, slope=60.0)


def test_values_are_read_only() -> None:
    psi = make_graph("regular", n_x=16)
    with pytest.raises(ValueError):
        psi.values[0, 0] = 1.0


def test_affine_graph() -> None:
    psi = make_graph("affine", n_x=16, n_t=256, slope=0.5, offset=0.1)
    value = psi(np.array([[0.3], [0.9]]), np.array([0.2, 0.7]))
    np.testing.assert_allclose(value, [0.25, 0.55])
    lip = lip_norm_estimate(psi)
    assert lip.spatial == pytest.approx(0.5)
    assert lip.temporal == pytest.approx(0.0, abs=1e-12)
    assert lip.combined == pytest.approx(0.5)
    domain = GraphDomain.from_graph(psi)
    assert domain.m0 == pytest.approx(2.5)
    inside = domain.contains(np.array([1.0, 0.0]), np.array([[0.3], [0.3]]), np.array([0.2, 0.2]))
    assert inside.tolist() == [True, False]


def test_regular_graph_lip_scales_with_amplitude() -> None:
    small = lip_norm_estimate(make_graph("regular", n_x=16, amp=0.02)).combined
    large = lip_norm_estimate(make_graph("regular", n_x=16, amp=0.04)).combined
    assert small > 0
    assert large == pytest.approx(2.0 * small, rel=1e-6)


def test_beta_vanishes_on_affine() -> None:
    psi = make_graph("affine", n_x=16, n_t=256, slope=0.7)
    center = SpaceTimePoint((0.5,), 0.5)
    assert beta_number(psi, center, 0.125) == pytest.approx(0.0, abs=1e-12)
    field = beta_field(psi, [0.25, 0.125])
    assert np.max(field.values[0]) == pytest.approx(0.0, abs=1e-12)


def test_beta_field_matches_pointwise_fit() -> None:
    psi = make_graph("regular", n_x=16, n_t=256, amp=0.05, kx=2)
    r = 0.125
    field = beta_field(psi, [r], weight="lebesgue")
    i, k = 5, 40
    center = SpaceTimePoint((i * psi.hx,), k * psi.ht)
    direct = beta_number(psi, center, r, weight="lebesgue")
    assert direct > 0
    assert field.values[0][i, k] == pytest.approx(direct, rel=1e-6, abs=1e-10)


def test_beta_scale_invariance() -> None:
    psi = make_graph("regular", n_x=16, n_t=256, amp=0.05)
    center = SpaceTimePoint((0.5,), 0.25)
    big = rescale(psi, 2.0)
    scaled = SpaceTimePoint((1.0,), 1.0)
    assert beta_number(big, scaled, 0.25) == pytest.approx(beta_number(psi, center, 0.125), rel=1e-9)


def test_beta_scale_must_fit() -> None:
    psi = make_graph("flat", n_x=16, n_t=256)
    with pytest.raises(ValueError):
        beta_number(psi, SpaceTimePoint((0.5,), 0.5), 0.75)
    with pytest.raises(ValueError):
        beta_number(psi, SpaceTimePoint((0.5,), 0.5), 0.1, weight="volume")


def test_packing_norm() -> None:
    affine = make_graph("affine", n_x=16, n_t=256, slope=0.3)
    assert carleson_packing_norm(affine, 0.25, 3) == pytest.approx(0.0, abs=1e-12)
    rough = make_graph("rough", n_x=16, n_t=256)
    shallow = carleson_packing_norm(rough, 0.25, 2)
    deep = carleson_packing_norm(rough, 0.25, 3)
    assert 0 < shallow <= deep
    with pytest.raises(ValueError):
        carleson_packing_norm(rough, 0.25, 4)


def test_packing_norm_growth_separates_rough_from_regular() -> None:
    rough = make_graph("rough", n_x=64, n_t=4096, levels=12)
    norms = {depth: carleson_packing_norm(rough, 0.5, depth) for depth in (2, 4, 6)}
    assert norms[4] >= 1.5 * norms[2]
    assert norms[6] >= 1.5 * norms[4]
    regular = make_graph("regular", n_x=64, n_t=4096, amp=0.05)
    assert carleson_packing_norm(regular, 0.5, 6) < 1.5 * carleson_packing_norm(regular, 0.5, 4)


def test_masks_and_surface_measure() -> None:
    psi = make_graph("flat", n_x=16, n_t=256)
    assert surface_measure(psi) == pytest.approx(1.0)
    mask = dyadic_mask(psi, DyadicCube(1, (0, 0)))
    assert int(mask.sum()) == 8 * 64
    assert surface_measure(psi, mask) == pytest.approx(0.125)
    box = cube_mask(psi, SpaceTimePoint((0.5,), 0.5), 0.25)
    assert int(box.sum()) == 8 * 32


def test_surface_measure_of_slope() -> None:
    psi = make_graph("affine", n_x=16, n_t=256, slope=0.75)
    assert surface_measure(psi) == pytest.approx(1.25)


def test_rescale() -> None:
    psi = make_graph("regular", n_x=16, amp=0.05)
    big = rescale(psi, 2.0)
    assert big.hx == pytest.approx(2.0 * psi.hx)
    np.testing.assert_allclose(big.values, 2.0 * psi.values)
    with pytest.raises(ValueError):
        rescale(psi, 0.0)


def test_beta_fit_on_affine_graph() -> None:
    psi = make_graph("affine", n_x=16, n_t=256, slope=0.5, offset=0.1)
    fit = beta_fit(psi, SpaceTimePoint((0.5,), 0.5), 0.125)
    assert fit.beta == pytest.approx(0.0, abs=1e-10)
    assert not fit.degenerate
    assert fit.n_points == 5 * 9
