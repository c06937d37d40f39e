import math

import numpy as np
import pytest

from purlab.analysis import (
    LocalizedKernel,
    SpaceTimeField,
    approx_identity,
    approx_identity_dr,
    bmo_p_norm,
    dyadic_blocks,
    dyadic_top_side,
    fractional_integral_IP,
    half_derivative_quadrature,
    half_time_derivative,
    john_stromberg,
    localized_dt,
    lp_family,
    lp_square_function,
    mollify,
    norm_equivalence_band,
    regularized_distance,
    time_derivative,
    variable_mollify,
)
from purlab.graph import make_graph

N_X, N_T = 16, 256


def _time_mode(k: int) -> SpaceTimeField:
    t = np.arange(N_T) / N_T
    return SpaceTimeField(np.broadcast_to(np.cos(2.0 * np.pi * k * t), (N_X, N_T)).copy(), 1.0 / N_X)


def _random_field(seed: int = 0) -> SpaceTimeField:
    values = np.random.default_rng(seed).standard_normal((N_X, N_T))
    return SpaceTimeField(values - values.mean(), 1.0 / N_X)


def _half_split() -> SpaceTimeField:
    values = np.where(np.arange(N_X)[:, None] < N_X // 2, 1.0, -1.0) * np.ones((1, N_T))
    return SpaceTimeField(values, 1.0 / N_X)


def test_field_lattice() -> None:
    f = _random_field()
    assert f.ht == pytest.approx(1.0 / 256.0)
    assert f.cell_volume == pytest.approx(1.0 / (16 * 256))
    y, s = f.lattice_offsets()
    assert y.shape == (N_X, N_T, 1)
    assert s[0, 1] == pytest.approx(f.ht)
    assert s[0, -1] == pytest.approx(-f.ht)


def test_d12_on_time_mode() -> None:
    f = _time_mode(3)
    out = half_time_derivative(f, "D12")
    np.testing.assert_allclose(out.values, math.sqrt(3.0) * f.values, atol=1e-10)


def test_dt_on_time_mode() -> None:
    f = _time_mode(3)
    t = np.arange(N_T) / N_T
    out = half_time_derivative(f, "Dt")
    expected = -2.0 * np.pi * math.sqrt(3.0) * np.sin(2.0 * np.pi * 3 * t)
    np.testing.assert_allclose(out.values[0], expected, atol=1e-9)


def test_dt_is_time_derivative_of_fractional_integral() -> None:
    f = _random_field(1)
    composed = time_derivative(fractional_integral_IP(f)).values
    direct = half_time_derivative(f, "Dt").values
    np.testing.assert_allclose(composed, direct, atol=1e-9 * np.abs(direct).max())


def test_multipliers_annihilate_constants() -> None:
    f = SpaceTimeField(np.full((N_X, N_T), 2.5), 1.0 / N_X)
    for kind in ("Dt", "D12"):
        np.testing.assert_allclose(half_time_derivative(f, kind).values, 0.0, atol=1e-12)
    np.testing.assert_allclose(fractional_integral_IP(f).values, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        half_time_derivative(f, "D13")


def test_quadrature_matches_multiplier() -> None:
    f = _time_mode(2)
    spectral = half_time_derivative(f, "D12").values
    quadrature = half_derivative_quadrature(f).values
    assert np.abs(quadrature - spectral).max() <= 0.05 * np.abs(spectral).max()
    calibrated = half_derivative_quadrature(_time_mode(1)).values
    np.testing.assert_allclose(calibrated[0, 0], 1.0, rtol=1e-9)


def test_dyadic_blocks() -> None:
    assert dyadic_top_side((16, 256)) == 16
    assert dyadic_top_side((16, 64)) == 8
    values = np.arange(16 * 256, dtype=float).reshape(16, 256)
    blocks = dyadic_blocks(values, 8)
    assert blocks.shape == (2 * 4, 64 * 8)
    assert set(blocks[0]) == set(values[:8, :64].ravel())


def test_bmo_of_half_split() -> None:
    f = _half_split()
    assert bmo_p_norm(f) == pytest.approx(1.0)
    assert bmo_p_norm(f, "sliding") == pytest.approx(1.0)
    assert bmo_p_norm(f, generations=1) == pytest.approx(1.0)
    assert bmo_p_norm(SpaceTimeField(np.ones((N_X, N_T)), 1.0 / N_X)) == 0.0
    with pytest.raises(ValueError):
        bmo_p_norm(f, "random")


def test_john_stromberg_of_half_split() -> None:
    f = _half_split()
    loose = john_stromberg(f, 0.5)
    assert loose.ratio == pytest.approx(0.5)
    assert loose.minimal_m == pytest.approx(1.0, rel=1e-6)
    tight = john_stromberg(f, 1.0)
    assert tight.ratio == pytest.approx(0.0)
    constant = john_stromberg(SpaceTimeField(np.ones((N_X, N_T)), 1.0 / N_X), 0.1)
    assert constant.ratio == 0.0
    assert constant.minimal_m == 0.0


def test_approx_identity() -> None:
    f = _random_field(2)
    smoothed = approx_identity(f, 0.25)
    assert smoothed.mean() == pytest.approx(f.values.mean(), abs=1e-12)
    assert smoothed.std() < f.values.std()
    np.testing.assert_array_equal(approx_identity(f, 0.01), f.values)
    constant = SpaceTimeField(np.full((N_X, N_T), 3.0), 1.0 / N_X)
    np.testing.assert_allclose(approx_identity(constant, 0.25), 3.0)
    ambient = approx_identity(np.ones((8, N_X, N_T)), 0.25, "ambient_n1", steps=(0.1, 1.0 / N_X, 1.0 / N_T))
    np.testing.assert_allclose(ambient, 1.0)
    with pytest.raises(TypeError):
        approx_identity(f.values, 0.25)
    with pytest.raises(ValueError):
        approx_identity(f.values, 0.25, "ambient_n1")
    with pytest.raises(ValueError):
        approx_identity(f, 0.25, "radial")


def _distance_field(factor: float = 1.0) -> SpaceTimeField:
    x = np.arange(32) / 32.0
    values = factor * np.abs(x - 0.5)[:, None] * np.ones((1, 1024))
    return SpaceTimeField(values, 1.0 / 32.0)


def test_regularized_distance_sandwich() -> None:
    result = regularized_distance(_distance_field())
    low, high = result.sandwich
    assert 0.5 <= low <= high <= 2.0
    assert result.lip == pytest.approx(1.0)
    assert result.values.shape == (32, 1024)
    assert result.derivative_bounds["k1"] > 0


def test_regularized_distance_errors() -> None:
    with pytest.raises(ValueError):
        regularized_distance(_distance_field(2.0))
    with pytest.raises(ValueError):
        regularized_distance(_distance_field(-1.0))


def test_localized_dt_splits_dt() -> None:
    f = SpaceTimeField.from_graph(make_graph("regular", n_x=N_X, n_t=N_T, amp=0.05))
    split = localized_dt(f, 0.25)
    np.testing.assert_allclose(split.local.values + split.tail.values, half_time_derivative(f, "Dt").values,
                               atol=1e-12)
    assert split.tail_decay >= 0.0
    assert split.tail_oscillation >= 0.0
    kernel = LocalizedKernel(f, 0.25)
    assert kernel.ip_decay_constant() > 0
    with pytest.raises(ValueError):
        LocalizedKernel(f, 0.2)


def test_lp_family_errors() -> None:
    f = _random_field(3)
    with pytest.raises(ValueError):
        lp_family(f, 4, 0.25)
    with pytest.raises(ValueError):
        lp_family(f, 1, 0.25, gamma=1.5)
    with pytest.raises(ValueError):
        lp_family(f, 1, 0.01)
    with pytest.raises(ValueError, match="below the lattice step"):
        lp_family(f, 2, 0.25, gamma=0.125)


@pytest.mark.parametrize("j", [1, 2, 3])
def test_lp_square_function_is_quadratic(j: int) -> None:
    f = SpaceTimeField.from_graph(make_graph("regular", n_x=N_X, n_t=N_T, amp=0.05))
    radii = [0.125, 0.25, 0.5]
    base = lp_square_function(f, j, radii, gamma=0.5)
    assert base > 0
    doubled = lp_square_function(f.with_values(2.0 * f.values), j, radii, gamma=0.5)
    assert doubled == pytest.approx(4.0 * base, rel=1e-9)
    constant = SpaceTimeField(np.ones((N_X, N_T)), 1.0 / N_X)
    assert lp_square_function(constant, j, radii, gamma=0.5) == pytest.approx(0.0, abs=1e-20)


def test_localized_square_function_finite() -> None:
    f = SpaceTimeField.from_graph(make_graph("regular", n_x=N_X, n_t=N_T, amp=0.05))
    value = lp_square_function(f, 1, [0.125, 0.25], gamma=0.5, R_loc=0.25)
    assert np.isfinite(value)
    assert value > 0


def test_norm_equivalence_band() -> None:
    assert norm_equivalence_band(make_graph("flat", n_x=N_X, n_t=N_T)) == 1.0
    band = norm_equivalence_band(make_graph("regular", n_x=N_X, n_t=N_T, amp=0.05))
    assert 0 < band < math.inf


def test_mollifiers_keep_constants() -> None:
    values = np.full((N_X, N_T), 3.0)
    steps, modes = (1.0 / N_X, 1.0 / N_T), ("wrap", "wrap")
    f = _random_field()
    np.testing.assert_array_equal(mollify(f.values, 0.0, steps, modes), f.values)
    np.testing.assert_allclose(mollify(values, 0.25, steps, modes), 3.0)
    np.testing.assert_array_equal(variable_mollify(f.values, np.zeros((N_X, N_T)), steps, modes), f.values)
    np.testing.assert_allclose(variable_mollify(values, np.full((N_X, N_T), 0.2), steps, modes), 3.0)
    flat = SpaceTimeField(values, 1.0 / N_X)
    np.testing.assert_allclose(approx_identity_dr(flat, 0.25), 0.0, atol=1e-9)
