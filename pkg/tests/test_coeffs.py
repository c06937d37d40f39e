import math

import numpy as np
import pytest

from purlab.coeffs import (
    COEFFICIENT_KINDS,
    hessian_contraction,
    make_coefficients,
    matrix_lemma_check,
    multiply_bound,
    osc_field,
    random_elliptic,
    regularized_boundary_distance,
    smooth_coefficients,
    spd_sqrt,
)
from purlab.graph import GraphDomain, make_graph
from purlab.pde import FlatLattice, SolverConfig

CONFIG = SolverConfig(n_rho=16, height=1.0)


@pytest.fixture(name="flat_domain")
def flat_domain_fixture() -> GraphDomain:
    return GraphDomain.from_graph(make_graph("flat", n_x=16, n_t=256))


@pytest.mark.parametrize("kind", COEFFICIENT_KINDS)
def test_make_coefficients(kind: str, flat_domain: GraphDomain) -> None:
    A = make_coefficients(kind, psi=flat_domain.psi)
    assert A.dim == 2
    sample = A.sample(np.full(4, 0.3), np.linspace(0.0, 0.9, 4)[:, None], np.zeros(4))
    assert sample.shape == (4, 2, 2)
    sym = 0.5 * (sample + np.swapaxes(sample, -1, -2))
    assert np.linalg.eigvalsh(sym).min() >= 1.0 / A.lam - 1e-12


def test_make_coefficients_errors(flat_domain: GraphDomain) -> None:
    with pytest.raises(ValueError):
        make_coefficients("anisotropic", psi=flat_domain.psi)
    with pytest.raises(ValueError):
        make_coefficients("perturbed")
    with pytest.raises(ValueError):
        make_coefficients("oscillating", psi=flat_domain.psi, eps=1.0)


def test_jump_coefficients() -> None:
    A = make_coefficients("jump", jump=0.5)
    left = A.sample(0.1, np.array([0.25]), 0.0)
    right = A.sample(0.1, np.array([0.75]), 0.0)
    np.testing.assert_allclose(left, np.eye(2))
    np.testing.assert_allclose(right, 1.5 * np.eye(2))
    assert A.lam == pytest.approx(1.5)


def test_nonsymmetric_coefficients() -> None:
    A = make_coefficients("nonsymmetric", skew=0.5)
    assert not A.symmetric
    assert A.lam == pytest.approx(math.sqrt(1.25))
    np.testing.assert_allclose(A.transpose().sample(0.1, np.array([0.5]), 0.0),
                               A.sample(0.1, np.array([0.5]), 0.0).T)


def test_spd_sqrt() -> None:
    rng = np.random.default_rng(0)
    A = random_elliptic(rng, 2, 4.0, size=5)
    root = spd_sqrt(A, lam=4.0)
    np.testing.assert_allclose(root @ root, A, atol=1e-12)
    eig = np.linalg.eigvalsh(A)
    assert eig.min() >= 0.25 - 1e-12
    assert eig.max() <= 4.0 + 1e-12
    with pytest.raises(ValueError):
        spd_sqrt(np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        spd_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        spd_sqrt(np.diag([0.1, 1.0]), lam=2.0)


def test_hessian_contraction_identity() -> None:
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    B = np.array([[1.0, -2.0], [-2.0, 0.5]])
    root = spd_sqrt(A)
    expected = np.linalg.norm(root @ B @ root) ** 2
    assert float(hessian_contraction(A, B)) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        hessian_contraction(A, np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_multiply_bound() -> None:
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert float(multiply_bound(3.0 * np.eye(2), B)) == pytest.approx(3.0)


def test_matrix_lemma() -> None:
    report = matrix_lemma_check(np.random.default_rng(1), draws=2000, n=2, lam=10.0)
    assert report.violations == 0
    assert report.max_identity_error < 1e-9
    low, high = report.ratio_band
    assert 1e-2 <= low <= high <= 1e2
    assert report.multiply_band[1] <= 10.0 * (1 + 1e-12)


def test_regularized_boundary_distance(flat_domain: GraphDomain) -> None:
    lattice = FlatLattice(flat_domain.psi, CONFIG, 0.0, 8)
    delta, reg = regularized_boundary_distance(lattice)
    np.testing.assert_allclose(delta[:, :, 0], np.broadcast_to(lattice.rho, (9, 17)), atol=1e-12)
    assert reg.values.shape == lattice.shape
    low, high = reg.sandwich
    assert 0.5 <= low <= high <= 2.0
    coarse = FlatLattice(flat_domain.psi, SolverConfig(n_rho=8, height=1.0), 0.0, 8)
    with pytest.raises(ValueError):
        regularized_boundary_distance(coarse)


def test_osc_field(flat_domain: GraphDomain) -> None:
    lattice = FlatLattice(flat_domain.psi, CONFIG, 0.0, 8)
    heat = osc_field(make_coefficients("heat"), lattice)
    assert heat.values.max() == pytest.approx(0.0, abs=1e-14)
    jump = osc_field(make_coefficients("jump", jump=0.5), lattice)
    assert jump.values.max() > 0.0
    np.testing.assert_allclose(jump.values[:, 0, :], 0.0)
    with pytest.raises(ValueError):
        osc_field(make_coefficients("heat"), lattice, c0=0.0)


def test_smooth_heat_is_unchanged(flat_domain: GraphDomain) -> None:
    smoothed = smooth_coefficients(make_coefficients("heat"), flat_domain, n_steps=8)
    assert smoothed.perturbation_max == pytest.approx(0.0, abs=1e-12)
    assert smoothed.margin == pytest.approx(0.0, abs=1e-12)
    assert smoothed.l2_carleson == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(smoothed.samples, np.broadcast_to(np.eye(2), smoothed.samples.shape), atol=1e-12)


def test_smooth_jump(flat_domain: GraphDomain) -> None:
    A = make_coefficients("jump", jump=0.5)
    smoothed = smooth_coefficients(A, flat_domain, n_steps=8, c=0.5)
    assert smoothed.margin >= -1e-12
    assert smoothed.symmetric_error == pytest.approx(0.0, abs=1e-12)
    assert smoothed.perturbation_max > 0.0
    assert np.isfinite(smoothed.l2_carleson)
    value = smoothed.field.sample(np.array(0.5), np.array([0.25]), np.array(0.0))
    assert value.shape == (2, 2)
