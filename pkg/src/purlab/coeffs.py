"""Coefficient fields: generators, smoothing, oscillation and elliptic matrix algebra"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy import ndimage, stats

from .analysis import SpaceTimeField, RegularizedDistance, _plateau, regularized_distance, variable_mollify
from .graph import GraphDomain, GraphFunction
from .pde import (
    CoefficientField,
    FlatLattice,
    SolverConfig,
    ambient_derivatives,
    boundary_distance,
    carleson_box_sup,
)

__all__ = [
    "COEFFICIENT_KINDS",
    "boundary_distance",
    "make_coefficients",
    "spd_sqrt",
    "hessian_contraction",
    "multiply_bound",
    "random_elliptic",
    "matrix_lemma_check",
    "regularized_boundary_distance",
    "osc_field",
    "smooth_coefficients",
]

logger = logging.getLogger(__name__)


COEFFICIENT_KINDS = ("heat", "constant", "perturbed", "jump", "oscillating", "nonsymmetric")


def _vertical_gap(psi: GraphFunction, x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    shape = np.broadcast_shapes(np.shape(x0), np.shape(x)[:-1], np.shape(t))
    xs = np.broadcast_to(x, shape + (np.shape(x)[-1],))
    return np.broadcast_to(x0, shape) - psi(xs, np.broadcast_to(t, shape))


def make_coefficients(
    kind: str,
    n: int = 2,
    psi: GraphFunction | None = None,
    **params: Any,
) -> CoefficientField:
    """Build one of the named coefficient fields

    Parameters
    ----------
    kind: str
        heat, constant (``matrix``), perturbed (``eps``, ``width``), jump
        (``jump``, ``position``), oscillating (``eps``, ``floor``) or
        nonsymmetric (``skew``)
    psi: GraphFunction | None
        Graph of the domain; perturbed and oscillating fields depend on the
        vertical gap to it
    """
    eye = np.eye(n)
    if kind == "heat":
        return CoefficientField.identity(n)
    if kind == "constant":
        return CoefficientField.constant(np.asarray(params.get("matrix", eye), dtype=float))
    if kind == "nonsymmetric":
        skew = float(params.get("skew", 0.5))
        matrix = eye.copy()
        matrix[0, 1], matrix[1, 0] = skew, -skew
        return CoefficientField(lambda x0, x, t: matrix, math.sqrt(1.0 + skew * skew), False, True, kind, n)
    if kind == "jump":
        jump = float(params.get("jump", 0.5))
        position = float(params.get("position", 0.5))
        period = float(params.get("period", 1.0))

        def _jump(x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
            step = np.where(np.mod(np.asarray(x)[..., 0], period) >= position * period, 1.0 + jump, 1.0)
            return step[..., None, None] * eye

        return CoefficientField(_jump, 1.0 + abs(jump), True, True, kind, n)
    if psi is None:
        raise ValueError(f"coefficient kind {kind!r} needs the graph psi")
    eps = float(params.get("eps", 0.1))
    if not 0 <= eps < 1:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    period = float(psi.box_lengths[0])
    if kind == "perturbed":
        width = float(params.get("width", 0.25))

        def _perturbed(x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
            gap = _vertical_gap(psi, x0, x, t)
            scale = 1.0 + eps * _plateau(gap / width) * np.sin(2.0 * np.pi * np.asarray(x)[..., 0] / period)
            return scale[..., None, None] * eye

        return CoefficientField(_perturbed, 1.0 / (1.0 - eps), True, psi_static(psi), kind, n)
    if kind == "oscillating":
        floor = float(params.get("floor", psi.hx))

        def _oscillating(x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
            gap = np.maximum(_vertical_gap(psi, x0, x, t), floor)
            scale = 1.0 + eps * np.sin(np.asarray(x)[..., 0] / gap)
            return scale[..., None, None] * eye

        return CoefficientField(_oscillating, 1.0 / (1.0 - eps), True, psi_static(psi), kind, n)
    raise ValueError(f"unknown coefficient kind {kind!r}; expected one of {COEFFICIENT_KINDS}")


def psi_static(psi: GraphFunction) -> bool:
    return bool(np.ptp(psi.values, axis=-1).max() == 0.0)


def _require_symmetric(A: np.ndarray, what: str) -> None:
    scale = max(1.0, float(np.max(np.abs(A))))
    if not np.allclose(A, np.swapaxes(A, -1, -2), atol=1e-12 * scale, rtol=0.0):
        raise ValueError(f"{what} must be symmetric")


def _require_elliptic(A: np.ndarray, lam: float | None) -> np.ndarray:
    eig = np.linalg.eigvalsh(A)
    if np.any(eig <= 0):
        raise ValueError(f"matrix is not positive definite: smallest eigenvalue {float(eig.min()):.3g}")
    if lam is not None and (np.any(eig < 1.0 / lam - 1e-12) or np.any(eig > lam + 1e-12)):
        raise ValueError(f"eigenvalues {eig.min():.4g}..{eig.max():.4g} outside [1/{lam}, {lam}]")
    return eig


def spd_sqrt(A: np.ndarray, lam: float | None = None) -> np.ndarray:
    """Symmetric square root of a symmetric positive definite matrix (batched over leading axes)"""
    A = np.asarray(A, dtype=float)
    _require_symmetric(A, "A")
    eig, vec = np.linalg.eigh(A)
    _require_elliptic(A, lam)
    return (vec * np.sqrt(eig)[..., None, :]) @ np.swapaxes(vec, -1, -2)


def hessian_contraction(A: np.ndarray, B: np.ndarray, lam: float | None = None) -> np.ndarray:
    """a_ij b_ik a_kl b_jl, which equals |A^(1/2) B A^(1/2)|^2 for symmetric A and B"""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    _require_symmetric(A, "A")
    _require_symmetric(B, "B")
    _require_elliptic(A, lam)
    return np.einsum("...ij,...ik,...kl,...jl->...", A, B, A, B)


def multiply_bound(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """|A B| / |B| in the Frobenius norm"""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return np.linalg.norm(A @ B, axis=(-2, -1)) / np.linalg.norm(B, axis=(-2, -1))


def random_elliptic(rng: np.random.Generator, n: int, lam: float, size: int = 1) -> np.ndarray:
    """Random symmetric matrices with eigenvalues uniform in [1/lam, lam]"""
    rot = stats.ortho_group.rvs(n, size=size, random_state=rng).reshape(size, n, n)
    eig = rng.uniform(1.0 / lam, lam, size=(size, n))
    return (rot * eig[:, None, :]) @ np.swapaxes(rot, -1, -2)


@dataclass
class MatrixLemmaReport:
    draws: int
    lam: float
    violations: int
    max_identity_error: float
    ratio_band: tuple[float, float]
    multiply_band: tuple[float, float]


def matrix_lemma_check(
    rng: np.random.Generator, draws: int = 10_000, n: int = 2, lam: float = 10.0
) -> MatrixLemmaReport:
    """Two-sided bound lam^-2 |B|^2 <= a_ij b_ik a_kl b_jl <= lam^2 |B|^2 over random draws"""
    A = random_elliptic(rng, n, lam, draws)
    raw = rng.standard_normal((draws, n, n))
    B = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    value = hessian_contraction(A, B)
    root = spd_sqrt(A)
    direct = np.linalg.norm(root @ B @ root, axis=(-2, -1)) ** 2
    b2 = np.linalg.norm(B, axis=(-2, -1)) ** 2
    ratio = value / b2
    violations = int(np.count_nonzero((ratio < lam**-2 * (1 - 1e-12)) | (ratio > lam**2 * (1 + 1e-12))))
    error = float(np.max(np.abs(value - direct) / np.maximum(1.0, direct)))
    mult = multiply_bound(A, rng.standard_normal((draws, n, n)))
    return MatrixLemmaReport(
        draws, lam, violations, error, (float(ratio.min()), float(ratio.max())),
        (float(mult.min()), float(mult.max())),
    )


def _lattice_order(values: np.ndarray) -> np.ndarray:
    """(t, rho, x, ...) -> (rho, x, t, ...)"""
    return np.moveaxis(values, 0, 2)


def _time_first(values: np.ndarray) -> np.ndarray:
    return np.moveaxis(values, 2, 0)


def regularized_boundary_distance(
    lattice: FlatLattice,
    scale_factor: float = 0.125,
    lip_tolerance: float | None = None,
) -> tuple[np.ndarray, RegularizedDistance]:
    """delta and its smooth regularization delta' on a flattened lattice

    Needs h_rho == hx and dt == hx^2 so the lattice is parabolic.  Distances
    in flattened coordinates are Lip(1,1/2) up to the graph's own constant,
    which sets the default ``lip_tolerance``.
    """
    if not math.isclose(lattice.h_rho, lattice.hx) or not math.isclose(lattice.dt, lattice.hx**2):
        raise ValueError("regularized distance needs h_rho == hx and dt == hx^2")
    delta = boundary_distance(lattice)
    if lip_tolerance is None:
        lip_tolerance = 2.0 * float(np.abs(lattice.psi_x).max()) + float(np.sqrt(np.abs(lattice.psi_t).max()
                                                                              * lattice.hx)) + 1e-6
    field_ = SpaceTimeField(_lattice_order(delta), lattice.hx, lattice.dt)
    reg = regularized_distance(field_, scale_factor, periodic=False, lip_tolerance=lip_tolerance)
    reg = replace(reg, values=_time_first(reg.values))
    logger.info("regularized boundary distance: sandwich %s, bounds %s", reg.sandwich, reg.derivative_bounds)
    return delta, reg


def _windowed_spread(values: np.ndarray, half: int, half_t: int) -> np.ndarray:
    """max - min of a (t, rho, x) field over boxes of half-widths (half_t, half, half)"""
    size = (2 * half_t + 1, 2 * half + 1, 2 * half + 1)
    modes = ("nearest", "nearest", "wrap")
    return ndimage.maximum_filter(values, size=size, mode=modes) - ndimage.minimum_filter(values, size=size,
                                                                                         mode=modes)


def _box_sup(entries: np.ndarray, radius: np.ndarray, lattice: FlatLattice, spread: bool) -> np.ndarray:
    """Per node, sup over the box of the given radius of |A(Y) - A(Z)| (spread) or of |f(Y)|"""
    out = np.zeros(lattice.shape)
    halves = np.floor(radius / lattice.hx).astype(int)
    for half in np.unique(halves):
        half_t = int(math.floor((half * lattice.hx) ** 2 / lattice.dt))
        take = halves == half
        if half == 0 and half_t == 0:
            if not spread:
                out[take] = np.sqrt(np.sum(entries**2, axis=(-2, -1)))[take]
            continue
        acc = np.zeros(lattice.shape)
        for i in range(entries.shape[-2]):
            for j in range(entries.shape[-1]):
                comp = entries[..., i, j]
                if spread:
                    acc += _windowed_spread(comp, int(half), half_t) ** 2
                else:
                    size = (2 * half_t + 1, 2 * int(half) + 1, 2 * int(half) + 1)
                    acc += ndimage.maximum_filter(np.abs(comp), size=size, mode=("nearest", "nearest", "wrap")) ** 2
        out[take] = np.sqrt(acc)[take]
    return out


@dataclass
class OscField:
    """osc(A, X) on every lattice node; zero on Sigma"""

    values: np.ndarray
    c0: float


def osc_field(A: CoefficientField, lattice: FlatLattice, c0: float = 4.0,
              delta: np.ndarray | None = None) -> OscField:
    """sup over the Whitney box of radius delta(X)/c0 of |A(Y) - A(Z)|

    The usual choice c0 = 1000 sqrt(n+1) makes every box smaller than one
    cell at desk resolution, so the desk default is 4.
    """
    if c0 <= 0:
        raise ValueError(f"c0 must be positive, got {c0}")
    delta = boundary_distance(lattice) if delta is None else delta
    x0, x, t = lattice.mesh()
    samples = A.sample(x0, x[..., None], t)
    values = _box_sup(samples, delta / c0, lattice, spread=True)
    return OscField(values, c0)


@dataclass
class SmoothedCoefficients:
    """A~ = p_{c delta'} * A with the verification quantities"""

    field: CoefficientField
    samples: np.ndarray
    c: float
    margin: float
    symmetric_error: float
    perturbation: np.ndarray
    perturbation_max: float
    l2_carleson: float
    osc_ratio: float
    derivative_bounds: dict[str, float] = field(default_factory=dict)


def smooth_coefficients(
    A: CoefficientField,
    domain: GraphDomain,
    config: SolverConfig | None = None,
    t_start: float = 0.0,
    n_steps: int = 16,
    c: float | None = None,
    c0: float = 4.0,
    radii: Sequence[float] | None = None,
) -> SmoothedCoefficients:
    """Mollify A component-wise at the point-dependent scale c * delta'(X)

    Reports the ellipticity margin and symmetry of A~, the weighted derivative
    bounds against osc(A) and ||A||_inf, the perturbation
    a(Y) = sup over the Whitney box of |A - A~| and the Carleson norm of
    a^2 / delta.
    """
    n = 2
    c = 1.0 / (1e5 * math.sqrt(n + 1)) if c is None else c
    if config is None:
        config = SolverConfig(n_rho=max(4, int(round(1.0 / domain.psi.hx))), height=1.0)
    lattice = FlatLattice(domain.psi, config, t_start, n_steps)
    delta, reg = regularized_boundary_distance(lattice)
    x0, x, t = lattice.mesh()
    samples = A.sample(x0, x[..., None], t)
    scale = c * reg.values
    steps = (lattice.h_rho, lattice.hx, lattice.dt)
    modes = ("nearest", "wrap", "nearest")
    smoothed = np.empty(samples.shape)
    for i in range(samples.shape[-2]):
        for j in range(samples.shape[-1]):
            comp = _lattice_order(samples[..., i, j])
            smoothed[..., i, j] = _time_first(variable_mollify(comp, _lattice_order(scale), steps, modes))

    sym = 0.5 * (smoothed + np.swapaxes(smoothed, -1, -2))
    low = np.linalg.eigvalsh(sym)[..., 0]
    high = np.linalg.norm(smoothed, 2, axis=(-2, -1))
    margin = float(np.min(np.minimum(low - 1.0 / A.lam, A.lam - high)))
    symmetric_error = float(np.max(np.abs(smoothed - np.swapaxes(smoothed, -1, -2)))) if A.symmetric else 0.0

    perturbation = _box_sup(samples - smoothed, 0.5 * delta, lattice, spread=False)
    interior = lattice.rho[None, :, None] > 0
    density = np.where(interior, perturbation**2 / np.where(interior, delta, 1.0), 0.0)
    if radii is None:
        radii = [config.height * 2.0 ** (-k) for k in range(1, 8) if config.height * 2.0 ** (-k) >= 2 * lattice.h_rho]
    l2 = carleson_box_sup(density, lattice, radii)

    osc = osc_field(A, lattice, c0, delta).values
    grad2 = np.zeros(lattice.shape)
    dt2 = np.zeros(lattice.shape)
    hess2 = np.zeros(lattice.shape)
    for i in range(samples.shape[-2]):
        for j in range(samples.shape[-1]):
            d = ambient_derivatives(smoothed[..., i, j], lattice)
            grad2 += d["u0"] ** 2 + d["ux"] ** 2
            dt2 += d["ut"] ** 2
            hess2 += d["u00"] ** 2 + 2.0 * d["u0x"] ** 2 + d["uxx"] ** 2
    inner = np.zeros(lattice.shape, dtype=bool)
    inner[1:-1, 1:-1, :] = True
    weighted = (np.sqrt(grad2) + np.sqrt(dt2) * delta) * delta
    sup_a = float(np.max(np.linalg.norm(samples, 2, axis=(-2, -1))))
    active = inner & (osc > 1e-12)
    osc_ratio = float(np.max(weighted[active] / osc[active])) if active.any() else 0.0
    bounds = {
        "k1": float((np.sqrt(grad2) * delta)[inner].max() / sup_a) if inner.any() else 0.0,
        "k2": float((np.sqrt(hess2) * delta**2)[inner].max() / sup_a) if inner.any() else 0.0,
    }
    tilde = CoefficientField.on_lattice(lattice, smoothed, A.lam, A.symmetric, f"{A.name}~")
    logger.info("smoothed %s with c = %.3g: margin %.3g, a_max %.3g, L2 %.3g",
                A.name, c, margin, float(perturbation.max()), l2)
    return SmoothedCoefficients(
        tilde, smoothed, c, margin, symmetric_error, perturbation, float(perturbation.max()), l2, osc_ratio, bounds
    )
