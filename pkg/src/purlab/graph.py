"""Lip(1,1/2) graph functions, generators, Lip-norm estimates, beta numbers and surface measure"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .geometry import DyadicCube, SpaceTimePoint

logger = logging.getLogger(__name__)


GRAPH_KINDS = ("flat", "affine", "bump", "regular", "rough")


@dataclass(frozen=True)
class GraphFunction:
    """Sampled graph function psi on a periodic parabolic lattice

    The lattice has spatial step ``hx`` on every spatial axis and temporal step
    ``hx**2``; it is anchored at the origin.  ``values`` holds the periodic part
    with the spatial axes first and time last.  An exact affine trend
    ``slope . x + offset`` is added on top, so affine graphs are represented
    without wrap-around error.
    """

    values: np.ndarray
    hx: float
    slope: tuple[float, ...] = ()
    offset: float = 0.0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim < 2:
            raise ValueError("GraphFunction values need at least one spatial and one time axis")
        if self.hx <= 0:
            raise ValueError(f"grid step must be positive, got {self.hx}")
        slope = tuple(float(s) for s in self.slope) or (0.0,) * (values.ndim - 1)
        if len(slope) != values.ndim - 1:
            raise ValueError(f"slope has {len(slope)} entries for {values.ndim - 1} spatial axes")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "slope", slope)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def n(self) -> int:
        """Space-time dimension"""
        return self.values.ndim

    @property
    def ht(self) -> float:
        return self.hx**2

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def steps(self) -> np.ndarray:
        return np.array([self.hx] * (self.n - 1) + [self.ht])

    @property
    def box_lengths(self) -> np.ndarray:
        return np.asarray(self.shape, dtype=float) * self.steps

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.steps))

    def axes(self) -> list[np.ndarray]:
        return [np.arange(size) * step for size, step in zip(self.shape, self.steps)]

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Lattice coordinates: x with shape (*shape, n-1) and t with shape (*shape)"""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh[:-1], axis=-1), mesh[-1]

    def trend(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ np.asarray(self.slope) + self.offset

    def full_values(self) -> np.ndarray:
        """psi on the lattice, affine trend included"""
        x, _ = self.coordinates()
        return self.values + self.trend(x)

    def __call__(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of psi at arbitrary points"""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        coords = [x[..., i] / self.hx for i in range(self.n - 1)] + [t / self.ht]
        flat = np.stack([c.ravel() for c in coords])
        periodic = ndimage.map_coordinates(self.values, flat, order=1, mode="grid-wrap")
        return periodic.reshape(t.shape) + self.trend(x)

    def spatial_gradient(self) -> np.ndarray:
        """Centred periodic differences, shape (n-1, *shape)"""
        grads = []
        for axis in range(self.n - 1):
            diff = np.roll(self.values, -1, axis) - np.roll(self.values, 1, axis)
            grads.append(diff / (2.0 * self.hx) + self.slope[axis])
        return np.stack(grads)

    def time_derivative(self) -> np.ndarray:
        axis = self.n - 1
        return (np.roll(self.values, -1, axis) - np.roll(self.values, 1, axis)) / (2.0 * self.ht)

    def with_values(self, values: np.ndarray) -> GraphFunction:
        return GraphFunction(values, self.hx, self.slope, self.offset)


@dataclass(frozen=True)
class LipEstimate:
    spatial: float
    temporal: float
    combined: float


@dataclass(frozen=True)
class GraphDomain:
    """Omega = {x0 > psi(x, t)} with M0 = 2 + Lip(1,1/2) norm of psi"""

    psi: GraphFunction
    lip: LipEstimate

    @classmethod
    def from_graph(cls, psi: GraphFunction) -> GraphDomain:
        return cls(psi, lip_norm_estimate(psi))

    @property
    def m0(self) -> float:
        return 2.0 + self.lip.combined

    def contains(self, x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.asarray(x0) > self.psi(x, t)


@dataclass(frozen=True)
class BetaFit:
    beta: float
    coefficients: np.ndarray
    degenerate: bool
    n_points: int


@dataclass
class BetaField:
    """beta(r, x, t) at every lattice centre for each dyadic scale r"""

    radii: np.ndarray
    values: list[np.ndarray] = field(default_factory=list)

    def mean_square(self) -> np.ndarray:
        return np.array([float(np.mean(v**2)) for v in self.values])


def _lattice(n: int, n_x: int, length: float, n_t: int | None) -> tuple[float, tuple[int, ...], float]:
    hx = length / n_x
    n_t = n_x * n_x if n_t is None else n_t
    return hx, (n_x,) * (n - 1) + (n_t,), n_t * hx * hx


def _smooth_cutoff(u: np.ndarray) -> np.ndarray:
    """exp(-1/(1-u^2)) normalised to 1 at the origin, zero for |u| >= 1"""
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
    return out


def make_graph(
    kind: str,
    n: int = 2,
    n_x: int = 32,
    length: float = 1.0,
    n_t: int | None = None,
    lip_cap: float = 50.0,
    **params: Any,
) -> GraphFunction:
    """Build a graph of one of the generator kinds

    Parameters
    ----------
    kind: str
        One of flat, affine, bump, regular, rough
    n: int
        Space-time dimension
    n_x: int
        Lattice points per spatial axis
    length: float
        Spatial period of the box
    n_t: int | None
        Lattice points in time, defaults to n_x**2 (time period length**2)
    lip_cap: float
        Largest accepted Lip(1,1/2) estimate

    Notes
    -----
    Kind parameters:

    * affine: ``slope`` (sequence or float), ``offset``
    * bump: ``max_slope``, ``width`` (fraction of the box)
    * regular: ``amp``, ``kx``, ``kt``: amp * length * sin(2 pi kx x / L) * sin(2 pi kt t / T)
    * rough: ``amp``, ``levels``: lacunary triangle waves in t times a smooth profile in x
    """
    if n < 2:
        raise ValueError(f"graph dimension must be >= 2, got {n}")
    hx, shape, period_t = _lattice(n, n_x, length, n_t)
    x_axes = [np.arange(shape[0]) * hx] * (n - 1)
    t_axis = np.arange(shape[-1]) * hx * hx
    mesh = np.meshgrid(*x_axes, t_axis, indexing="ij")
    xs, ts = mesh[:-1], mesh[-1]
    slope: tuple[float, ...] = ()
    offset = 0.0

    if kind == "flat":
        values = np.zeros(shape)
    elif kind == "affine":
        raw = params.get("slope", 1.0)
        slope = tuple(np.broadcast_to(np.atleast_1d(np.asarray(raw, dtype=float)), (n - 1,)))
        offset = float(params.get("offset", 0.0))
        values = np.zeros(shape)
    elif kind == "bump":
        max_slope = float(params.get("max_slope", 0.5))
        width = float(params.get("width", 0.25))
        radius2 = sum(((x - 0.5 * length) / (width * length)) ** 2 for x in xs)
        radius2 = radius2 + ((ts - 0.5 * period_t) / (width * length) ** 2) ** 2
        values = _smooth_cutoff(np.sqrt(radius2))
        steepest = max(
            float(np.max(np.abs(np.roll(values, -1, axis) - values))) / hx for axis in range(n - 1)
        )
        values = values * (max_slope / steepest if steepest > 0 else 0.0)
    elif kind == "regular":
        amp = float(params.get("amp", 0.05))
        kx = int(params.get("kx", 1))
        kt = int(params.get("kt", 1))
        values = amp * length * np.sin(2.0 * np.pi * kt * ts / period_t)
        for x in xs:
            values = values * np.sin(2.0 * np.pi * kx * x / length)
    elif kind == "rough":
        amp = float(params.get("amp", 0.25))
        levels = int(params.get("levels", 6))
        series = np.zeros_like(ts)
        for k in range(levels):
            phase = (2.0**k) * ts / period_t
            series += 2.0 ** (-0.5 * k) * np.abs(phase - np.round(phase))
        profile = np.ones_like(ts)
        for x in xs:
            profile = profile * 0.5 * (1.0 - np.cos(2.0 * np.pi * x / length))
        values = amp * math.sqrt(period_t) * series * profile
    else:
        raise ValueError(f"unknown graph kind {kind!r}, expected one of {GRAPH_KINDS}")

    psi = GraphFunction(values, hx, slope, offset)
    lip = lip_norm_estimate(psi)
    if lip.combined > lip_cap:
        raise ValueError(f"graph kind {kind} has Lip(1,1/2) estimate {lip.combined:.3g} above cap {lip_cap}")
    logger.info("built %s graph on %s lattice, Lip estimate %.4g", kind, shape, lip.combined)
    return psi


def _shifted_difference(values: np.ndarray, shift: np.ndarray, periodic: bool) -> np.ndarray:
    """values[i + shift] - values[i], wrapping or restricted to the overlap"""
    if periodic:
        moved = values
        for axis, step in enumerate(shift):
            moved = np.roll(moved, -int(step), axis)
        return moved - values
    base = []
    moved_ = []
    for size, step in zip(values.shape, shift):
        step = int(step)
        base.append(slice(max(0, -step), size - max(0, step)))
        moved_.append(slice(max(0, step), size + min(0, step)))
    return values[tuple(moved_)] - values[tuple(base)]


def lip_norm_estimate(
    psi: GraphFunction,
    reach: int = 3,
    n_random: int = 4000,
    rng: np.random.Generator | None = None,
    periodic: bool = True,
) -> LipEstimate:
    """Spatial Lip constant, temporal half-Hoelder constant and combined Lip(1,1/2) norm

    Difference quotients are taken over all lattice offsets within ``reach``
    cells plus a random sample of long-range pairs inside the box.  With
    ``periodic=False`` only pairs inside the box are compared, for sampled
    functions that do not wrap.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = psi.n
    spatial = temporal = combined = 0.0
    ranges = [range(-reach, reach + 1)] * (n - 1) + [range(0, reach + 1)]
    for offset in np.ndindex(*[len(r) for r in ranges]):
        shift = np.array([r[o] for r, o in zip(ranges, offset)])
        if not shift.any():
            continue
        dx = shift[:-1] * psi.hx
        diff = np.abs(_shifted_difference(psi.values, shift, periodic) + float(dx @ np.asarray(psi.slope)))
        if diff.size == 0:
            continue
        worst = float(diff.max())
        dist_x = float(np.linalg.norm(dx))
        dist_t = math.sqrt(abs(shift[-1]) * psi.ht)
        combined = max(combined, worst / (dist_x + dist_t))
        if shift[-1] == 0:
            spatial = max(spatial, worst / dist_x)
        elif not shift[:-1].any():
            temporal = max(temporal, worst / dist_t)
    if n_random:
        full = psi.full_values()
        first = [rng.integers(0, size, n_random) for size in psi.shape]
        second = [rng.integers(0, size, n_random) for size in psi.shape]
        gap = np.stack([(a - b) * s for a, b, s in zip(first, second, psi.steps)], axis=-1)
        dist = np.linalg.norm(gap[:, :-1], axis=-1) + np.sqrt(np.abs(gap[:, -1]))
        diff = np.abs(full[tuple(first)] - full[tuple(second)])
        ok = dist > 0
        if ok.any():
            combined = max(combined, float(np.max(diff[ok] / dist[ok])))
    return LipEstimate(spatial, temporal, combined)


def _surface_weight(psi: GraphFunction, weight: str) -> np.ndarray:
    if weight == "lebesgue":
        return np.ones(psi.shape)
    if weight == "surface":
        return np.sqrt(1.0 + np.sum(psi.spatial_gradient() ** 2, axis=0))
    raise ValueError(f"unknown beta weight {weight!r}")


def _check_scale(psi: GraphFunction, r: float) -> None:
    lengths = psi.box_lengths
    if r <= 0 or 2.0 * r > lengths[:-1].min() or 2.0 * r * r > lengths[-1]:
        raise ValueError(f"cube of radius {r} does not fit in the periodic box {lengths}")


def beta_fit(psi: GraphFunction, center: SpaceTimePoint, r: float, weight: str = "surface") -> BetaFit:
    """Best affine-in-space fit of psi on the closed cube Q_r(center)"""
    _check_scale(psi, r)
    index_ranges = []
    for axis, c in enumerate(center.as_array()):
        step = psi.steps[axis]
        half = r if axis < psi.n - 1 else r * r
        lo = math.ceil((c - half) / step - 1e-12)
        hi = math.floor((c + half) / step + 1e-12)
        index_ranges.append(np.arange(lo, hi + 1))
    mesh = np.meshgrid(*index_ranges, indexing="ij")
    wrapped = tuple(m % size for m, size in zip(mesh, psi.shape))
    samples = psi.values[wrapped].ravel()
    weights = _surface_weight(psi, weight)[wrapped].ravel()
    offsets = np.stack([m.ravel() * psi.hx - c for m, c in zip(mesh[:-1], center.x)], axis=-1)
    design = np.column_stack([np.ones(samples.size), offsets])
    root = np.sqrt(weights)
    coeffs, _, rank, _ = np.linalg.lstsq(design * root[:, None], samples * root, rcond=None)
    degenerate = rank < design.shape[1]
    if degenerate:
        logger.warning("degenerate affine fit at %s, r=%g: falling back to the mean", center, r)
        mean = float(np.sum(weights * samples) / np.sum(weights))
        coeffs = np.zeros(design.shape[1])
        coeffs[0] = mean
    resid = samples - design @ coeffs
    beta2 = float(np.sum(weights * resid**2) / (np.sum(weights) * r * r))
    return BetaFit(math.sqrt(max(beta2, 0.0)), coeffs, bool(degenerate), int(samples.size))


def beta_number(psi: GraphFunction, center: SpaceTimePoint, r: float, weight: str = "surface") -> float:
    """beta(r, x, t): normalised L2 distance from psi to affine functions of y on Q_r"""
    return beta_fit(psi, center, r, weight).beta


def _window_sum(field_: np.ndarray, half_x: int, half_t: int, powers: Sequence[int]) -> np.ndarray:
    """Sum of field(y) * prod_i (y_i - x_i)^p_i over the lattice box around every x"""
    out = field_
    offsets = np.arange(-half_x, half_x + 1, dtype=float)
    for axis, power in enumerate(powers):
        out = ndimage.correlate1d(out, offsets**power, axis=axis, mode="wrap")
    size = 2 * half_t + 1
    return ndimage.uniform_filter1d(out, size, axis=out.ndim - 1, mode="wrap") * size


def beta_field(psi: GraphFunction, radii: Sequence[float], weight: str = "surface") -> BetaField:
    """beta at every lattice centre for each radius, via windowed moment sums

    The radii are rounded to whole cells; the time window holds (r/hx)^2 cells
    on either side.  Only the periodic part of psi enters since affine trends
    are absorbed by the fit.
    """
    weights = _surface_weight(psi, weight)
    d = psi.n - 1
    out = BetaField(np.asarray(radii, dtype=float))
    for r in radii:
        _check_scale(psi, r)
        m = max(1, int(round(r / psi.hx)))
        half_t = m * m
        zero = (0,) * d
        unit_powers = [tuple(1 if a == i else 0 for a in range(d)) for i in range(d)]
        gram = np.empty(psi.shape + (d + 1, d + 1))
        gram[..., 0, 0] = _window_sum(weights, m, half_t, zero)
        for i, p_i in enumerate(unit_powers):
            gram[..., 0, i + 1] = gram[..., i + 1, 0] = _window_sum(weights, m, half_t, p_i)
            for j in range(i, d):
                powers = tuple(np.add(p_i, unit_powers[j]))
                gram[..., i + 1, j + 1] = gram[..., j + 1, i + 1] = _window_sum(weights, m, half_t, powers)
        rhs = np.stack(
            [_window_sum(weights * psi.values, m, half_t, zero)]
            + [_window_sum(weights * psi.values, m, half_t, p) for p in unit_powers],
            axis=-1,
        )
        quad = _window_sum(weights * psi.values**2, m, half_t, zero)
        solved = np.einsum("...ij,...j->...i", np.linalg.pinv(gram), rhs)
        resid = quad - np.einsum("...i,...i->...", rhs, solved)
        beta2 = np.clip(resid, 0.0, None) / (gram[..., 0, 0] * (m * psi.hx) ** 2)
        out.values.append(np.sqrt(beta2))
    return out


def carleson_packing_norm(
    psi: GraphFunction,
    top_radius: float | None = None,
    depth: int = 4,
    weight: str = "surface",
) -> float:
    """Carleson norm of beta^2 over dyadic scales below top_radius

    sup over lattice centres (z, tau) of
    R^(-n-1) * sum_{r = R 2^-k, k < depth} sum_{(x,t) in Q_R(z,tau)} beta^2(r,x,t) * cell / r
    """
    lengths = psi.box_lengths
    top = float(top_radius) if top_radius is not None else min(0.5 * lengths[:-1].min(),
                                                                math.sqrt(0.5 * lengths[-1]))
    radii = [top * 2.0 ** (-k) for k in range(depth)]
    if radii[-1] < psi.hx * (1.0 - 1e-9):
        raise ValueError(f"depth {depth} below the lattice resolution at radius {top}")
    field_ = beta_field(psi, radii, weight)
    m_top = int(round(top / psi.hx))
    total = np.zeros(psi.shape)
    for r, beta in zip(field_.radii, field_.values):
        total += _window_sum(beta**2, m_top, m_top * m_top, (0,) * (psi.n - 1)) / r
    norm = float(total.max()) * psi.cell_volume / top ** (psi.n + 1)
    logger.debug("packing norm %.4g at depth %d", norm, depth)
    return norm


def cube_mask(psi: GraphFunction, center: SpaceTimePoint, r: float) -> np.ndarray:
    """Lattice nodes of the half-open cube -r <= y - x < r, -r^2 <= s - t < r^2"""
    x, t = psi.coordinates()
    inside = np.all((x >= np.asarray(center.x) - r) & (x < np.asarray(center.x) + r), axis=-1)
    return inside & (t >= center.t - r * r) & (t < center.t + r * r)


def dyadic_mask(psi: GraphFunction, cube: DyadicCube) -> np.ndarray:
    x, t = psi.coordinates()
    return cube.contains_points(x, t)


def surface_measure(psi: GraphFunction, mask: np.ndarray | None = None) -> float:
    """sigma(Psi(E)) = integral over E of sqrt(1 + |grad_x psi|^2), E a union of lattice cells"""
    density = _surface_weight(psi, "surface") * psi.cell_volume
    if mask is None:
        return float(density.sum())
    return float(density[np.asarray(mask, dtype=bool)].sum())


def rescale(psi: GraphFunction, lam: float) -> GraphFunction:
    """Parabolic rescaling x -> lam x, t -> lam^2 t, psi -> lam psi"""
    if lam <= 0:
        raise ValueError(f"rescaling factor must be positive, got {lam}")
    return GraphFunction(psi.values * lam, psi.hx * lam, psi.slope, psi.offset * lam)
