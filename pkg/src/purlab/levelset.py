"""Level sets of the normalized Green function and the approximating graphs of a regime

For a stopping-time regime S the stopping distance d(x) = inf_{Q in S}
(dist(x, Q) + diam(Q)) is regularized to h, and psi(r; x) solves
u(psi(r; x), x) = r.  The approximating graph is psi_S = psi(h(x); x) cut
off to 4Q(S) and shifted to vanish at the centre of Q(S).

Every function here works with n = 2 graph lattices: ``x`` is the single
spatial coordinate.  ``u`` is either a ``SolutionField`` or any vectorised
callable u(x0, x, t).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import integrate, optimize

from .analysis import (
    LocalizedKernel,
    RegularizedDistance,
    SpaceTimeField,
    _best_level_mass,
    bmo_p_norm,
    fractional_integral_IP,
    half_time_derivative,
    john_stromberg,
    mollify,
    regularized_distance,
)
from .corona import StoppingTimeRegime, _ramp, sawtooth
from .geometry import DyadicCube, StructuralConstants
from .graph import GraphDomain, GraphFunction, dyadic_mask, lip_norm_estimate, surface_measure
from .pde import CoefficientField, GreenFunction, SolutionField, SolverConfig, green_function, sample_point

logger = logging.getLogger(__name__)

Level = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _level_function(u: SolutionField | Level) -> Level:
    return u.evaluate if isinstance(u, SolutionField) else u


def _time_window(u: SolutionField | Level) -> tuple[float, float]:
    if isinstance(u, SolutionField):
        return float(u.lattice.t[0]), float(u.lattice.t[-1])
    return -math.inf, math.inf


def _slab_top(u: SolutionField | Level) -> float:
    if isinstance(u, SolutionField):
        lat = u.lattice
        return lat.config.height - 2.0 * lat.h_rho
    return math.inf


def _difference_steps(u: SolutionField | Level, psi: GraphFunction) -> tuple[float, float, float]:
    if isinstance(u, SolutionField):
        lat = u.lattice
        return lat.h_rho, lat.hx, lat.dt
    return psi.hx, psi.hx, psi.ht


def stopping_distance(regime: StoppingTimeRegime, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """d = min over Q in S of dist((x, t), Q) + diam(Q); x has the spatial coordinates last"""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    best = np.full(t.shape, np.inf)
    for cube in regime:
        np.minimum(best, cube.distance_to_points(x, t) + cube.diameter, out=best)
    return best


def stopping_distance_field(regime: StoppingTimeRegime, psi: GraphFunction) -> SpaceTimeField:
    """The stopping distance on every node of the graph lattice"""
    x, t = psi.coordinates()
    return SpaceTimeField(stopping_distance(regime, x, t), psi.hx)


def distance_lip(d: SpaceTimeField, n_random: int = 4000) -> float:
    """Lip(1,1/2) estimate of a sampled distance-type function, without wrap-around"""
    return lip_norm_estimate(GraphFunction(np.array(d.values), d.hx), n_random=n_random, periodic=False).combined


def search_interval(
    regime: StoppingTimeRegime,
    u: SolutionField | Level,
    psi: GraphFunction,
    x: np.ndarray,
    t: np.ndarray,
    constants: StructuralConstants,
) -> tuple[np.ndarray, np.ndarray]:
    """Vertical search interval [psi(x, t), psi(x, t) + height] for the level solves

    The height is the largest diam(Q) / delta over the cubes Q in S whose
    dilate 4Q holds (x, t), capped at the top of the solver slab.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    base = psi(x[..., None], t)
    reach = np.zeros(t.shape)
    for cube in regime:
        lo, hi = cube.dilate(4.0)
        inside = (x >= lo[0]) & (x <= hi[0]) & (t >= lo[1]) & (t <= hi[1])
        np.maximum(reach, np.where(inside, cube.diameter / constants.delta, 0.0), out=reach)
    reach = np.where(reach > 0, reach, regime.top.diameter / constants.delta)
    return base, base + np.minimum(reach, _slab_top(u))


def level_solve(
    u: SolutionField | Level,
    x: float,
    t: float,
    r: float,
    interval: tuple[float, float],
    scale: float = 1.0,
) -> float:
    """The root x0 of u(x0, x, t) = r on the interval, by bisection to 1e-10 * scale"""
    level = _level_function(u)
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ValueError(f"empty search interval [{lo}, {hi}]")

    def _gap(x0: float) -> float:
        value = level(np.asarray(x0, dtype=float), np.asarray(x, dtype=float), np.asarray(t, dtype=float))
        return float(np.asarray(value)) - r

    g_lo, g_hi = _gap(lo), _gap(hi)
    if g_lo == 0.0:
        return lo
    if g_hi == 0.0:
        return hi
    if g_lo * g_hi > 0.0:
        raise ValueError(f"level not attained: u - {r:.6g} has the same sign at both ends of [{lo:.6g}, {hi:.6g}]"
                         f" over x={x}, t={t}")
    return float(optimize.bisect(_gap, lo, hi, xtol=1e-10 * scale))


def _solve_levels(
    level: Level,
    lo: np.ndarray,
    hi: np.ndarray,
    x: np.ndarray,
    t: np.ndarray,
    r: np.ndarray,
    tol: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised bisection; returns the roots (nan where the level is not bracketed) and the failure mask"""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    r = np.broadcast_to(np.asarray(r, dtype=float), lo.shape)
    if lo.size == 0:
        return lo, np.zeros(lo.shape, dtype=bool)
    g_lo = level(lo, x, t) - r
    g_hi = level(hi, x, t) - r
    ok = np.isfinite(g_lo) & np.isfinite(g_hi) & (g_lo <= 0.0) & (g_hi >= 0.0)
    width = float(np.max(hi - lo))
    n_iter = max(1, int(math.ceil(math.log2(max(width, tol) / tol))))
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        above = level(mid, x, t) - r >= 0.0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return np.where(ok, 0.5 * (lo + hi), np.nan), ~ok


def _window(psi: GraphFunction, lo: np.ndarray, hi: np.ndarray, t_range: tuple[float, float]) -> tuple[slice, slice]:
    xs, ts = psi.axes()
    ix = np.nonzero((xs >= lo[0]) & (xs <= hi[0]))[0]
    it = np.nonzero((ts >= max(lo[1], t_range[0])) & (ts <= min(hi[1], t_range[1])))[0]
    if not ix.size or not it.size:
        raise ValueError("the window holds no lattice node inside the solution time range")
    return slice(int(ix[0]), int(ix[-1]) + 1), slice(int(it[0]), int(it[-1]) + 1)


@dataclass
class LevelSetMap:
    """psi(r; x, t) sampled on radii x a rectangular window of the graph lattice"""

    regime: StoppingTimeRegime
    level: Level
    x: np.ndarray
    t: np.ndarray
    radii: np.ndarray
    values: np.ndarray
    failed: np.ndarray
    base: np.ndarray
    difference_steps: tuple[float, float, float]

    @property
    def hx(self) -> float:
        return float(self.x[1] - self.x[0]) if self.x.size > 1 else 0.0

    @property
    def ht(self) -> float:
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0

    @property
    def failure_rate(self) -> float:
        return float(self.failed.mean())

    def monotone(self) -> bool:
        """psi(r1) < psi(r2) for r1 < r2 wherever both levels were solved"""
        step = np.diff(self.values, axis=0)
        solved = np.isfinite(step)
        return bool(np.all(step[solved] > 0.0))

    def residual(self) -> float:
        """max |u(psi(r; x), x) - r| over solved samples"""
        xx, tt = np.meshgrid(self.x, self.t, indexing="ij")
        worst = 0.0
        for r, row in zip(self.radii, self.values):
            solved = np.isfinite(row)
            if solved.any():
                value = self.level(row[solved], xx[solved], tt[solved])
                worst = max(worst, float(np.max(np.abs(value - r))))
        return worst

    def derivatives(self) -> dict[str, np.ndarray]:
        """Finite differences of psi(r; x, t) over the (r, x, t) grid"""
        v = self.values
        d_r = np.gradient(v, self.radii, axis=0)
        d_x = np.gradient(v, self.hx, axis=1)
        d_t = np.gradient(v, self.ht, axis=2)
        return {
            "r": d_r,
            "x": d_x,
            "t": d_t,
            "xx": np.gradient(d_x, self.hx, axis=1),
            "xt": np.gradient(d_x, self.ht, axis=2),
        }


def level_set_map(
    regime: StoppingTimeRegime,
    u: SolutionField | Level,
    psi: GraphFunction,
    constants: StructuralConstants,
    radii: Sequence[float] | None = None,
    window: float = 1.0,
) -> LevelSetMap:
    """Solve u = r for every radius over the lattice nodes of window * Q(S)"""
    top = regime.top
    if radii is None:
        radii = np.geomspace(constants.delta * top.side, top.side, 9)
    radii = np.unique(np.asarray(radii, dtype=float))
    if radii.size < 3 or radii[0] <= 0:
        raise ValueError("a level-set map needs at least three positive radii")
    lo_box, hi_box = top.dilate(window)
    sx, st = _window(psi, lo_box, hi_box, _time_window(u))
    xs, ts = psi.axes()
    xs, ts = xs[sx], ts[st]
    if xs.size < 3 or ts.size < 3:
        raise ValueError("the level-set window needs at least three nodes per axis")
    xx, tt = np.meshgrid(xs, ts, indexing="ij")
    lo, hi = search_interval(regime, u, psi, xx, tt, constants)
    level = _level_function(u)
    tol = 1e-10 * top.side
    values = np.empty((radii.size,) + xx.shape)
    failed = np.zeros(values.shape, dtype=bool)
    for k, r in enumerate(radii):
        values[k], failed[k] = _solve_levels(level, lo, hi, xx, tt, r, tol)
    lmap = LevelSetMap(regime, level, xs, ts, radii, values, failed, lo, _difference_steps(u, psi))
    logger.info("level-set map over %s: %d radii, failure rate %.3g", top.key, radii.size, lmap.failure_rate)
    return lmap


@dataclass
class TransferenceReport:
    rel_error: float
    errors: dict[str, float]
    bound_constant: float
    n_points: int


def transference_check(
    lmap: LevelSetMap,
    n_points: int = 64,
    rng: np.random.Generator | None = None,
) -> TransferenceReport:
    """Compare differences of psi(r; .) with implicit differentiation of u(psi, x, t) = r

    d_r psi = 1 / d_x0 u, d_x psi = -d_x u / d_x0 u and d_t psi = -d_t u / d_x0 u,
    with the derivatives of u taken by centred differences at the root.  The
    bound constant is sup r |d_t psi| + r |d_xx psi| + r^2 |d_x d_t psi|.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d = lmap.derivatives()
    finite = np.isfinite(lmap.values)
    interior = np.zeros(finite.shape, dtype=bool)
    interior[1:-1, 1:-1, 1:-1] = True
    for axis in range(3):
        interior &= np.roll(finite, 1, axis) & np.roll(finite, -1, axis)
    interior &= finite
    candidates = np.argwhere(interior)
    if not candidates.size:
        raise ValueError("the level-set map has no interior sample with solved neighbours")
    pick = candidates[rng.choice(len(candidates), size=min(n_points, len(candidates)), replace=False)]
    ir, ix, it = pick.T
    r = lmap.radii[ir]
    x0 = lmap.values[ir, ix, it]
    x = lmap.x[ix]
    t = lmap.t[it]
    e0, ex, et = lmap.difference_steps
    level = lmap.level
    u0 = (level(x0 + e0, x, t) - level(x0 - e0, x, t)) / (2.0 * e0)
    ux = (level(x0, x + ex, t) - level(x0, x - ex, t)) / (2.0 * ex)
    ut = (level(x0, x, t + et) - level(x0, x, t - et)) / (2.0 * et)
    errors = {
        "r": float(np.max(np.abs(d["r"][ir, ix, it] * u0 - 1.0))),
        "x": float(np.max(np.abs(d["x"][ir, ix, it] + ux / u0) / (1.0 + np.abs(ux / u0)))),
        "t": float(np.max(r * np.abs(d["t"][ir, ix, it] + ut / u0) / (1.0 + r * np.abs(ut / u0)))),
    }
    rr = lmap.radii[:, None, None]
    bound = rr * np.abs(d["t"]) + rr * np.abs(d["xx"]) + rr**2 * np.abs(d["xt"])
    report = TransferenceReport(max(errors.values()), errors, float(bound[interior].max()), len(pick))
    logger.info("transference: relative error %.3g, bound constant %.3g", report.rel_error, report.bound_constant)
    return report


def _log_radius_integral(density: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """int density dr / r over the leading axis, trapezoid rule in log r"""
    if radii.size == 1:
        return density[0]
    return integrate.trapezoid(density, np.log(radii), axis=0)


def heart_square_function(lmap: LevelSetMap, q0: DyadicCube, phi: np.ndarray | None = None) -> float:
    """int over the sawtooth of Q0 of |r d_s f|^2 + |r grad^2 f|^2 + |r^2 grad d_s f|^2 dr/r dy ds, over |Q0|

    f = psi(r; .) phi; the sawtooth holds the window nodes in Q0 and the radii
    up to l(Q0).
    """
    phi = np.ones(lmap.values.shape[1:]) if phi is None else np.asarray(phi, dtype=float)
    heart = LevelSetMap(lmap.regime, lmap.level, lmap.x, lmap.t, lmap.radii, lmap.values * phi, lmap.failed,
                        lmap.base, lmap.difference_steps)
    d = heart.derivatives()
    rr = lmap.radii[:, None, None]
    density = (rr * d["t"]) ** 2 + (rr * d["xx"]) ** 2 + (rr**2 * d["xt"]) ** 2
    unresolved = ~np.isfinite(density)
    if unresolved.any():
        logger.warning("%d samples of the heart integrand are unresolved and dropped", int(unresolved.sum()))
    density = np.where(unresolved, 0.0, density)
    keep = lmap.radii <= q0.side
    if not keep.any():
        raise ValueError(f"no radius of the map lies below l(Q0) = {q0.side}")
    xx, tt = np.meshgrid(lmap.x, lmap.t, indexing="ij")
    inside = q0.contains_points(xx[..., None], tt)
    radial = _log_radius_integral(density[keep], lmap.radii[keep])
    return float(radial[inside].sum()) * heart.hx * heart.ht / q0.volume


@dataclass
class ApproxGraph:
    """psi_S on the graph lattice with the data it was built from and its checks

    ``graph`` holds (psi* - offset) phi, zero outside the support of phi;
    ``raw`` holds psi* = psi(h(x); x) in ambient coordinates on that support.
    ``frame`` is psi - offset, the boundary in the same translated frame as
    ``graph``; the closeness checks compare those two.
    """

    regime: StoppingTimeRegime
    psi: GraphFunction
    graph: GraphFunction
    frame: GraphFunction
    raw: np.ndarray
    offset: float
    phi: np.ndarray
    distance: SpaceTimeField
    h: RegularizedDistance
    level: Level
    support: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    unresolved: np.ndarray
    failed: np.ndarray
    tol: float
    checks: dict[str, Any] = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.graph.values)

    def to_dict(self) -> dict[str, Any]:
        return {"top": self.regime.top.key, "offset": self.offset, **self.checks}


def cutoff(cube: DyadicCube, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Smooth phi: 1 on 2Q, supported in the open 4Q"""
    center = cube.center()
    ell = cube.side
    space = _ramp(np.abs(x - center.x[0]) - ell, ell)
    time = _ramp(np.abs(t - center.t) - 2.0 * ell * ell, 6.0 * ell * ell)
    return space * time


def _boundary_slope(level: Level, base: np.ndarray, x: np.ndarray, t: np.ndarray, step: float) -> float:
    ratio = level(base + step, x, t) / step
    ratio = ratio[np.isfinite(ratio) & (ratio > 0)]
    if not ratio.size:
        raise ValueError("u does not increase off the boundary anywhere on the window")
    return float(np.median(ratio))


def build_psi_s(
    regime: StoppingTimeRegime,
    u: SolutionField | Level,
    psi: GraphFunction,
    constants: StructuralConstants,
    m2: float | None = None,
    normalize: bool = False,
    scale_factor: float = 0.125,
    max_failure_rate: float = 0.01,
) -> ApproxGraph:
    """Approximating graph psi_S = (psi(h(x); x) - psi(h(x_Q); x_Q)) phi of a regime

    With ``normalize`` the level function is divided by the median boundary
    slope of u over the window, so levels compare with heights.  Raises
    ValueError when more than ``max_failure_rate`` of the level solves fail.
    """
    if psi.n != 2:
        raise ValueError("approximating graphs support n = 2 only")
    top = regime.top
    ell = top.side
    d = stopping_distance_field(regime, psi)
    h = regularized_distance(d, scale_factor, periodic=False)
    x_nd, tt = psi.coordinates()
    xx = x_nd[..., 0]
    phi = cutoff(top, xx, tt)
    support = phi > 0.0
    level = _level_function(u)
    t0, t1 = _time_window(u)
    unresolved = support & ((tt < t0) | (tt > t1))
    lo = np.full(xx.shape, np.nan)
    hi = np.full(xx.shape, np.nan)
    lo[support], hi[support] = search_interval(regime, u, psi, xx[support], tt[support], constants)
    if normalize:
        step = 2.0 * _difference_steps(u, psi)[0]
        slope = _boundary_slope(level, lo[support], xx[support], tt[support], step)
        raw_level = level

        def level(x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
            return raw_level(x0, x, t) / slope

        logger.info("normalized u by its boundary slope %.4g", slope)
    tol = 1e-10 * ell
    roots, failed_solve = _solve_levels(level, lo[support], hi[support], xx[support], tt[support],
                                        h.values[support], tol)
    failed = np.zeros(xx.shape, dtype=bool)
    failed[support] = failed_solve
    failed |= unresolved
    rate = float(failed[support].mean()) if support.any() else 0.0
    if rate > max_failure_rate:
        raise ValueError(f"level solves failed at {rate:.2%} of the nodes of 4Q(S) for {top.key}")
    base = psi.full_values()
    raw = np.full(xx.shape, np.nan)
    raw[support] = roots
    raw = np.where(failed, base, raw)
    center = top.center()
    xc, tc = np.array([[center.x[0]]]), np.array([center.t])
    h_c = float(GraphFunction(np.array(h.values), psi.hx)(xc, tc)[0])
    c_lo, c_hi = search_interval(regime, u, psi, xc[:, 0], tc, constants)
    offset = level_solve(level, center.x[0], center.t, h_c, (float(c_lo[0]), float(c_hi[0])), scale=ell)
    values = np.where(support, (raw - offset) * phi, 0.0)
    graph = GraphFunction(values, psi.hx)
    frame = GraphFunction(psi.values, psi.hx, psi.slope, psi.offset - offset)
    approx = ApproxGraph(regime, psi, graph, frame, raw, offset, phi, d, h, level, support, lo, hi,
                         unresolved, failed, tol)
    approx.checks = _psi_s_checks(approx, constants, m2)
    logger.info("psi_S for %s: %s", top.key, approx.checks)
    return approx


def _psi_s_checks(approx: ApproxGraph, constants: StructuralConstants, m2: float | None) -> dict[str, Any]:
    psi = approx.psi
    h = approx.h.values
    solved = approx.support & ~approx.failed
    core = solved & (approx.phi >= 1.0)
    gap = approx.values - approx.frame.full_values()
    checks: dict[str, Any] = {"failure_rate": float(approx.failed[approx.support].mean())}
    for key, mask in (("closeness", solved), ("closeness_core", core)):
        positive = mask & (h > 0)
        checks[f"{key}_min"] = float(gap[mask].min()) if mask.any() else math.nan
        checks[f"{key}_ratio"] = float(np.max(gap[positive] / h[positive])) if positive.any() else (
            0.0 if mask.any() else math.nan)
    bound = constants.m0 * m2 if m2 is not None else math.inf
    checks["closeness_bound"] = bound
    checks["closeness_ok"] = bool(checks["closeness_min"] >= -approx.tol and checks["closeness_ratio"] <= bound)
    checks["lip"] = lip_norm_estimate(GraphFunction(np.array(approx.values), psi.hx), periodic=False).combined
    dt = np.gradient(approx.values, psi.ht, axis=1)
    off_zero = approx.support & (h > 0)
    checks["dt_h_bound"] = float(np.max(np.abs(dt[off_zero]) * h[off_zero])) if off_zero.any() else 0.0
    xx, tt = psi.coordinates()
    approximation = 0.0
    for cube in approx.regime:
        lo, hi = cube.dilate(2.0)
        near = solved & (xx[..., 0] >= lo[0]) & (xx[..., 0] <= hi[0]) & (tt >= lo[1]) & (tt <= hi[1])
        if near.any():
            approximation = max(approximation, float(np.max(np.abs(gap[near]))) / cube.diameter)
    checks["approximation_c1"] = approximation
    checks["mapping_fraction"] = _mapping_fraction(approx, constants)
    return checks


def _mapping_fraction(approx: ApproxGraph, constants: StructuralConstants) -> float:
    """Share of sawtooth samples (r, x) of Q(S), h(x) <= r <= l, whose image lies in Omega_S**"""
    top = approx.regime.top
    xx, tt = approx.psi.coordinates()
    nodes = top.contains_points(xx, tt) & approx.support & ~approx.failed
    h = approx.h.values[nodes]
    below = h < top.side
    if not below.any():
        return math.nan
    x, t, h = xx[nodes][below, 0], tt[nodes][below], h[below]
    region = sawtooth(approx.regime, "**", constants, approx.psi)
    lo, hi = approx.lo[nodes][below], approx.hi[nodes][below]
    hits = total = 0
    for frac in np.linspace(0.0, 1.0, 5):
        r = h + frac * (top.side - h)
        roots, failed = _solve_levels(approx.level, lo, hi, x, t, r, approx.tol)
        ok = ~failed
        if ok.any():
            hits += int(region.contains(roots[ok], x[ok][..., None], t[ok]).sum())
            total += int(ok.sum())
    return hits / total if total else math.nan


@dataclass
class SmoothedFamily:
    radii: np.ndarray
    gamma: float
    gamma_history: list[float]
    values: np.ndarray
    smoothed_h: np.ndarray
    margin: float
    zero_agreement: float
    containment_violation: float
    failure_rate: float
    pointwise_bound: float
    square_integrals: dict[str, float]
    ph_square: dict[str, float]


def smoothed_family(
    approx: ApproxGraph,
    radii: Sequence[float] | None = None,
    gamma: float | None = None,
    max_halvings: int = 12,
) -> SmoothedFamily:
    """psi~(r; x) = psi_heart(r + P_{gamma r} h(x); x) with psi_heart(s; x) = (psi(s; x) - offset) phi(x)

    gamma starts at 1 / (8 Lip(h)) and is halved until |h - P_{gamma r} h| <= r/4
    on the support.  The radius 0 is always included, where psi~ reproduces
    psi_S.
    """
    psi = approx.psi
    top = approx.regime.top
    h = approx.h.values
    steps = psi.steps
    modes = ["nearest"] * psi.n
    if radii is None:
        radii = np.geomspace(2.0 * psi.hx, top.side, 6)
    radii = np.unique(np.concatenate([[0.0], np.asarray(radii, dtype=float)]))
    if gamma is None:
        lip_h = lip_norm_estimate(GraphFunction(np.array(h), psi.hx), n_random=0, periodic=False).combined
        gamma = min(0.5, 1.0 / (8.0 * lip_h)) if lip_h > 0 else 0.5
    support = approx.support
    history = [gamma]
    for _ in range(max_halvings + 1):
        smoothed = np.stack([mollify(h, gamma * r, steps, modes) for r in radii])
        gaps = [float(np.max(np.abs(h - p)[support])) / r for r, p in zip(radii, smoothed) if r > 0]
        margin = max(gaps, default=0.0)
        if margin <= 0.25:
            break
        gamma *= 0.5
        history.append(gamma)
    else:
        logger.warning("approximate identity margin %.3g stays above 1/4 at gamma %.3g", margin, gamma)

    xx, tt = psi.coordinates()
    x, t = xx[support][:, 0], tt[support]
    base = psi.full_values()
    values = np.zeros((radii.size,) + h.shape)
    violations = failures = 0
    for k, r in enumerate(radii):
        levels = r + smoothed[k][support]
        roots, failed = _solve_levels(approx.level, approx.lo[support], approx.hi[support], x, t, levels, approx.tol)
        failed |= approx.unresolved[support]
        roots = np.where(failed, base[support], roots)
        row = np.zeros(h.shape)
        row[support] = (roots - approx.offset) * approx.phi[support]
        values[k] = row
        violations += int(np.sum(levels < h[support] - approx.tol))
        failures += int(failed.sum())
    samples = radii.size * int(support.sum())
    containment = violations / samples if samples else 0.0
    if containment > 1e-3:
        raise ValueError(f"sawtooth containment violated at {containment:.3%} of the samples")
    zero_agreement = float(np.max(np.abs(values[0] - approx.values)))

    positive = radii > 0
    rr = radii[:, None, None]
    d_r = np.gradient(values, radii, axis=0)
    d_rr = np.gradient(d_r, radii, axis=0)
    d_t = np.gradient(values, psi.ht, axis=2)
    d_rt = np.gradient(d_r, psi.ht, axis=2)
    pointwise = rr * np.abs(d_rr) + rr * np.abs(d_t) + rr**2 * np.abs(d_rt)
    pointwise_bound = float(np.max(pointwise[positive][:, support])) if support.any() else 0.0

    inside = top.contains_points(xx, tt)
    cell = psi.cell_volume / top.volume
    band = positive & (radii <= top.side)

    def _integral(density: np.ndarray) -> float:
        if not band.any():
            return math.nan
        return float(_log_radius_integral(density[band], radii[band])[inside].sum()) * cell

    squares = {
        "rr": _integral((rr * d_rr) ** 2),
        "t": _integral((rr * d_t) ** 2),
        "rt": _integral((rr**2 * d_rt) ** 2),
    }
    squares["total"] = squares["rr"] + squares["t"] + squares["rt"]
    ph_dr = np.gradient(smoothed, radii, axis=0)
    ph_dt = np.gradient(smoothed, psi.ht, axis=2)
    ph_square = {"dr": _integral(ph_dr**2), "dt": _integral((rr * ph_dt) ** 2)}
    family = SmoothedFamily(radii, gamma, history, values, smoothed, margin, zero_agreement, containment,
                            failures / samples if samples else 0.0, pointwise_bound, squares, ph_square)
    logger.info("smoothed family: gamma %.4g, margin %.3g, pointwise %.4g", gamma, margin, pointwise_bound)
    return family


@dataclass
class RegularityReport:
    cases: dict[str, int]
    rows: list[dict[str, Any]]
    bmo: float
    js_minimal_m: float
    js_ratio: float
    case_max: dict[int, float]
    pairings: list[dict[str, float]]
    b12_constant: float

    def to_rows(self) -> list[dict[str, Any]]:
        return [dict(row) for row in self.rows]


def window_family(approx: ApproxGraph, depth: int = 2) -> list[DyadicCube]:
    """Dyadic cubes meeting 4Q(S) inside the lattice box, from the parent generation of Q(S) down ``depth``"""
    top = approx.regime.top
    lengths = approx.psi.box_lengths
    lo, hi = top.dilate(4.0)
    lo = np.maximum(lo, 0.0)
    hi = np.minimum(hi, lengths)
    cubes = []
    for generation in range(top.generation - 1, top.generation + depth + 1):
        side = top.unit * 2.0**-generation
        steps = np.array([side, side * side])
        first = np.floor(lo / steps).astype(int)
        last = np.minimum(np.ceil(hi / steps).astype(int), np.floor(lengths / steps).astype(int)) - 1
        for i in range(first[0], last[0] + 1):
            for k in range(first[1], last[1] + 1):
                cubes.append(DyadicCube(generation, (i, k), top.unit))
    return cubes


def classify_cube(cube: DyadicCube, approx: ApproxGraph, constants: StructuralConstants) -> int:
    """Case of a window cube

    4 for cubes larger than Q(S), 3 when the localized kernel never meets
    psi_S, 2 when h >= 2^(n+2) eps0 l(Q) on Q, 1 otherwise.
    """
    top = approx.regime.top
    if cube.side > top.side:
        return 4
    R = cube.side
    lo, hi = cube.bounds()
    reach = np.array([2.0 * R, 4.0 * R * R + approx.psi.ht])
    s_lo, s_hi = top.dilate(4.0)
    if np.any(hi + reach <= s_lo) or np.any(lo - reach >= s_hi):
        return 3
    mask = dyadic_mask(approx.psi, cube)
    h = approx.h.values
    h_min = float(h[mask].min()) if mask.any() else float(
        GraphFunction(np.array(h), approx.psi.hx)(np.array([cube.center().x]), np.array([cube.center().t]))[0])
    return 2 if h_min >= 2.0 ** (cube.n + 2) * constants.eps0 * cube.side else 1


def _cube_js_ratio(values: np.ndarray, m: float) -> float:
    if values.size == 0:
        return math.nan
    return float(_best_level_mass(np.sort(values)[None, :], m)[0])


def _case_one_pairing(
    cube: DyadicCube,
    approx: ApproxGraph,
    f: SpaceTimeField,
    ip: np.ndarray,
    dt: np.ndarray,
    kernel: LocalizedKernel,
) -> dict[str, float] | None:
    """Split the pairing of Dt psi_S with a unit L2 test function on Q by summation by parts

    With F = I_P psi_S and forward differences in time,
    sum (F_{k+1} - F_k) g_k = b1 - b2 + I1 + I2 + I3, where b1, b2 are the
    end-time terms and I1, I2, I3 carry the local part of F from psi_S near Q,
    the local part from psi_S away from Q and the tail F - I_P^R psi_S.
    """
    psi = approx.psi
    mask = dyadic_mask(psi, cube)
    cols = np.nonzero(mask.any(axis=1))[0]
    rows = np.nonzero(mask.any(axis=0))[0]
    if rows.size < 3 or cols.size == 0:
        return None
    a, b = int(rows[0]), int(rows[-1])
    s = np.linspace(0.0, 1.0, b - a + 1)
    weight = 1.0 + s
    norm = math.sqrt(cols.size * float(np.sum(weight**2)) * psi.cell_volume)
    g = weight / norm
    xx, tt = psi.coordinates()
    lo, hi = cube.dilate(4.0)
    near = (xx[..., 0] >= lo[0]) & (xx[..., 0] <= hi[0]) & (tt >= lo[1]) & (tt <= hi[1])
    local_near = kernel.local_ip(f.with_values(np.where(near, f.values, 0.0))).values
    local = kernel.local_ip(f).values
    parts = {"I1": local_near, "I2": local - local_near, "I3": ip - local}
    hx = psi.hx
    block = ip[cols]
    dg = np.diff(g)
    out: dict[str, float] = {}
    for name, part in parts.items():
        out[name] = -hx * float(np.sum(part[cols][:, a + 1:b] * dg[:-1]))
    out["b1"] = hx * float(np.sum(block[:, b]) * g[-2])
    out["b2"] = hx * float(np.sum(block[:, a]) * g[0])
    out["forward"] = hx * float(np.sum((block[:, a + 1:b + 1] - block[:, a:b]) * g[:-1]))
    out["direct"] = psi.cell_volume * float(np.sum(dt[cols][:, a:b] * g[:-1]))
    total = out["I1"] + out["I2"] + out["I3"] + out["b1"] - out["b2"]
    out["residual"] = out["direct"] - total
    out["relative_residual"] = abs(out["residual"]) / max(abs(out["direct"]), 1e-300)
    out["scale"] = math.sqrt(cube.volume)
    return out


def regularity_report(
    approx: ApproxGraph,
    constants: StructuralConstants,
    depth: int = 2,
    max_pairings: int = 8,
) -> RegularityReport:
    """Case classification, localized half derivatives and the John-Stromberg verdict for psi_S

    Case 1 cubes report avg_Q |D_t^Q psi_S|, Cases 2 and 3 report
    sup_Q |D_t^Q psi_S|, with D_t^Q localized at R = l(Q).  Cubes below four
    lattice cells cannot be localized and report nan.  The global verdict is
    computed directly on every dyadic cube of the lattice.
    """
    psi = approx.psi
    field_ = SpaceTimeField(np.array(approx.values), psi.hx)
    centred = field_.with_values(field_.values - field_.values.mean())
    dt = half_time_derivative(centred, "Dt")
    ip = fractional_integral_IP(centred).values
    bmo = bmo_p_norm(dt)
    first = john_stromberg(dt, max(bmo, 1e-12))
    m_star = first.minimal_m
    verdict = john_stromberg(dt, m_star) if m_star > 0 else first
    kernels: dict[float, LocalizedKernel] = {}
    cases: dict[str, int] = {}
    rows: list[dict[str, Any]] = []
    case_max: dict[int, float] = {1: 0.0, 2: 0.0, 3: 0.0}
    pairings: list[dict[str, float]] = []
    for cube in window_family(approx, depth):
        case = classify_cube(cube, approx, constants)
        cases[cube.key] = case
        mask = dyadic_mask(psi, cube)
        localized = math.nan
        if case != 4 and mask.any() and cube.side >= 4.0 * psi.hx:
            kernel = kernels.get(cube.side)
            if kernel is None:
                kernel = kernels[cube.side] = LocalizedKernel(field_, cube.side)
            local = np.abs(kernel.local_dt(field_).values[mask])
            localized = float(local.mean()) if case == 1 else float(local.max())
            case_max[case] = max(case_max[case], localized)
            if case == 1 and len(pairings) < max_pairings:
                pairing = _case_one_pairing(cube, approx, centred, ip, dt.values, kernel)
                if pairing is not None:
                    pairing["cube"] = cube.key  # type: ignore[assignment]
                    pairings.append(pairing)
        rows.append({
            "cube": cube.key,
            "case": case,
            "side": cube.side,
            "localized": localized,
            "js_ratio": _cube_js_ratio(dt.values[mask], m_star),
        })
    b12 = max(((abs(p["b1"]) + abs(p["b2"])) / p["scale"] for p in pairings), default=0.0)
    report = RegularityReport(cases, rows, bmo, m_star, verdict.ratio, case_max, pairings, b12)
    logger.info("regularity of psi_S: BMO %.4g, minimal M %.4g, JS ratio %.3g, case maxima %s",
                bmo, m_star, verdict.ratio, case_max)
    return report


def regime_green(
    domain: GraphDomain,
    A: CoefficientField,
    regime: StoppingTimeRegime,
    constants: StructuralConstants,
    config: SolverConfig | None = None,
    lag: float = 4.0,
) -> GreenFunction:
    """Adjoint Green function of a regime, normalized by sigma(Q(S)) and covering 4Q(S) in time

    The pole sits above the centre of Q(S) at height min(2 M0 l, height / 2),
    ``lag * l^2`` after the end of 4Q(S).
    """
    config = SolverConfig() if config is None else config
    top = regime.top
    ell = top.side
    center = top.center()
    lo, hi = top.dilate(4.0)
    height = min(2.0 * constants.m0 * ell, 0.5 * config.height)
    pole = sample_point(domain.psi, center.x[0], float(hi[1]) + lag * ell * ell, height)
    dt = domain.psi.ht / config.time_refinement
    n_steps = int(math.ceil((pole.t - lo[1]) / dt)) + 2
    green = green_function(domain, A, pole, "adjoint", config, n_steps)
    sigma_q = surface_measure(domain.psi, dyadic_mask(domain.psi, top))
    green.values = green.values * sigma_q
    green.metadata["sigma_normalization"] = sigma_q
    return green
