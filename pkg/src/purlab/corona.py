"""Stopping-time regimes, corona decompositions, sawtooth regions and the square-function checks

Cubes are ``DyadicCube`` objects and every cube family is keyed by
``cube.key``.  Measures only need ``measure(cube)`` and ``sigma_of(cube)``,
so synthetic measures and discrete parabolic measures are interchangeable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .analysis import _plateau, _zeta
from .coeffs import hessian_contraction
from .geometry import DyadicCube, StructuralConstants, WhitneyRegion, whitney_region
from .graph import GraphFunction
from .pde import CoefficientField, FlatLattice, SolutionField, ambient_derivatives, boundary_distance

logger = logging.getLogger(__name__)


class CubeMeasure(Protocol):
    def measure(self, cube: DyadicCube) -> float: ...

    def sigma_of(self, cube: DyadicCube) -> float: ...


@dataclass
class StoppingTimeRegime:
    """A family of dyadic cubes with maximal cube ``top``"""

    top: DyadicCube
    cubes: dict[str, DyadicCube]

    @classmethod
    def from_cubes(cls, cubes: Iterable[DyadicCube]) -> StoppingTimeRegime:
        family = {cube.key: cube for cube in cubes}
        if not family:
            raise ValueError("a stopping-time regime needs at least one cube")
        top = min(family.values(), key=lambda c: (c.generation, c.index))
        return cls(top, family)

    def __contains__(self, cube: DyadicCube) -> bool:
        return cube.key in self.cubes

    def __len__(self) -> int:
        return len(self.cubes)

    def __iter__(self):  # type: ignore[no-untyped-def]
        return iter(sorted(self.cubes.values()))

    @property
    def coherent(self) -> bool:
        return is_semi_coherent(self.cubes.values())

    def truncate(self, skip: int, depth: int | None = None) -> StoppingTimeRegime:
        """Cubes whose generation below the top lies in [skip, depth]"""
        g0 = self.top.generation
        keep = [c for c in self.cubes.values()
                if c.generation - g0 >= skip and (depth is None or c.generation - g0 <= depth)]
        if not keep:
            raise ValueError(f"truncation [{skip}, {depth}] leaves no cube of the regime")
        out = StoppingTimeRegime.from_cubes(keep)
        out.top = self.top
        return out

    def minimal_cubes(self) -> list[DyadicCube]:
        return [c for c in self if not any(ch.key in self.cubes for ch in c.children())]

    def to_dict(self) -> dict[str, Any]:
        return {"top": self.top.key, "cubes": sorted(self.cubes)}


def is_semi_coherent(cubes: Iterable[DyadicCube]) -> bool:
    """Single maximal cube, and every cube between a member and the top is a member"""
    family = {c.key: c for c in cubes}
    if not family:
        return False
    top = min(family.values(), key=lambda c: c.generation)
    for cube in family.values():
        if not top.contains_cube(cube):
            return False
        for anc in cube.ancestors(top.generation):
            if anc.key not in family:
                return False
    return True


@dataclass
class PackingStatistics:
    max_ratio: float
    worst: str | None
    ratios: dict[str, float] = field(default_factory=dict)


def packing_statistics(family: Iterable[DyadicCube], window: Iterable[DyadicCube]) -> PackingStatistics:
    """max over P in the window of sum_{Q in family, Q subset P} |Q| / |P|"""
    window = list(window)
    keys = {c.key: c for c in window}
    top_gen = min((c.generation for c in window), default=0)
    sums: dict[str, float] = {}
    for cube in family:
        for anc in [cube] + cube.ancestors(top_gen):
            if anc.key in keys:
                sums[anc.key] = sums.get(anc.key, 0.0) + cube.volume
    ratios = {key: value / keys[key].volume for key, value in sums.items()}
    if not ratios:
        return PackingStatistics(0.0, None, {})
    worst = max(ratios, key=ratios.__getitem__)
    return PackingStatistics(ratios[worst], worst, ratios)


def window_cubes(q0: DyadicCube, depth: int) -> list[DyadicCube]:
    return list(q0.descendants(depth))


@dataclass
class CoronaStep:
    top: DyadicCube
    stopped: list[DyadicCube]
    regime: StoppingTimeRegime
    top_density: float
    stopped_fraction: float
    contact_fraction: float
    small_stopping: bool
    contact_ok: bool


def _density(measure: CubeMeasure, cube: DyadicCube) -> float:
    sigma = measure.sigma_of(cube)
    if sigma <= 0:
        raise ValueError(f"measure is not resolved on cube {cube.key}")
    return measure.measure(cube) / sigma


def _stopped_family(top: DyadicCube, measure: CubeMeasure, m_prime: float, depth: int) -> list[DyadicCube]:
    base = _density(measure, top)
    if base <= 0:
        raise ValueError(f"measure vanishes on top cube {top.key}")
    stopped: list[DyadicCube] = []
    level = top.children() if depth > 0 else []
    for _ in range(depth):
        nxt = []
        for cube in level:
            ratio = _density(measure, cube) / base
            if ratio > m_prime or ratio < 1.0 / m_prime:
                stopped.append(cube)
            else:
                nxt.append(cube)
        level = [child for cube in nxt for child in cube.children()]
    return stopped


def _maximal(cubes: Iterable[DyadicCube]) -> list[DyadicCube]:
    cubes = sorted({c.key: c for c in cubes}.values())
    keep: list[DyadicCube] = []
    for cube in cubes:
        if not any(k.contains_cube(cube) for k in keep):
            keep.append(cube)
    return keep


def _regime_below(top: DyadicCube, stopped: Sequence[DyadicCube], depth: int) -> StoppingTimeRegime:
    members = [c for c in top.descendants(depth) if not any(s.contains_cube(c) for s in stopped)]
    return StoppingTimeRegime.from_cubes(members)


def measure_corona_step(
    q0: DyadicCube,
    measure: CubeMeasure,
    m_prime: float,
    depth: int,
    measure2: CubeMeasure | None = None,
) -> CoronaStep:
    """Stop at the maximal subcubes whose density ratio leaves [1/M', M'] times the top density

    With a second measure the stopped family is the maximal cubes of the union
    of both families.  ``depth`` bounds the generations examined below Q0.
    """
    if m_prime <= 1:
        raise ValueError(f"M' must exceed 1, got {m_prime}")
    stopped = _stopped_family(q0, measure, m_prime, depth)
    if measure2 is not None:
        stopped = _maximal(stopped + _stopped_family(q0, measure2, m_prime, depth))
    regime = _regime_below(q0, stopped, depth)
    fraction = sum(c.volume for c in stopped) / q0.volume
    step = CoronaStep(
        top=q0,
        stopped=stopped,
        regime=regime,
        top_density=_density(measure, q0),
        stopped_fraction=fraction,
        contact_fraction=1.0 - fraction,
        small_stopping=fraction <= 0.25,
        contact_ok=1.0 - fraction >= 0.75,
    )
    logger.debug("corona step at %s: %d stopped, fraction %.3f", q0.key, len(stopped), fraction)
    return step


@dataclass
class CoronaDecomposition:
    """Regimes and bad cubes partitioning the window below Q0 to a fixed depth"""

    q0: DyadicCube
    depth: int
    regimes: list[StoppingTimeRegime]
    bad: list[DyadicCube]
    packing: PackingStatistics
    packing_bound: float
    steps: list[CoronaStep] = field(default_factory=list)
    thresholds: dict[str, float] = field(default_factory=dict)

    @property
    def tops(self) -> list[DyadicCube]:
        return [r.top for r in self.regimes]

    def is_partition(self) -> bool:
        seen: dict[str, int] = {}
        for regime in self.regimes:
            for key in regime.cubes:
                seen[key] = seen.get(key, 0) + 1
        for cube in self.bad:
            seen[cube.key] = seen.get(cube.key, 0) + 1
        window = {c.key for c in window_cubes(self.q0, self.depth)}
        return set(seen) == window and all(v == 1 for v in seen.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "q0": self.q0.key,
            "depth": self.depth,
            "regimes": [r.to_dict() for r in self.regimes],
            "bad": sorted(c.key for c in self.bad),
            "packing": {"max_ratio": self.packing.max_ratio, "worst": self.packing.worst,
                        "bound": self.packing_bound},
            "thresholds": dict(self.thresholds),
        }


def measure_corona(
    q0: DyadicCube,
    measure: CubeMeasure,
    m_prime: float,
    depth: int,
    measure2: CubeMeasure | None = None,
) -> CoronaDecomposition:
    """Iterate ``measure_corona_step`` from every stopped cube until the window is exhausted"""
    last = q0.generation + depth
    queue = [q0]
    regimes: list[StoppingTimeRegime] = []
    steps: list[CoronaStep] = []
    while queue:
        top = queue.pop(0)
        remaining = last - top.generation
        step = measure_corona_step(top, measure, m_prime, remaining, measure2)
        steps.append(step)
        regimes.append(step.regime)
        queue.extend(step.stopped)
    window = window_cubes(q0, depth)
    packing = packing_statistics([r.top for r in regimes], window)
    bound = 2.0 if measure2 is not None else 4.0 / 3.0
    logger.info("measure corona below %s: %d regimes, packing %.4g (bound %.4g)",
                q0.key, len(regimes), packing.max_ratio, bound)
    return CoronaDecomposition(q0, depth, regimes, [], packing, bound, steps, {"m_prime": m_prime})


def initial_coronization(q0: DyadicCube, depth: int) -> CoronaDecomposition:
    """The graph case: the whole window is one regime"""
    regime = StoppingTimeRegime.from_cubes(window_cubes(q0, depth))
    packing = packing_statistics([q0], window_cubes(q0, depth))
    return CoronaDecomposition(q0, depth, [regime], [], packing, 1.0)


def sweep_m_prime(
    q0: DyadicCube, measure: CubeMeasure, depth: int, candidates: Sequence[float] = (2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
) -> tuple[float | None, dict[float, float]]:
    """Smallest M' of the sweep for which the contact bound holds, with every contact fraction"""
    fractions = {m: measure_corona_step(q0, measure, m, depth).contact_fraction for m in sorted(candidates)}
    ok = [m for m, frac in fractions.items() if frac >= 0.75]
    return (ok[0] if ok else None), fractions


class GreenSamples:
    """Lattice arrays of a solution shared by the region integrals"""

    def __init__(self, u: SolutionField):
        self.u = u
        self.lattice = u.lattice
        self.x0, self.x, self.t = self.lattice.mesh()
        self.dist = boundary_distance(self.lattice)
        self.derivs = u.derivatives()
        self.volume = self.lattice.cell * self.lattice.dt
        usable = np.ones(self.lattice.shape, dtype=bool)
        usable[:, 0, :] = False
        usable[:, -2:, :] = False
        usable[[0, -1]] = False
        pole = getattr(u, "pole_index", None)
        if pole is not None:
            gap = np.abs(np.arange(self.lattice.t.size) - pole[0])
            usable &= (gap > 2)[:, None, None]
        self.usable = usable

    @property
    def hessian_sq(self) -> np.ndarray:
        d = self.derivs
        return d["u00"] ** 2 + 2.0 * d["u0x"] ** 2 + d["uxx"] ** 2

    def region_mask(self, region: WhitneyRegion) -> np.ndarray:
        grow = 17.0 if region.variant == "***" else 1.0
        lo, hi = region.cube.dilate(region.dilation * grow)
        ks = np.nonzero((self.lattice.t >= lo[-1]) & (self.lattice.t <= hi[-1]))[0]
        mask = np.zeros(self.lattice.shape, dtype=bool)
        if ks.size:
            sl = slice(int(ks[0]), int(ks[-1]) + 1)
            mask[sl] = region.contains(self.x0[sl], self.x[sl][..., None], self.t[sl])
        return mask


@dataclass
class Refinement:
    """Good and bad cubes of a regime with the nondegeneracy check"""

    good: list[DyadicCube]
    bad: list[DyadicCube]
    skipped: list[str]
    eps: float
    oscillation: dict[str, float]
    min_du0: float
    nondegenerate: bool
    bad_packing: PackingStatistics


def nondegeneracy_refinement(
    regime: StoppingTimeRegime,
    u: SolutionField,
    constants: StructuralConstants,
    eps: float | None = None,
    excluded_generations: int = 1,
    samples: GreenSamples | None = None,
) -> Refinement:
    """Split a regime into good and bad cubes

    Bad cubes are the ``excluded_generations`` largest generations below the
    top and cubes with iint_{U*_Q} (|grad^2 u|^2 + |d_t u|^2) dist >= eps |Q|.
    ``eps`` defaults to 1e-2 times the largest normalized oscillation of the
    run.  Cubes whose U*_Q holds no usable lattice node are skipped and
    treated as bad.
    """
    samples = GreenSamples(u) if samples is None else samples
    psi = samples.lattice.psi
    integrand = (samples.hessian_sq + samples.derivs["ut"] ** 2) * samples.dist
    oscillation: dict[str, float] = {}
    skipped: list[str] = []
    for cube in regime:
        mask = samples.region_mask(whitney_region(cube, "*", constants.k_whitney, psi,
                                                  constants.whitney_dilations)) & samples.usable
        if not mask.any():
            skipped.append(cube.key)
            continue
        oscillation[cube.key] = float(integrand[mask].sum()) * samples.volume / cube.volume
    if skipped:
        logger.warning("%d cubes have no resolved U*_Q and are treated as bad", len(skipped))
    if eps is None:
        eps = 1e-2 * max(oscillation.values(), default=0.0)
    g0 = regime.top.generation
    good, bad = [], []
    for cube in regime:
        too_big = cube.generation - g0 < excluded_generations
        if too_big or cube.key not in oscillation or oscillation[cube.key] >= eps:
            bad.append(cube)
        else:
            good.append(cube)
    du0 = math.inf
    for cube in good:
        mask = samples.region_mask(whitney_region(cube, "plain", constants.k_whitney, psi,
                                                  constants.whitney_dilations)) & samples.usable
        if mask.any():
            du0 = min(du0, float(samples.derivs["u0"][mask].min()))
    packing = packing_statistics(bad, list(regime))
    nondegenerate = bool(du0 >= constants.c1 / 8.0) if good else False
    logger.info("refinement of %s: %d good, %d bad, min d_x0 u %.4g", regime.top.key, len(good), len(bad), du0)
    return Refinement(good, bad, skipped, float(eps), oscillation, du0, nondegenerate, packing)


def split_regimes(good: Iterable[DyadicCube]) -> list[StoppingTimeRegime]:
    """Group good cubes by their highest ancestor reachable through good cubes"""
    family = {c.key: c for c in good}
    groups: dict[str, list[DyadicCube]] = {}
    for cube in family.values():
        top = cube
        while top.parent().key in family:
            top = top.parent()
        groups.setdefault(top.key, []).append(cube)
    regimes = [StoppingTimeRegime.from_cubes(cubes) for _, cubes in sorted(groups.items())]
    return sorted(regimes, key=lambda r: (r.top.generation, r.top.index))


@dataclass
class SawtoothRegion:
    """Omega_S, Omega_S*, Omega_S** or Omega_S***: the union of the Whitney regions of a regime"""

    regime: StoppingTimeRegime
    variant: str
    constants: StructuralConstants
    psi: GraphFunction

    def regions(self) -> list[WhitneyRegion]:
        return [whitney_region(c, self.variant, self.constants.k_whitney, self.psi,
                               self.constants.whitney_dilations) for c in self.regime]

    def contains(self, x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        out = np.zeros(np.shape(t), dtype=bool)
        for region in self.regions():
            out |= region.contains(x0, x, t)
        return out

    def mask(self, samples: GreenSamples) -> np.ndarray:
        out = np.zeros(samples.lattice.shape, dtype=bool)
        for region in self.regions():
            out |= samples.region_mask(region)
        return out


def sawtooth(regime: StoppingTimeRegime, variant: str, constants: StructuralConstants,
             psi: GraphFunction) -> SawtoothRegion:
    if variant not in ("plain", "*", "**", "***"):
        raise ValueError(f"unknown sawtooth variant {variant!r}")
    return SawtoothRegion(regime, variant, constants, psi)


def _ramp(distance_outside: np.ndarray, margin: float) -> np.ndarray:
    """1 inside (distance <= 0), smooth, 0 beyond ``margin``"""
    return _plateau(1.0 + np.maximum(distance_outside, 0.0) / margin)


def _theta(cube: DyadicCube, lattice: FlatLattice, constants: StructuralConstants,
           sl: slice) -> np.ndarray:
    """Smooth bump equal to 1 on U**_Q and supported inside U***_Q"""
    k = constants.k_whitney
    ell = cube.side
    dil = constants.whitney_dilations[2]
    center = cube.center()
    xs = lattice.x[None, None, :]
    ts = lattice.t[sl][:, None, None]
    rho = lattice.rho[None, :, None]
    px = _ramp(np.abs(xs - center.x[0]) - 0.5 * dil * ell, 0.5 * ell)
    pt = _ramp(np.abs(ts - center.t) - 0.5 * (dil * ell) ** 2, 0.25 * ell * ell)
    with np.errstate(divide="ignore"):
        log_gap = np.log2(np.where(rho > 0, rho, np.nan))
    low, high = math.log2(ell / (4.0 * k)), math.log2(4.0 * k * ell)
    outside = np.maximum(low - log_gap, log_gap - high)
    ph = np.where(rho > 0, _ramp(np.nan_to_num(outside, nan=10.0), 1.0), 0.0)
    return px * pt * ph


@dataclass
class CutoffReport:
    eta: np.ndarray
    derivative_bound: float
    boundary_family: list[str]
    boundary_packing: float
    f_accounting: dict[str, float]
    integral_bound: float
    inclusion_ok: bool


def _neighbours(cube: DyadicCube, constants: StructuralConstants) -> list[DyadicCube]:
    """Cubes of generations g-1, g, g+1 whose U** box overlaps that of Q"""
    out = []
    dil = constants.whitney_dilations[2]
    lo, hi = cube.dilate(dil)
    for gen in (cube.generation - 1, cube.generation, cube.generation + 1):
        side = cube.unit * 2.0 ** (-gen)
        half = np.array([0.5 * dil * side, 0.5 * (dil * side) ** 2])
        steps = np.array([side, side * side])
        first = np.floor((lo - half) / steps).astype(int)
        last = np.ceil((hi + half) / steps).astype(int)
        for i in range(first[0], last[0] + 1):
            for j in range(first[1], last[1] + 1):
                other = DyadicCube(gen, (i, j), cube.unit)
                olo, ohi = other.dilate(dil)
                if np.all(olo <= hi) and np.all(lo <= ohi) and other.key != cube.key:
                    out.append(other)
    return out


def sawtooth_cutoff(
    regime: StoppingTimeRegime,
    lattice: FlatLattice,
    constants: StructuralConstants,
    verify: bool = True,
) -> CutoffReport:
    """eta = 1 - zeta(sum_Q theta_Q) over a (truncated) regime

    Each theta_Q is 1 on U**_Q and vanishes outside U***_Q, so
    1_{Omega**} <= eta <= 1_{Omega***}.
    """
    if any(c.n != 2 for c in regime):
        raise ValueError("the sawtooth cutoff supports n = 2 cubes only")
    total = np.zeros(lattice.shape)
    for cube in regime:
        lo, hi = cube.dilate(constants.whitney_dilations[2])
        margin = cube.side**2
        ks = np.nonzero((lattice.t >= lo[-1] - margin) & (lattice.t <= hi[-1] + margin))[0]
        if ks.size:
            sl = slice(int(ks[0]), int(ks[-1]) + 1)
            total[sl] += _theta(cube, lattice, constants, sl)
    eta = 1.0 - _zeta(total)

    d = ambient_derivatives(eta, lattice)
    dist = boundary_distance(lattice)
    interior = np.zeros(lattice.shape, dtype=bool)
    interior[1:-1, 1:-1, :] = True
    grad = np.sqrt(d["u0"] ** 2 + d["ux"] ** 2)
    weighted = grad * dist + np.abs(d["ut"]) * dist**2
    derivative_bound = float(weighted[interior].max()) if interior.any() else 0.0

    boundary: list[DyadicCube] = []
    f1 = f2 = f3 = 0.0
    g0 = regime.top.generation
    for cube in regime:
        outside = [nb for nb in _neighbours(cube, constants) if nb not in regime]
        if not outside:
            continue
        boundary.append(cube)
        if any(nb.generation > cube.generation for nb in outside):
            f1 += cube.volume
        elif cube.generation - g0 <= 1:
            f2 += cube.volume
        else:
            f3 += cube.volume
    top_volume = regime.top.volume
    vol = lattice.cell * lattice.dt
    integral = float(np.sum((grad**2 * dist + np.abs(d["ut"]))[interior])) * vol / top_volume

    inclusion_ok = True
    if verify:
        samples_x0, samples_x, samples_t = lattice.mesh()
        in2 = np.zeros(lattice.shape, dtype=bool)
        in3 = np.zeros(lattice.shape, dtype=bool)
        for cube in regime:
            r2 = whitney_region(cube, "**", constants.k_whitney, lattice.psi, constants.whitney_dilations)
            r3 = whitney_region(cube, "***", constants.k_whitney, lattice.psi, constants.whitney_dilations)
            in2 |= r2.contains(samples_x0, samples_x[..., None], samples_t)
            in3 |= r3.contains(samples_x0, samples_x[..., None], samples_t)
        inclusion_ok = bool(np.all(eta[in2] == 1.0) and np.all(eta[~in3] == 0.0))
        if not inclusion_ok:
            logger.warning("cutoff inclusion 1_Omega** <= eta <= 1_Omega*** fails on the lattice")
    report = CutoffReport(
        eta=eta,
        derivative_bound=derivative_bound,
        boundary_family=[c.key for c in boundary],
        boundary_packing=sum(c.volume for c in boundary) / top_volume,
        f_accounting={"F1": f1 / top_volume, "F2": f2 / top_volume, "F3": f3 / top_volume},
        integral_bound=integral,
        inclusion_ok=inclusion_ok,
    )
    logger.info("cutoff for %s: derivative bound %.4g, boundary packing %.4g",
                regime.top.key, derivative_bound, report.boundary_packing)
    return report


@dataclass
class SquareFunctionReport:
    main: float
    terms: dict[str, float]
    main_v: float | None
    masked: int
    normalization: float


def square_function_report(
    u: SolutionField,
    region: np.ndarray,
    top: DyadicCube,
    eta: np.ndarray | None = None,
    v: SolutionField | None = None,
) -> SquareFunctionReport:
    """iiint (|d_t u|^2 + |grad^2 u|^2) dist over a lattice region, normalized by |Q(S)|

    The four Caccioppoli terms weight |grad^2 u|^2, |d_t u|^2 by eta^2 dist and
    |grad u|^2 by |grad eta|^2 dist and |d_t eta| dist.  Region nodes next to
    the lattice edges or the pole are masked.
    """
    samples = GreenSamples(u)
    mask = region & samples.usable
    masked = int(np.count_nonzero(region & ~samples.usable))
    if masked:
        logger.warning("square function: %d region nodes masked as unresolved", masked)
    d = samples.derivs
    dist = samples.dist
    norm = top.volume
    vol = samples.volume
    hess = samples.hessian_sq
    dt2 = d["ut"] ** 2
    main = float(np.sum(((dt2 + hess) * dist)[mask])) * vol / norm
    eta = np.ones(samples.lattice.shape) if eta is None else eta
    de = ambient_derivatives(eta, samples.lattice)
    grad_u2 = d["u0"] ** 2 + d["ux"] ** 2
    grad_e2 = de["u0"] ** 2 + de["ux"] ** 2
    terms = {
        "hessian": float(np.sum((hess * eta**2 * dist)[mask])) * vol / norm,
        "time": float(np.sum((dt2 * eta**2 * dist)[mask])) * vol / norm,
        "gradient_cutoff": float(np.sum((grad_u2 * grad_e2 * dist)[mask])) * vol / norm,
        "time_cutoff": float(np.sum((grad_u2 * np.abs(de["ut"]) * dist)[mask])) * vol / norm,
    }
    main_v = None
    if v is not None:
        sv = GreenSamples(v)
        mv = region & sv.usable
        main_v = float(np.sum(((sv.derivs["ut"] ** 2 + sv.hessian_sq) * sv.dist)[mv])) * sv.volume / norm
    return SquareFunctionReport(main, terms, main_v, masked, norm)


@dataclass
class IbpReport:
    alpha: float
    beta: float
    plain: float
    ratio: float
    ratio_band: tuple[float, float]
    energy: float
    divergence_identity_residual: float


def _hessian(d: dict[str, np.ndarray]) -> np.ndarray:
    return np.stack([np.stack([d["u00"], d["u0x"]], -1), np.stack([d["u0x"], d["uxx"]], -1)], -2)


def divergence_identity_residual(values: np.ndarray, lattice: FlatLattice, matrix: np.ndarray,
                     points: np.ndarray | None = None) -> float:
    """max |L<A grad u, grad u> - 2 a_ij u_ik a_kl u_jl - 2 <A grad u, grad Lu>| for constant symmetric A

    L = div(A grad).  The identity is exact for smooth u, so the finite
    difference residual is second order in the lattice step.
    """
    a = np.asarray(matrix, dtype=float)
    d = ambient_derivatives(values, lattice)
    grad = np.stack([d["u0"], d["ux"]], -1)
    hess = _hessian(d)
    flux = grad @ a.T
    energy = np.sum(flux * grad, axis=-1)

    def _op(w: np.ndarray) -> np.ndarray:
        dw = ambient_derivatives(w, lattice)
        return a[0, 0] * dw["u00"] + (a[0, 1] + a[1, 0]) * dw["u0x"] + a[1, 1] * dw["uxx"]

    lu = _op(values)
    dl = ambient_derivatives(lu, lattice)
    grad_lu = np.stack([dl["u0"], dl["ux"]], -1)
    contraction = np.einsum("ij,...ik,kl,...jl->...", a, hess, a, hess)
    residual = np.abs(_op(energy) - 2.0 * contraction - 2.0 * np.sum(flux * grad_lu, axis=-1))
    if points is None:
        inner = np.zeros(lattice.shape, dtype=bool)
        inner[2:-2, 3:-3, :] = True
        return float(residual[inner].max())
    return float(residual[tuple(points.T)].max())


def ibp_identity_check(
    u: SolutionField,
    A: CoefficientField,
    eta: np.ndarray,
    region: np.ndarray,
    top: DyadicCube,
    rng: np.random.Generator | None = None,
    n_points: int = 64,
) -> IbpReport:
    """alpha = iiint u (a_ij u_ik)(a_kl u_jl) eta and beta = iiint u (u_t)^2 eta with their checks"""
    if not A.symmetric:
        raise ValueError("the alpha/beta scheme needs symmetric coefficients")
    samples = GreenSamples(u)
    mask = region & samples.usable
    lattice = samples.lattice
    coeff = A.sample(samples.x0, samples.x[..., None], samples.t)
    hess = _hessian(samples.derivs)
    contraction = hessian_contraction(coeff, hess)
    weight = u.values * eta
    vol = samples.volume
    alpha = float(np.sum((weight * contraction)[mask])) * vol
    beta = float(np.sum((weight * samples.derivs["ut"] ** 2)[mask])) * vol
    plain = float(np.sum((weight * samples.hessian_sq)[mask])) * vol
    ratio = alpha / plain if plain > 0 else 1.0
    rng = np.random.default_rng(0) if rng is None else rng
    candidates = np.argwhere(mask)
    inner = candidates[(candidates[:, 0] >= 2) & (candidates[:, 0] < lattice.t.size - 2)
                       & (candidates[:, 1] >= 3) & (candidates[:, 1] < lattice.rho.size - 3)]
    # the pointwise identity holds for constant A only; NaN marks it unchecked
    residual = math.nan
    if not np.allclose(coeff, coeff.reshape(-1, 2, 2)[0]):
        logger.warning("coefficients vary on the lattice: divergence identity not checked")
    elif not inner.size:
        logger.warning("no interior samples in the region: divergence identity not checked")
    else:
        pick = inner[rng.choice(len(inner), size=min(n_points, len(inner)), replace=False)]
        residual = divergence_identity_residual(u.values, lattice, coeff.reshape(-1, 2, 2)[0], pick)
    energy = abs(alpha + 2.0 * beta) / top.volume
    return IbpReport(alpha, beta, plain, ratio, (A.lam**-2, A.lam**2), energy, residual)
