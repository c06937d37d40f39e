"""Parabolic geometry: points, norms, cubes, dyadic grids, Whitney regions and corkscrews

Conventions used throughout the package:

* a space-time point is ``(x, t)`` with ``x`` in R^(n-1) and ``t`` in R, so that
  ``n`` is the space-time dimension and ``n + 1`` the homogeneous dimension;
* an ambient point adds the graph coordinate ``x0`` in front of ``x``;
* arrays of points keep the spatial coordinates in the last axis, and times in
  a separate array of matching leading shape.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Iterator, Protocol, Sequence, Union

import numpy as np
from scipy import optimize

logger = logging.getLogger(__name__)


class GraphLike(Protocol):
    """Anything that evaluates psi(x, t) on arrays, e.g. graph.GraphFunction"""

    def __call__(self, x: np.ndarray, t: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class SpaceTimePoint:
    """Point (x, t) of R^n with x in R^(n-1)"""

    x: tuple[float, ...]
    t: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        object.__setattr__(self, "t", float(self.t))

    @property
    def n(self) -> int:
        """Space-time dimension"""
        return len(self.x) + 1

    def as_array(self) -> np.ndarray:
        """Return (x_1, ..., x_{n-1}, t)"""
        return np.array([*self.x, self.t])


@dataclass(frozen=True)
class AmbientPoint:
    """Point (x0, x, t) of R^(n+1); x0 is the graph coordinate"""

    x0: float
    p: SpaceTimePoint

    @property
    def x(self) -> tuple[float, ...]:
        return self.p.x

    @property
    def t(self) -> float:
        return self.p.t

    @classmethod
    def make(cls, x0: float, x: Sequence[float] | float, t: float) -> AmbientPoint:
        """Build from plain numbers"""
        return cls(float(x0), SpaceTimePoint(tuple(np.atleast_1d(x)), t))


@dataclass(frozen=True)
class ParabolicCube:
    """Q_R(x, t) = {|y_i - x_i| < R, |s - t| < R^2}"""

    center: SpaceTimePoint
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError(f"ParabolicCube radius must be positive, got {self.radius}")

    @property
    def volume(self) -> float:
        n = self.center.n
        return 2.0**n * self.radius ** (n + 1)

    def contains(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Membership of arrays of points, x has the spatial coordinates last"""
        x = np.asarray(x, dtype=float)
        dx = np.abs(x - np.asarray(self.center.x)).max(axis=-1)
        return (dx < self.radius) & (np.abs(np.asarray(t) - self.center.t) < self.radius**2)


@dataclass(frozen=True)
class AmbientCube:
    """Closed cube J_R(X, t) of R^(n+1), parabolic side length 2R"""

    center: AmbientPoint
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError(f"AmbientCube radius must be positive, got {self.radius}")

    @property
    def side_length(self) -> float:
        return 2.0 * self.radius

    def contains(self, x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        dx = np.abs(x - np.asarray(self.center.x)).max(axis=-1)
        dx = np.maximum(dx, np.abs(np.asarray(x0) - self.center.x0))
        return (dx <= self.radius) & (np.abs(np.asarray(t) - self.center.t) <= self.radius**2)


@dataclass(frozen=True, order=True)
class DyadicCube:
    """Parabolic dyadic cube of generation k

    The spatial side is ``unit * 2**-k`` and the temporal side its square, so
    each cube has 2^(n-1) * 4 = 2^(n+1) children.  ``index`` holds the
    n-1 spatial indices followed by the temporal index; the grid is anchored
    at the origin.
    """

    generation: int
    index: tuple[int, ...]
    unit: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "index", tuple(int(i) for i in self.index))
        if len(self.index) < 2:
            raise ValueError("DyadicCube needs at least one spatial and one temporal index")

    @property
    def n(self) -> int:
        return len(self.index)

    @property
    def side(self) -> float:
        return self.unit * 2.0 ** (-self.generation)

    @property
    def time_side(self) -> float:
        return self.side**2

    @property
    def volume(self) -> float:
        return self.side ** (self.n + 1)

    @property
    def diameter(self) -> float:
        """Parabolic diameter sqrt(n-1)*l + l"""
        return (math.sqrt(self.n - 1) + 1.0) * self.side

    @property
    def key(self) -> str:
        return f"{self.generation}:" + ",".join(str(i) for i in self.index)

    @classmethod
    def from_key(cls, key: str, unit: float = 1.0) -> DyadicCube:
        gen, idx = key.split(":")
        return cls(int(gen), tuple(int(i) for i in idx.split(",")), unit)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners as (x..., t) arrays"""
        steps = np.array([self.side] * (self.n - 1) + [self.time_side])
        lo = np.asarray(self.index, dtype=float) * steps
        return lo, lo + steps

    def center(self) -> SpaceTimePoint:
        lo, hi = self.bounds()
        mid = 0.5 * (lo + hi)
        return SpaceTimePoint(tuple(mid[:-1]), mid[-1])

    def dilate(self, factor: float) -> tuple[np.ndarray, np.ndarray]:
        """Bounds of factor*Q: spatial side factor*l, temporal side (factor*l)^2"""
        mid = self.center().as_array()
        half = np.array([0.5 * factor * self.side] * (self.n - 1) + [0.5 * (factor * self.side) ** 2])
        return mid - half, mid + half

    def parent(self) -> DyadicCube:
        idx = tuple(i // 2 for i in self.index[:-1]) + (self.index[-1] // 4,)
        return DyadicCube(self.generation - 1, idx, self.unit)

    def ancestors(self, top_generation: int) -> list[DyadicCube]:
        """Strict ancestors down to (and including) top_generation, nearest first"""
        out: list[DyadicCube] = []
        cube = self
        while cube.generation > top_generation:
            cube = cube.parent()
            out.append(cube)
        return out

    def children(self) -> list[DyadicCube]:
        spatial = [(2 * i, 2 * i + 1) for i in self.index[:-1]]
        temporal = [4 * self.index[-1] + j for j in range(4)]
        out = []
        for sidx in np.ndindex(*([2] * (self.n - 1))):
            for tidx in temporal:
                idx = tuple(spatial[a][b] for a, b in enumerate(sidx)) + (tidx,)
                out.append(DyadicCube(self.generation + 1, idx, self.unit))
        return out

    def descendants(self, depth: int) -> Iterator[DyadicCube]:
        """All cubes of generations generation..generation+depth below self, self included"""
        level = [self]
        for _ in range(depth + 1):
            yield from level
            level = [child for cube in level for child in cube.children()]

    def contains_cube(self, other: DyadicCube) -> bool:
        if other.generation < self.generation:
            return False
        shift = other.generation - self.generation
        idx = tuple(i >> shift for i in other.index[:-1]) + (other.index[-1] >> (2 * shift),)
        return idx == self.index

    def contains_points(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds()
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        inside = np.all((x >= lo[:-1]) & (x < hi[:-1]), axis=-1)
        return inside & (t >= lo[-1]) & (t < hi[-1])

    def distance_to_points(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Parabolic distance from points to the closed cube"""
        lo, hi = self.bounds()
        x = np.asarray(x, dtype=float)
        gap_x = np.maximum(np.maximum(lo[:-1] - x, x - hi[:-1]), 0.0)
        gap_t = np.maximum(np.maximum(lo[-1] - np.asarray(t), np.asarray(t) - hi[-1]), 0.0)
        return np.linalg.norm(gap_x, axis=-1) + np.sqrt(gap_t)

    def distance_to_cube(self, other: DyadicCube) -> float:
        lo1, hi1 = self.bounds()
        lo2, hi2 = other.bounds()
        gap = np.maximum(np.maximum(lo1 - hi2, lo2 - hi1), 0.0)
        return float(np.linalg.norm(gap[:-1]) + math.sqrt(gap[-1]))


def cube_containing(x: Sequence[float], t: float, generation: int, unit: float = 1.0) -> DyadicCube:
    """The dyadic cube of the given generation that contains (x, t)"""
    side = unit * 2.0 ** (-generation)
    idx = tuple(int(math.floor(v / side)) for v in x) + (int(math.floor(t / side**2)),)
    return DyadicCube(generation, idx, unit)


@dataclass(frozen=True)
class StructuralConstants:
    """Ledger of the structural constants, with desk defaults

    Attributes
    ----------
    n: space-time dimension
    lam: ellipticity constant Lambda
    m0: 2 + Lip(1,1/2) norm of the graph
    k_whitney: Whitney fattening K, a power of two
    corkscrew_factor: elevation factor M_star used for the corona poles
    m_prime: measure comparability M'
    m1, m2: Green function comparability constants
    c1: nondegeneracy constant
    alpha: boundary Hoelder exponent
    delta: level-range parameter
    gamma: mollification ratio
    eps0: Case-1 threshold
    c_a: coefficient Carleson constant
    c_star, q: reverse Hoelder constant and exponent
    whitney_dilations: dilation factors for U, U* and U**
    """

    n: int = 2
    lam: float = 1.0
    m0: float = 2.0
    k_whitney: int = 8
    corkscrew_factor: float = 4.0
    m_prime: float = 4.0
    m1: float = 10.0
    m2: float = 10.0
    c1: float = 0.1
    alpha: float = 0.25
    delta: float = 1.0 / 16.0
    gamma: float = 1.0 / 8.0
    eps0: float = 1.0 / 64.0
    c_a: float = 1.0
    c_star: float = 10.0
    q: float = 2.0
    whitney_dilations: tuple[float, float, float] = (2.0, 4.0, 8.0)
    allow_n1: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "whitney_dilations", tuple(float(v) for v in self.whitney_dilations))
        if self.n < 2:
            if not (self.n == 1 and self.allow_n1):
                raise ValueError(f"dimension n must be >= 2, got {self.n}")
            logger.warning("running with n = 1 (desk mode)")
        if self.lam < 1:
            raise ValueError(f"ellipticity constant must be >= 1, got {self.lam}")
        if self.m0 < 2:
            raise ValueError(f"M0 must be >= 2, got {self.m0}")
        log_k = math.log2(self.k_whitney) if self.k_whitney > 0 else -1.0
        if log_k != int(log_k) or log_k < 2:
            raise ValueError(f"K must be 2^N with N >= 2, got {self.k_whitney}")
        if self.q <= 1:
            raise ValueError(f"reverse Hoelder exponent must be > 1, got {self.q}")
        positive = ("corkscrew_factor", "m_prime", "m1", "m2", "c1", "alpha", "delta", "gamma",
                    "eps0", "c_a", "c_star")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"structural constant {name} must be positive")
        dil = self.whitney_dilations
        if not 1.0 <= dil[0] <= dil[1] <= dil[2]:
            raise ValueError(f"Whitney dilations must be nested and >= 1, got {dil}")

    @property
    def kappa(self) -> float:
        """Aperture of the space-time parabolas"""
        return 40.0 * self.m0 * math.sqrt(self.n)

    @classmethod
    def for_graph(cls, lip: float, **kwargs: Any) -> StructuralConstants:
        """Constants with M0 = 2 + lip"""
        return cls(m0=2.0 + lip, **kwargs)

    def replace(self, **kwargs: Any) -> StructuralConstants:
        return dataclasses.replace(self, **kwargs)

    def ledger(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["whitney_dilations"] = list(self.whitney_dilations)
        out["kappa"] = self.kappa
        return out


PointLike = Union[SpaceTimePoint, AmbientPoint]


def parabolic_norm(p: PointLike) -> float:
    """|x| + |t|^(1/2); for ambient points |x| includes x0"""
    if isinstance(p, AmbientPoint):
        spatial = math.sqrt(p.x0**2 + sum(v * v for v in p.x))
    else:
        spatial = math.sqrt(sum(v * v for v in p.x))
    return spatial + math.sqrt(abs(p.t))


def parabolic_norm_array(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorised parabolic norm, x with spatial coordinates in the last axis"""
    return np.linalg.norm(np.asarray(x, dtype=float), axis=-1) + np.sqrt(np.abs(t))


def smooth_quasinorm(p: SpaceTimePoint) -> float:
    """The positive root rho of |x|^2/rho^2 + t^2/rho^4 = 1

    The left hand side decreases in rho, and the root lies in
    [|p|/2, |p|] for the parabolic norm |p|, so bisection converges.
    """
    x2 = sum(v * v for v in p.x)
    t2 = p.t * p.t
    if x2 == 0.0 and t2 == 0.0:
        raise ValueError("smooth quasinorm is undefined at origin")
    norm = parabolic_norm(p)

    def _residual(rho: float) -> float:
        return x2 / rho**2 + t2 / rho**4 - 1.0

    return float(optimize.bisect(_residual, 0.5 * norm, norm, xtol=1e-15 * norm, rtol=1e-12))


def smooth_quasinorm_array(xi2: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Closed form of the smooth quasinorm, xi2 is |x|^2"""
    xi2 = np.asarray(xi2, dtype=float)
    tau = np.asarray(tau, dtype=float)
    return np.sqrt(0.5 * (xi2 + np.sqrt(xi2**2 + 4.0 * tau**2)))


def _sign(sign: int | str) -> int:
    if sign in (1, "+", "plus", "forward"):
        return 1
    if sign in (-1, "-", "minus", "backward"):
        return -1
    raise ValueError(f"sign must be +1 or -1, got {sign!r}")


def corkscrew(
    X: AmbientPoint,
    R: float,
    sign: int | str,
    constants: StructuralConstants,
    psi: GraphLike | None = None,
) -> AmbientPoint:
    """Time-forward (+) or time-backward (-) corkscrew point (x0 + 2 M0 R, x, t +- 2R^2)

    Parameters
    ----------
    X: AmbientPoint
        Boundary point, X = (psi(x, t), x, t)
    R: float
        Scale
    sign: int | str
        +1 for the time-forward point, -1 for the time-backward one
    constants: StructuralConstants
        Supplies M0
    psi: GraphLike | None
        If given, X is checked to lie on the graph
    """
    if R <= 0:
        raise ValueError(f"corkscrew scale must be positive, got {R}")
    sgn = _sign(sign)
    if psi is not None:
        on_graph = float(psi(np.array([X.x]), np.array([X.t]))[0])
        if abs(on_graph - X.x0) > 1e-9 * max(1.0, abs(on_graph)):
            raise ValueError(f"corkscrew base point {X} is not on the graph (psi = {on_graph})")
    return AmbientPoint(X.x0 + 2.0 * constants.m0 * R, SpaceTimePoint(X.x, X.t + sgn * 2.0 * R * R))


def top_corkscrew(
    cube: DyadicCube,
    psi: GraphLike,
    sign: int | str,
    constants: StructuralConstants,
) -> AmbientPoint:
    """Pole X^+-_Q: the corkscrew of radius M_star * R above the centre of Q = Q_R"""
    center = cube.center()
    base = float(psi(np.array([center.x]), np.array([center.t]))[0])
    radius = 0.5 * cube.side * constants.corkscrew_factor
    return corkscrew(AmbientPoint(base, center), radius, sign, constants)


def in_parabola(
    Y: AmbientPoint,
    X: AmbientPoint,
    r: float,
    sign: int | str,
    kappa: float,
) -> bool:
    """Y in P^+-_{kappa, r}(X): |(x0,x)-(y0,y)| <= kappa |t-s|^(1/2) and +-(s-t) >= 16 r^2"""
    sgn = _sign(sign)
    gap = sgn * (Y.t - X.t)
    if r <= 0 or gap < 16.0 * r * r:
        return False
    spatial = math.sqrt((Y.x0 - X.x0) ** 2 + sum((a - b) ** 2 for a, b in zip(Y.x, X.x)))
    return spatial <= kappa * math.sqrt(abs(Y.t - X.t))


def dist_to_graph(X: AmbientPoint, psi: GraphLike, n_samples: int = 33) -> float:
    """Parabolic distance from X in Omega to the graph of psi

    The infimum is attained within the window |y - x| <= gap, |s - t| <= gap^2
    where gap = x0 - psi(x, t); it is found on a dense sample of that window and
    polished with Nelder-Mead.
    """
    x = np.asarray(X.x, dtype=float)
    gap = X.x0 - float(psi(x[np.newaxis, :], np.array([X.t]))[0])
    if gap < 0:
        raise ValueError(f"point {X} lies below the graph (gap {gap})")
    if gap == 0.0:
        return 0.0
    d = x.size
    axes = [np.linspace(v - gap, v + gap, n_samples) for v in x]
    axes.append(np.linspace(X.t - gap * gap, X.t + gap * gap, n_samples))
    mesh = np.meshgrid(*axes, indexing="ij")
    ys = np.stack([m.ravel() for m in mesh[:-1]], axis=-1)
    ss = mesh[-1].ravel()

    def _dist(ys_: np.ndarray, ss_: np.ndarray) -> np.ndarray:
        vert = X.x0 - psi(ys_, ss_)
        return np.sqrt(vert**2 + np.sum((ys_ - x) ** 2, axis=-1)) + np.sqrt(np.abs(ss_ - X.t))

    values = _dist(ys, ss)
    best = int(np.argmin(values))
    start = np.append(ys[best], ss[best])

    def _objective(v: np.ndarray) -> float:
        return float(_dist(v[np.newaxis, :d], v[d:])[0])

    polished = optimize.minimize(_objective, start, method="Nelder-Mead",
                                 options={"xatol": 1e-10 * gap, "fatol": 1e-12 * gap})
    return float(min(values[best], polished.fun, gap))


@dataclass(frozen=True)
class WhitneyRegion:
    """Whitney region U_Q, U_Q*, U_Q** or U_Q*** above a dyadic cube

    ``boxes`` lists (lo, hi, a, b) components: (x, t) in [lo, hi] and
    a < x0 - psi(x, t) < b.  Plain, * and ** have a single component; ***
    is the union of U**_{Q'} over cubes Q' whose U** meets U**_Q, which is
    tested per point without enumerating Q'.
    """

    cube: DyadicCube
    variant: str
    k_whitney: int
    dilations: tuple[float, float, float]
    psi: Any

    _levels = {"plain": 0, "*": 1, "**": 2}

    @property
    def height_range(self) -> tuple[float, float]:
        level = 2 if self.variant == "***" else self._levels[self.variant]
        fat = 2.0**level
        return self.cube.side / (fat * self.k_whitney), fat * self.k_whitney * self.cube.side

    @property
    def dilation(self) -> float:
        level = 2 if self.variant == "***" else self._levels[self.variant]
        return self.dilations[level]

    def _single_contains(self, cube: DyadicCube, x: np.ndarray, t: np.ndarray, gap: np.ndarray) -> np.ndarray:
        lo, hi = cube.dilate(self.dilation)
        inside = np.all((x >= lo[:-1]) & (x <= hi[:-1]), axis=-1) & (t >= lo[-1]) & (t <= hi[-1])
        low, high = self.height_range
        return inside & (gap > low) & (gap < high)

    def contains(self, x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Vectorised membership test of ambient points"""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        gap = np.asarray(x0, dtype=float) - self.psi(x, t)
        if self.variant != "***":
            return self._single_contains(self.cube, x, t, gap)
        return self._triple_contains(x, t, gap)

    def _triple_contains(self, x: np.ndarray, t: np.ndarray, gap: np.ndarray) -> np.ndarray:
        cube = self.cube
        k = float(self.k_whitney)
        lam = self.dilations[2]
        center = cube.center().as_array()
        span = int(math.ceil(math.log2(16.0 * k * k)))
        out = np.zeros(gap.shape, dtype=bool)
        for gen in range(cube.generation - span, cube.generation + span + 1):
            side = cube.unit * 2.0 ** (-gen)
            if not cube.side / (16.0 * k * k) < side < 16.0 * k * k * cube.side:
                continue
            hit = (gap > side / (4.0 * k)) & (gap < 4.0 * k * side)
            for axis in range(cube.n):
                step = side if axis < cube.n - 1 else side * side
                half_p = 0.5 * lam * side if axis < cube.n - 1 else 0.5 * (lam * side) ** 2
                half_q = 0.5 * lam * cube.side if axis < cube.n - 1 else 0.5 * (lam * cube.side) ** 2
                coord = x[..., axis] if axis < cube.n - 1 else t
                lo = np.maximum(coord - half_p, center[axis] - half_q - half_p)
                hi = np.minimum(coord + half_p, center[axis] + half_q + half_p)
                first = np.ceil(lo / step - 0.5)
                hit &= (first + 0.5) * step <= hi
            out |= hit
        return out

    def sample(self, rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Quasi-uniform interior sample (x0, x, t), log-uniform in height"""
        lo, hi = self.cube.dilate(self.dilation)
        low, high = self.height_range
        if self.variant == "***":
            # bounding box of all components, filtered by rejection
            k = float(self.k_whitney)
            grow = 16.0 * k * k
            lo, hi = self.cube.dilate(self.dilation * (1.0 + grow))
            low, high = low / (16.0 * k * k), high * 16.0 * k * k
        pts = rng.uniform(lo, hi, size=(count, self.cube.n))
        x = pts[:, :-1]
        t = pts[:, -1]
        height = np.exp(rng.uniform(math.log(low), math.log(high), size=count))
        height = np.clip(height, low * (1 + 1e-9), high * (1 - 1e-9))
        x0 = self.psi(x, t) + height
        if self.variant == "***":
            keep = self.contains(x0, x, t)
            return x0[keep], x[keep], t[keep]
        return x0, x, t


def whitney_region(
    cube: DyadicCube,
    variant: str,
    k_whitney: int,
    psi: GraphLike,
    dilations: tuple[float, float, float] = (2.0, 4.0, 8.0),
) -> WhitneyRegion:
    """Build U_Q(K) (variant 'plain'), U_Q* ('*'), U_Q** ('**') or U_Q*** ('***')"""
    if variant not in ("plain", "*", "**", "***"):
        raise ValueError(f"unknown Whitney variant {variant!r}")
    log_k = math.log2(k_whitney)
    if log_k != int(log_k) or log_k < 2:
        raise ValueError(f"K must be 2^N with N >= 2, got {k_whitney}")
    return WhitneyRegion(cube, variant, int(k_whitney), tuple(dilations), psi)  # type: ignore[arg-type]
