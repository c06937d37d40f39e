"""Harmonic analysis on the periodic parabolic lattice

Fourier multipliers (I_P, the half-order time derivatives), their localized
versions, parabolic BMO, approximate identities, regularized distances, the
Littlewood-Paley family and the John-Stromberg estimator.

Frequencies are in cycles per unit (``scipy.fft.fftfreq``), so a temporal mode
exp(2 pi i tau t) has quasinorm |tau|^(1/2).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import fft, integrate, ndimage, special

from .geometry import smooth_quasinorm_array
from .graph import GraphFunction, lip_norm_estimate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpaceTimeField:
    """Real samples of f on the periodic parabolic lattice, spatial axes first, time last"""

    values: np.ndarray
    hx: float
    ht: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.ht <= 0.0:
            object.__setattr__(self, "ht", self.hx**2)

    @classmethod
    def from_graph(cls, psi: GraphFunction) -> SpaceTimeField:
        """Periodic part of a graph; affine trends are annihilated by every operator here"""
        return cls(np.array(psi.values), psi.hx)

    @property
    def n(self) -> int:
        return self.values.ndim

    @property
    def steps(self) -> np.ndarray:
        return np.array([self.hx] * (self.n - 1) + [self.ht])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.steps))

    @cached_property
    def _spectrum(self) -> tuple[np.ndarray, np.ndarray]:
        axes = [fft.fftfreq(size, step) for size, step in zip(self.values.shape, self.steps)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return sum(m**2 for m in mesh[:-1]), mesh[-1]

    @property
    def xi2(self) -> np.ndarray:
        return self._spectrum[0]

    @property
    def tau(self) -> np.ndarray:
        return self._spectrum[1]

    @cached_property
    def quasinorm(self) -> np.ndarray:
        """Smooth quasinorm of the frequencies; 1 at frequency 0 to keep divisions finite"""
        out = smooth_quasinorm_array(self.xi2, self.tau)
        out.flat[0] = 1.0
        return out

    def lattice_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Signed periodic offsets from the origin: y with shape (*shape, n-1) and s"""
        axes = []
        for size, step in zip(self.values.shape, self.steps):
            idx = np.arange(size)
            axes.append(np.where(idx < (size + 1) // 2, idx, idx - size) * step)
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh[:-1], axis=-1), mesh[-1]

    def with_values(self, values: np.ndarray) -> SpaceTimeField:
        return SpaceTimeField(values, self.hx, self.ht)


def _apply_multiplier(f: SpaceTimeField, symbol: np.ndarray) -> SpaceTimeField:
    spectrum = fft.fftn(f.values)
    mean = spectrum.flat[0].real / f.values.size
    if abs(mean) > 1e-12 * max(1.0, float(np.abs(f.values).max())):
        logger.warning("projected out nonzero mean %.3g before applying a multiplier", mean)
    symbol = np.array(symbol, dtype=complex)
    symbol.flat[0] = 0.0
    return f.with_values(fft.ifftn(spectrum * symbol).real)


def fractional_integral_IP(f: SpaceTimeField) -> SpaceTimeField:
    """I_P f: multiplier |||(xi, tau)|||^-1, frequency 0 projected out"""
    return _apply_multiplier(f, 1.0 / f.quasinorm)


def time_derivative(f: SpaceTimeField) -> SpaceTimeField:
    """Spectral d/dt"""
    return _apply_multiplier(f, 2j * np.pi * f.tau)


def half_time_derivative(f: SpaceTimeField, kind: str = "Dt") -> SpaceTimeField:
    """Half-order time derivative

    kind ``Dt`` applies 2 pi i tau / |||(xi, tau)|||, kind ``D12`` applies |tau|^(1/2).
    """
    if kind == "Dt":
        return _apply_multiplier(f, 2j * np.pi * f.tau / f.quasinorm)
    if kind == "D12":
        return _apply_multiplier(f, np.sqrt(np.abs(f.tau)))
    raise ValueError(f"unknown half derivative kind {kind!r}, expected Dt or D12")


def _periodized_kernel(n_t: int, ht: float) -> np.ndarray:
    """sum over images of |u + jT|^(-3/2) at lags u = m ht, m = 1..n_t-1; zero at lag 0"""
    period = n_t * ht
    frac = np.arange(1, n_t) / n_t
    tail = special.zeta(1.5, frac) + special.zeta(1.5, 1.0 - frac)
    return np.concatenate([[0.0], tail * period**-1.5])


def half_derivative_quadrature(f: SpaceTimeField, calibrate_mode: int = 1) -> SpaceTimeField:
    """Singular-integral form c * int (f(x,s) - f(x,t)) |s-t|^(-3/2) ds of D12

    The periodized kernel is summed over lags in time with the images expressed
    through the Hurwitz zeta function; ``c`` is fixed by matching the
    |tau|^(1/2) multiplier on the temporal mode ``calibrate_mode``.
    """
    n_t = f.values.shape[-1]
    kernel = _periodized_kernel(n_t, f.ht) * f.ht
    # sum_m K_m f(t + m) as a circular correlation along time
    kernel_hat = np.conj(fft.fft(kernel))
    raw = fft.ifft(fft.fft(f.values, axis=-1) * kernel_hat, axis=-1).real - f.values * kernel.sum()
    tau0 = calibrate_mode / (n_t * f.ht)
    carrier = np.cos(2.0 * np.pi * calibrate_mode * np.arange(n_t) / n_t)
    carrier_raw = fft.ifft(fft.fft(carrier) * kernel_hat).real - carrier * kernel.sum()
    scale = math.sqrt(tau0) * carrier[0] / carrier_raw[0]
    return f.with_values(scale * raw)


def dyadic_top_side(shape: Sequence[int]) -> int:
    """Largest power of two s with s <= every spatial size and s^2 <= the time size"""
    limit = min(min(shape[:-1]), int(math.isqrt(shape[-1])))
    if limit < 1:
        raise ValueError(f"lattice {shape} holds no dyadic cube")
    return 1 << (limit.bit_length() - 1)


def dyadic_blocks(values: np.ndarray, side: int) -> np.ndarray:
    """Rows of samples of the dyadic cubes of spatial side ``side`` cells tiling the box

    Each axis is cropped to a whole number of cubes; rows are ordered by cube
    index in C order.
    """
    d = values.ndim - 1
    sizes = [side] * d + [side * side]
    counts = [size // s for size, s in zip(values.shape, sizes)]
    cropped = values[tuple(slice(0, c * s) for c, s in zip(counts, sizes))]
    split = []
    for c, s in zip(counts, sizes):
        split += [c, s]
    blocks = cropped.reshape(split)
    order = list(range(0, 2 * (d + 1), 2)) + list(range(1, 2 * (d + 1), 2))
    return blocks.transpose(order).reshape(int(np.prod(counts)), -1)


def _sliding_blocks(values: np.ndarray, side: int) -> np.ndarray:
    d = values.ndim - 1
    sizes = [side] * d + [side * side]
    pad = [(0, s - 1) for s in sizes]
    wrapped = np.pad(values, pad, mode="wrap")
    windows = np.lib.stride_tricks.sliding_window_view(wrapped, sizes)
    strides = tuple(slice(None, None, max(1, s // 2)) for s in sizes)
    return windows[strides].reshape(-1, int(np.prod(sizes)))


def bmo_p_norm(f: SpaceTimeField, family: str = "dyadic", generations: int | None = None) -> float:
    """sup over a cube family of the mean oscillation avg_Q |f - f_Q|

    ``dyadic`` uses the dyadic cubes of the box from the largest fitting side
    down to single cells; ``sliding`` uses every lattice-aligned cube of every
    side up to the largest, placed with a stride of half its side.
    """
    top = dyadic_top_side(f.values.shape)
    if family == "dyadic":
        sides = [top >> k for k in range(top.bit_length())]
        if generations is not None:
            sides = sides[:generations]
        collect = dyadic_blocks
    elif family == "sliding":
        sides = list(range(1, top + 1))
        collect = _sliding_blocks
    else:
        raise ValueError(f"unknown cube family {family!r}")
    best = 0.0
    for side in sides:
        rows = collect(f.values, side)
        osc = np.mean(np.abs(rows - rows.mean(axis=1, keepdims=True)), axis=1)
        best = max(best, float(osc.max()))
    return best


@dataclass(frozen=True)
class JohnStrombergResult:
    m: float
    ratio: float
    minimal_m: float
    cube_ratios: dict[int, np.ndarray] = field(default_factory=dict)


def _best_level_mass(ordered: np.ndarray, m: float) -> np.ndarray:
    """For each sorted row, 1 - max fraction of samples inside a closed interval of length 2m"""
    n_rows, width = ordered.shape
    span = float(ordered.max() - ordered.min()) + 2.0 * m + 1.0
    flat = (ordered + span * np.arange(n_rows)[:, None]).ravel()
    ends = np.searchsorted(flat, flat + 2.0 * m, side="right")
    counts = (ends - np.arange(flat.size)).reshape(n_rows, width)
    return 1.0 - counts.max(axis=1) / width


def john_stromberg(
    f: SpaceTimeField,
    m: float,
    generations: int | None = None,
    target: float = 1.0 / 3.0,
) -> JohnStrombergResult:
    """sup over dyadic cubes of inf_C |{|f - C| > m} cap Q| / |Q|, and the minimal m reaching target

    The infimum over C is exact: the best C centres an interval of length 2m
    whose left end is a sample value, found by a sorted search.
    """
    top = dyadic_top_side(f.values.shape)
    sides = [top >> k for k in range(top.bit_length())]
    if generations is not None:
        sides = sides[:generations]
    rows_by_side = {side: np.sort(dyadic_blocks(f.values, side), axis=1) for side in sides}

    def _ratio(level: float) -> float:
        return max(float(_best_level_mass(rows, level).max()) for rows in rows_by_side.values())

    cube_ratios = {side: _best_level_mass(rows, m) for side, rows in rows_by_side.items()}
    ratio = max(float(r.max()) for r in cube_ratios.values())
    low, high = 0.0, float(f.values.max() - f.values.min())
    if _ratio(low) <= target:
        high = 0.0
    for _ in range(60):
        if high - low <= 1e-9 * max(high, 1e-300):
            break
        mid = 0.5 * (low + high)
        if _ratio(mid) <= target:
            high = mid
        else:
            low = mid
    return JohnStrombergResult(m, ratio, high, cube_ratios)


def _plateau(u: np.ndarray) -> np.ndarray:
    """Even smooth cutoff: 1 on [-1, 1], 0 outside (-2, 2)"""
    a = np.abs(u)

    def _g(s: np.ndarray) -> np.ndarray:
        return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)

    up = _g(2.0 - a)
    return up / (up + _g(a - 1.0))


def _zeta(u: np.ndarray) -> np.ndarray:
    """Even bump: 1 on [-1/2, 1/2], supported in [-1, 1]"""
    return _plateau(2.0 * np.asarray(u, dtype=float))


def _bump_taps(r: float, step: float) -> np.ndarray:
    half = int(math.floor(r / step))
    if half < 1:
        return np.ones(1)
    offsets = np.arange(-half, half + 1) * step
    taps = _zeta(offsets / r)
    return taps / taps.sum()


def mollify(values: np.ndarray, r: float, steps: Sequence[float], modes: Sequence[str]) -> np.ndarray:
    """Separable tensor-product bump at parabolic scale r; the last axis is time (scale r^2)"""
    out = np.asarray(values, dtype=float)
    if r <= 0:
        return out.copy()
    last = out.ndim - 1
    for axis, (step, mode) in enumerate(zip(steps, modes)):
        scale = r * r if axis == last else r
        taps = _bump_taps(scale, step)
        if taps.size > 1:
            out = ndimage.correlate1d(out, taps, axis=axis, mode=mode)
    return out


def approx_identity(f: SpaceTimeField | np.ndarray, r: float, variant: str = "spacetime_n",
                    steps: Sequence[float] | None = None) -> np.ndarray:
    """P_r f: convolution with the unit-mass even bump at parabolic scale r

    ``spacetime_n`` acts periodically on a SpaceTimeField; ``ambient_n1``
    acts on an ambient array (x0 first) with the x0 axis clamped at its ends,
    and needs ``steps`` for every axis.  Scales below one lattice cell act as
    the identity on that axis.
    """
    if variant == "spacetime_n":
        if not isinstance(f, SpaceTimeField):
            raise TypeError("spacetime_n variant needs a SpaceTimeField")
        return mollify(f.values, r, f.steps, ["wrap"] * f.n)
    if variant == "ambient_n1":
        values = f.values if isinstance(f, SpaceTimeField) else np.asarray(f, dtype=float)
        if steps is None or len(steps) != values.ndim:
            raise ValueError("ambient_n1 variant needs one step per axis")
        return mollify(values, r, steps, ["nearest"] + ["wrap"] * (values.ndim - 1))
    raise ValueError(f"unknown approximate identity variant {variant!r}")


def approx_identity_dr(f: SpaceTimeField, r: float, rel_step: float = 0.05) -> np.ndarray:
    """d/dr P_r f by a centred difference in r"""
    dr = rel_step * r
    return (approx_identity(f, r + dr) - approx_identity(f, r - dr)) / (2.0 * dr)


def variable_mollify(
    values: np.ndarray,
    scale: np.ndarray,
    steps: Sequence[float],
    modes: Sequence[str],
) -> np.ndarray:
    """Approximate identity at a point-dependent scale

    The field is mollified at the dyadic scales spanning ``scale`` and the
    result interpolated linearly in log2(scale) between neighbouring levels.
    Points with scale <= 0 are left untouched.
    """
    values = np.asarray(values, dtype=float)
    scale = np.asarray(scale, dtype=float)
    out = values.copy()
    active = scale > 0
    if not active.any():
        return out
    finest = min(steps)
    lo = math.floor(math.log2(max(float(scale[active].min()), finest / 2.0)))
    hi = math.ceil(math.log2(float(scale[active].max())))
    levels = {k: mollify(values, 2.0**k, steps, modes) for k in range(lo, hi + 1)}
    position = np.clip(np.log2(np.where(active, scale, 2.0**lo)), lo, hi)
    below = np.floor(position).astype(int)
    frac = position - below
    for k, smoothed in levels.items():
        take = active & (below == k)
        upper = levels.get(k + 1, smoothed)
        out[take] = (1.0 - frac[take]) * smoothed[take] + frac[take] * upper[take]
    return out


@dataclass
class RegularizedDistance:
    values: np.ndarray
    lip: float
    sandwich: tuple[float, float]
    derivative_bounds: dict[str, float]


def _derivative_bounds(h: np.ndarray, d: np.ndarray, steps: np.ndarray, floor: float) -> dict[str, float]:
    """sup of d^(2k-1)|dt^k h| + d^(k-1)|grad^k h| for k = 1, 2 where d > floor"""
    last = h.ndim - 1
    grad = [np.gradient(h, steps[a], axis=a) for a in range(last)]
    dt = np.gradient(h, steps[last], axis=last)
    dtt = np.gradient(dt, steps[last], axis=last)
    hess = [np.gradient(g, steps[b], axis=b) for g in grad for b in range(last)]
    keep = d > floor
    if not keep.any():
        return {"k1": 0.0, "k2": 0.0}
    grad_norm = np.sqrt(sum(g**2 for g in grad))
    hess_norm = np.sqrt(sum(hh**2 for hh in hess))
    k1 = d * np.abs(dt) + grad_norm
    k2 = d**3 * np.abs(dtt) + d * hess_norm
    return {"k1": float(k1[keep].max()), "k2": float(k2[keep].max())}


def regularized_distance(
    d: SpaceTimeField,
    scale_factor: float = 0.125,
    periodic: bool = False,
    lip_tolerance: float = 1e-6,
) -> RegularizedDistance:
    """Smooth h comparable to a Lip(1,1/2) distance-type function d >= 0

    h is d mollified at the point-dependent scale ``scale_factor * d``; with
    Lip(d) <= 1 the averaging windows stay where d is within a factor 2 of its
    centre value.
    """
    values = d.values
    if np.any(values < 0):
        raise ValueError("regularized distance needs d >= 0")
    lip = lip_norm_estimate(GraphFunction(values, d.hx), n_random=0, periodic=periodic).combined
    if lip > 1.0 + lip_tolerance:
        raise ValueError(f"d has Lip(1,1/2) estimate {lip:.4g} > 1")
    modes = ["wrap" if periodic else "nearest"] * d.n
    h = variable_mollify(values, scale_factor * values, d.steps, modes)
    positive = values > 0
    if positive.any():
        ratio = h[positive] / values[positive]
        sandwich = (float(ratio.min()), float(ratio.max()))
    else:
        sandwich = (1.0, 1.0)
    bounds = _derivative_bounds(h, values, d.steps, 2.0 * d.hx)
    logger.debug("regularized distance: sandwich %s, bounds %s", sandwich, bounds)
    return RegularizedDistance(h, lip, sandwich, bounds)


@dataclass
class LocalizedDt:
    local: SpaceTimeField
    tail: SpaceTimeField
    tail_decay: float
    tail_smoothness: float
    tail_oscillation: float


class LocalizedKernel:
    """Localized kernels of I_P and its time derivative at scale R

    V is the lattice kernel of I_P, V_R = Phi_R V with
    Phi_R(y, s) = prod phi(y_i / R) phi(s / (2 R^2)), and K^R the centred time
    difference of V_R.  Kernels are built once per (lattice, R).
    """

    def __init__(self, grid: SpaceTimeField, R: float):
        if R < 4.0 * grid.hx:
            raise ValueError(f"unresolvable localization: R = {R} is below 4 lattice cells")
        self.grid = grid
        self.R = R
        y, s = grid.lattice_offsets()
        self.norm = np.linalg.norm(y, axis=-1) + np.sqrt(np.abs(s))
        symbol = 1.0 / grid.quasinorm
        symbol.flat[0] = 0.0
        self.V = fft.ifftn(symbol).real / grid.cell_volume
        window = _plateau(s / (2.0 * R * R))
        for axis in range(grid.n - 1):
            window = window * _plateau(y[..., axis] / R)
        self.window = window
        self.V_R = window * self.V
        last = grid.n - 1
        self.K = (np.roll(self.V, -1, last) - np.roll(self.V, 1, last)) / (2.0 * grid.ht)
        self.K_R = (np.roll(self.V_R, -1, last) - np.roll(self.V_R, 1, last)) / (2.0 * grid.ht)
        lengths = np.asarray(grid.values.shape) * grid.steps
        if 2.0 * R > 0.5 * lengths[:-1].min() or 4.0 * R * R > 0.5 * lengths[-1]:
            logger.warning("localization window at R=%g wraps around the periodic box", R)

    def _convolve(self, kernel: np.ndarray, f: np.ndarray) -> np.ndarray:
        return fft.ifftn(fft.fftn(kernel) * fft.fftn(f)).real * self.grid.cell_volume

    def local_ip(self, f: SpaceTimeField) -> SpaceTimeField:
        """I_P^R f = V_R * f"""
        return f.with_values(self._convolve(self.V_R, f.values))

    def local_dt(self, f: SpaceTimeField) -> SpaceTimeField:
        """D_t^R f = K^R * f"""
        return f.with_values(self._convolve(self.K_R, f.values))

    def ip_decay_constant(self) -> float:
        """max V(y) ||y||^n over y != 0 inside half the box"""
        n = self.grid.n
        inner = (self.norm > 0) & (self.window > 0)
        return float(np.max(np.abs(self.V[inner]) * self.norm[inner] ** n))

    def tail_constants(self) -> tuple[float, float]:
        """Decay |K - K^R| ||y||^(d+1) outside Q_R and smoothness over increments of size R"""
        d = self.grid.n + 1
        tail = self.K - self.K_R
        outside = self.norm >= self.R
        decay = float(np.max(np.abs(tail[outside]) * self.norm[outside] ** (d + 1))) if outside.any() else 0.0
        m = max(1, int(round(self.R / self.grid.hx)))
        smooth = 0.0
        shifts = [(axis, m) for axis in range(self.grid.n - 1)] + [(self.grid.n - 1, m * m)]
        weight = (self.norm + self.R) ** (d + 2) / self.R
        for axis, step in shifts:
            jump = np.abs(np.roll(tail, -step, axis) - tail)
            smooth = max(smooth, float(np.max((jump * weight)[outside])))
        return decay, smooth


def _window_oscillation(values: np.ndarray, m: int) -> float:
    """max |g(x) - g(x')| over lattice shifts within m cells in space and m^2 in time"""
    worst = 0.0
    last = values.ndim - 1
    for axis in range(values.ndim):
        reach = m * m if axis == last else m
        for step in range(1, reach + 1):
            worst = max(worst, float(np.max(np.abs(np.roll(values, -step, axis) - values))))
    return worst


def localized_dt(f: SpaceTimeField, R: float, kernel: LocalizedKernel | None = None) -> LocalizedDt:
    """Split Dt f into the local part D_t^R f and the tail E^R f = Dt f - D_t^R f"""
    kernel = LocalizedKernel(f, R) if kernel is None else kernel
    local = kernel.local_dt(f)
    tail = half_time_derivative(f, "Dt").values - local.values
    decay, smooth = kernel.tail_constants()
    osc = _window_oscillation(tail, max(1, int(round(R / f.hx))))
    return LocalizedDt(local, f.with_values(tail), decay, smooth, osc)


def lp_family(
    f: SpaceTimeField,
    j: int,
    r: float,
    gamma: float = 0.125,
    R_loc: float | None = None,
    kernel: LocalizedKernel | None = None,
) -> np.ndarray:
    """Littlewood-Paley pieces Q_r^(j) f

    j = 1: r Dt^R P_{gamma r} f; j = 2: I_P^R d/dr P_{gamma r} f;
    j = 3: r I_P^R d^2/dr^2 P_{gamma r} f.  Without ``R_loc`` (or a kernel)
    the global operators Dt and I_P are used.
    A smoothing scale gamma r below the lattice step on every axis is an error,
    since P_{gamma r} would act as the identity.
    """
    if j not in (1, 2, 3):
        raise ValueError(f"Littlewood-Paley index must be 1, 2 or 3, got {j}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    lengths = np.asarray(f.values.shape) * f.steps
    if r < 2.0 * f.hx or r > 0.5 * lengths[:-1].min():
        raise ValueError(f"radius {r} outside the resolvable band [{2.0 * f.hx}, {0.5 * lengths[:-1].min()}]")
    if kernel is None and R_loc is not None:
        kernel = LocalizedKernel(f, R_loc)
    s = gamma * r
    last = f.values.ndim - 1
    if all(_bump_taps(s * s if axis == last else s, step).size == 1 for axis, step in enumerate(f.steps)):
        raise ValueError(f"smoothing scale gamma * r = {s:.4g} is below the lattice step {f.hx:.4g}")
    ds = 0.05 * s
    if j == 1:
        smoothed = f.with_values(approx_identity(f, s))
        if kernel is None:
            return r * half_time_derivative(smoothed, "Dt").values
        return r * kernel.local_dt(smoothed).values
    if j == 2:
        # d/dr P_{gamma r} = gamma (d/ds P_s) at s = gamma r
        derived = f.with_values(gamma * approx_identity_dr(f, s))
    else:
        second = (approx_identity(f, s + ds) - 2.0 * approx_identity(f, s) + approx_identity(f, s - ds)) / ds**2
        derived = f.with_values(r * gamma * gamma * second)
    if kernel is None:
        return fractional_integral_IP(derived).values
    return kernel.local_ip(derived).values


def lp_square_function(
    f: SpaceTimeField,
    j: int,
    radii: Sequence[float],
    gamma: float = 0.125,
    R_loc: float | None = None,
) -> float:
    """int int |Q_r^(j) f|^2 dx dr / r by the trapezoid rule in log r"""
    kernel = LocalizedKernel(f, R_loc) if R_loc is not None else None
    radii = np.sort(np.asarray(radii, dtype=float))
    densities = [float(np.sum(lp_family(f, j, r, gamma, kernel=kernel) ** 2)) * f.cell_volume for r in radii]
    if radii.size == 1:
        return densities[0]
    return float(integrate.trapezoid(densities, np.log(radii)))


def norm_equivalence_band(psi: GraphFunction) -> float:
    """(||Dt psi||_BMO + ||grad psi||_inf) / (||D12 psi||_BMO + ||grad psi||_inf)"""
    f = SpaceTimeField.from_graph(psi)
    grad = float(np.max(np.sqrt(np.sum(psi.spatial_gradient() ** 2, axis=0))))
    num = bmo_p_norm(half_time_derivative(f, "Dt")) + grad
    den = bmo_p_norm(half_time_derivative(f, "D12")) + grad
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den
