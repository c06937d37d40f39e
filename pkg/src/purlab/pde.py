"""Parabolic solver above a graph: solutions, Green functions, parabolic measure and boundary estimates

The domain Omega = {x0 > psi(x, t)} is flattened with rho = x0 - psi(x, t).  In
the coordinates (rho, x, t) the operator dt - div(A grad) becomes
dt - div(J A J^T grad) - psi_t d_rho with J = [[1, -psi_x], [0, 1]].  The
flattened slab 0 <= rho <= H is periodic in x; rho = 0 carries the Dirichlet
data and rho = H reflects.

Time stepping is backward Euler on a monotone stencil: the discrete generator
has nonnegative off-diagonal entries and zero row sums, so every step is an
M-matrix solve.  That gives the maximum and comparison principles and keeps
constants exactly.  Only n = 2 (one spatial variable besides x0) is supported.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import linalg as sparse_linalg

from .geometry import (
    AmbientPoint,
    DyadicCube,
    SpaceTimePoint,
    StructuralConstants,
    corkscrew,
    in_parabola,
    top_corkscrew,
)
from .graph import GraphDomain, GraphFunction, dyadic_mask, surface_measure

logger = logging.getLogger(__name__)


MatrixFunc = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CoefficientField:
    """Matrix-valued A(X, t) evaluated pointwise

    ``func(x0, x, t)`` maps broadcastable arrays (x with the spatial
    coordinates in its last axis) to matrices of shape (..., n, n).
    """

    func: MatrixFunc
    lam: float = 1.0
    symmetric: bool = True
    time_independent: bool = True
    name: str = "custom"
    dim: int = 2

    def sample(self, x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        shape = np.broadcast_shapes(x0.shape, x.shape[:-1], t.shape)
        out = np.asarray(self.func(x0, x, t), dtype=float)
        return np.broadcast_to(out, shape + (self.dim, self.dim))

    def transpose(self) -> CoefficientField:
        if self.symmetric:
            return self
        func = self.func
        return CoefficientField(
            lambda x0, x, t: np.swapaxes(func(x0, x, t), -1, -2),
            self.lam, False, self.time_independent, f"{self.name}^T", self.dim,
        )

    @classmethod
    def constant(cls, matrix: np.ndarray, lam: float | None = None, name: str = "constant") -> CoefficientField:
        matrix = np.asarray(matrix, dtype=float)
        eig = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
        lam = lam if lam is not None else max(float(np.linalg.norm(matrix, 2)), 1.0 / float(eig.min()))
        return cls(lambda x0, x, t: matrix, lam, bool(np.allclose(matrix, matrix.T)), True, name, matrix.shape[0])

    @classmethod
    def identity(cls, dim: int = 2) -> CoefficientField:
        return cls.constant(np.eye(dim), 1.0, "heat")

    @classmethod
    def on_lattice(
        cls,
        lattice: FlatLattice,
        samples: np.ndarray,
        lam: float,
        symmetric: bool,
        name: str = "sampled",
    ) -> CoefficientField:
        """Multilinear interpolation of matrix samples of shape (n_t, n_rho + 1, n_x, n, n), clamped outside"""
        samples = np.asarray(samples, dtype=float)
        dim = samples.shape[-1]
        padded = np.concatenate([samples, samples[:, :, :1]], axis=2)
        psi = lattice.psi

        def _func(x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
            shape = np.broadcast_shapes(np.shape(x0), np.shape(x)[:-1], np.shape(t))
            xs = np.broadcast_to(np.asarray(x, dtype=float)[..., 0], shape)
            ts = np.broadcast_to(np.asarray(t, dtype=float), shape)
            rho = np.broadcast_to(np.asarray(x0, dtype=float), shape) - psi(xs[..., None], ts)
            coords = np.stack([
                ((ts - lattice.t[0]) / lattice.dt).ravel(),
                (rho / lattice.h_rho).ravel(),
                np.mod(xs / lattice.hx, lattice.x.size).ravel(),
            ])
            out = np.empty((coords.shape[1], dim, dim))
            for i in range(dim):
                for j in range(dim):
                    out[:, i, j] = ndimage.map_coordinates(padded[..., i, j], coords, order=1, mode="nearest")
            return out.reshape(shape + (dim, dim))

        static = lattice.static and bool(np.allclose(samples, samples[:1]))
        return cls(_func, lam, symmetric, static, name, dim)


@dataclass(frozen=True)
class SolverConfig:
    """Discretisation of the flattened slab

    Attributes
    ----------
    n_rho: cells in rho between Sigma and the reflecting top
    height: slab height H
    time_refinement: time steps per graph time step, dt = hx^2 / time_refinement
    residual_tol: accepted max-norm residual of each linear solve, relative to the rhs
    pole_margin: lattice cells required between a pole and the slab ends
    """

    n_rho: int = 32
    height: float = 1.0
    time_refinement: int = 1
    residual_tol: float = 1e-10
    pole_margin: int = 4

    def __post_init__(self) -> None:
        if self.n_rho < 4:
            raise ValueError(f"n_rho must be >= 4, got {self.n_rho}")
        if self.height <= 0:
            raise ValueError(f"slab height must be positive, got {self.height}")
        if self.time_refinement < 1:
            raise ValueError(f"time_refinement must be >= 1, got {self.time_refinement}")


def _dx_periodic(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    return (np.roll(values, -1, axis) - np.roll(values, 1, axis)) / (2.0 * h)


def _dxx_periodic(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    return (np.roll(values, -1, axis) - 2.0 * values + np.roll(values, 1, axis)) / (h * h)


def _dt(values: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    if values.shape[axis] < 2:
        return np.zeros_like(values)
    return np.gradient(values, h, axis=axis)


class FlatLattice:
    """Nodes (t_k, rho_i, x_j) of the flattened slab over a time window

    Arrays on the lattice have shape (n_t, n_rho + 1, n_x); row i = 0 is Sigma.
    """

    def __init__(self, psi: GraphFunction, config: SolverConfig, t_start: float, n_steps: int):
        if psi.n != 2:
            raise ValueError(f"the parabolic solver supports n = 2 only, got n = {psi.n}")
        if n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {n_steps}")
        self.psi = psi
        self.config = config
        self.h_rho = config.height / config.n_rho
        self.hx = psi.hx
        self.dt = psi.ht / config.time_refinement
        self.rho = np.arange(config.n_rho + 1) * self.h_rho
        self.x = np.arange(psi.shape[0]) * psi.hx
        self.t = t_start + np.arange(n_steps + 1) * self.dt
        tt, xx = np.meshgrid(self.t, self.x, indexing="ij")
        self.trace = psi(xx[..., None], tt)
        periodic = self.trace - psi.trend(xx[..., None])
        self.psi_x = _dx_periodic(periodic, self.hx, 1) + psi.slope[0]
        self.psi_xx = _dxx_periodic(periodic, self.hx, 1)
        self.psi_t = GraphFunction(psi.time_derivative(), psi.hx)(xx[..., None], tt)
        self.psi_xt = _dx_periodic(self.psi_t, self.hx, 1)
        self.static = bool(np.ptp(psi.values, axis=-1).max() == 0.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.t.size, self.rho.size, self.x.size)

    @property
    def n_steps(self) -> int:
        return self.t.size - 1

    @property
    def cell(self) -> float:
        """Spatial cell area h_rho * hx"""
        return self.h_rho * self.hx

    def ambient_x0(self) -> np.ndarray:
        return self.rho[None, :, None] + self.trace[:, None, :]

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ambient coordinates (x0, x, t) of every node"""
        x0 = self.ambient_x0()
        x = np.broadcast_to(self.x[None, None, :], self.shape)
        t = np.broadcast_to(self.t[:, None, None], self.shape)
        return x0, x, t

    def sigma_cells(self) -> np.ndarray:
        """Surface measure of the boundary cell of each node on Sigma, shape (n_t, n_x)"""
        return self.hx * self.dt * np.sqrt(1.0 + self.psi_x**2)

    def snap(self, point: AmbientPoint) -> tuple[int, int, int]:
        """Lattice indices (k, i, j) nearest to an ambient point"""
        k = int(round((point.t - self.t[0]) / self.dt))
        if not 0 <= k < self.t.size:
            raise ValueError(f"time {point.t} outside the lattice window [{self.t[0]}, {self.t[-1]}]")
        j = int(round(point.x[0] / self.hx)) % self.x.size
        rho = point.x0 - float(self.trace[k, j])
        i = int(round(rho / self.h_rho))
        return k, i, j


def ambient_derivatives(w: np.ndarray, lattice: FlatLattice) -> dict[str, np.ndarray]:
    """Ambient derivatives of a lattice field by the chain rule

    d_x0 = D_rho, d_x = D_x - psi_x D_rho, d_t = D_t - psi_t D_rho with
    centred differences (periodic in x, one-sided at the rho and t ends).
    """
    h_rho, hx, dt = lattice.h_rho, lattice.hx, lattice.dt
    px = lattice.psi_x[:, None, :]
    pt = lattice.psi_t[:, None, :]
    pxx = lattice.psi_xx[:, None, :]
    pxt = lattice.psi_xt[:, None, :]
    w_r = np.gradient(w, h_rho, axis=1)
    w_x = _dx_periodic(w, hx, 2)
    w_t = _dt(w, dt, 0)
    w_rr = np.gradient(w_r, h_rho, axis=1)
    w_rx = _dx_periodic(w_r, hx, 2)
    w_xx = _dxx_periodic(w, hx, 2)
    w_rt = _dt(w_r, dt, 0)
    w_xt = _dx_periodic(w_t, hx, 2)
    return {
        "u0": w_r,
        "ux": w_x - px * w_r,
        "ut": w_t - pt * w_r,
        "u00": w_rr,
        "u0x": w_rx - px * w_rr,
        "uxx": w_xx - pxx * w_r - 2.0 * px * w_rx + px**2 * w_rr,
        "u0t": w_rt - pt * w_rr,
        "uxt": w_xt - pxt * w_r - px * w_rt - pt * (w_rx - px * w_rr),
    }


def boundary_distance(
    lattice: FlatLattice,
    reach: int = 4,
    time_offsets: Sequence[int] = (0, 1, 4, 9, 16),
) -> np.ndarray:
    """Parabolic distance from every lattice node to Sigma

    Minimum of the vertical gap and the distances to graph points on an
    offset stencil of ``reach`` cells in x and squared offsets in graph time
    steps; exact for flat graphs and an upper bound otherwise.
    """
    psi = lattice.psi
    x0 = lattice.ambient_x0()
    best = np.broadcast_to(lattice.rho[None, :, None], lattice.shape).copy()
    nt, nx = lattice.t.size, lattice.x.size
    for a in range(-reach, reach + 1):
        ys = np.broadcast_to((lattice.x + a * lattice.hx)[None, :, None], (nt, nx, 1))
        for b in sorted({s * o for o in time_offsets for s in (-1, 1)}):
            if a == 0 and b == 0:
                continue
            ss = np.broadcast_to((lattice.t + b * psi.ht)[:, None], (nt, nx))
            graph = psi(ys, ss)[:, None, :]
            dist = np.sqrt((x0 - graph) ** 2 + (a * lattice.hx) ** 2) + math.sqrt(abs(b) * psi.ht)
            np.minimum(best, dist, out=best)
    return best


@dataclass
class SolutionField:
    """Lattice function on the flattened slab with solver metadata"""

    lattice: FlatLattice
    values: np.ndarray
    direction: str
    metadata: dict[str, Any] = field(default_factory=dict)

    def evaluate(self, x0: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Multilinear interpolation at ambient points; zero below Sigma"""
        lat = self.lattice
        x0, x, t = np.broadcast_arrays(np.asarray(x0, float), np.asarray(x, float), np.asarray(t, float))
        rho = x0 - lat.psi(x[..., None], t)
        padded = np.concatenate([self.values, self.values[..., :1]], axis=-1)
        coords = np.stack([
            ((t - lat.t[0]) / lat.dt).ravel(),
            (rho / lat.h_rho).ravel(),
            np.mod(x / lat.hx, lat.x.size).ravel(),
        ])
        out = ndimage.map_coordinates(padded, coords, order=1, mode="nearest").reshape(rho.shape)
        return np.where(rho >= 0, out, 0.0)

    def at(self, point: AmbientPoint) -> float:
        return float(self.evaluate(np.array(point.x0), np.array(point.x[0]), np.array(point.t)))

    def derivatives(self) -> dict[str, np.ndarray]:
        return ambient_derivatives(self.values, self.lattice)


@dataclass
class GreenFunction(SolutionField):
    """Green function with pole; ``forward`` lives after the pole, ``adjoint`` before"""

    pole: AmbientPoint | None = None
    pole_index: tuple[int, int, int] = (0, 0, 0)


@dataclass
class BoundaryMeasure:
    """Masses of the parabolic measure on the boundary cells of the lattice

    ``mass[k, j]`` is the mass of the boundary cell at (x_j, t_k); ``initial``
    holds the mass carried by the initial slice of the truncated problem.
    """

    pole: AmbientPoint | None
    x: np.ndarray
    t: np.ndarray
    mass: np.ndarray
    sigma: np.ndarray
    initial: np.ndarray

    @classmethod
    def from_density(cls, x: np.ndarray, t: np.ndarray, density: np.ndarray, sigma: np.ndarray) -> BoundaryMeasure:
        """Synthetic measure k dsigma"""
        return cls(None, np.asarray(x), np.asarray(t), density * sigma, sigma, np.zeros(len(x)))

    @property
    def density(self) -> np.ndarray:
        return self.mass / self.sigma

    def total(self) -> float:
        return float(self.mass.sum() + self.initial.sum())

    def _mask(self, cube: DyadicCube) -> np.ndarray:
        tt, xx = np.meshgrid(self.t, self.x, indexing="ij")
        return cube.contains_points(xx[..., None], tt)

    def measure(self, cube: DyadicCube) -> float:
        return float(self.mass[self._mask(cube)].sum())

    def sigma_of(self, cube: DyadicCube) -> float:
        return float(self.sigma[self._mask(cube)].sum())

    def measure_box(self, x_c: float, t_c: float, r: float) -> float:
        """omega of Delta_r(x_c, t_c) = Psi(Q_r(x_c, t_c))"""
        tt, xx = np.meshgrid(self.t, self.x, indexing="ij")
        inside = (np.abs(xx - x_c) < r) & (np.abs(tt - t_c) < r * r)
        return float(self.mass[inside].sum())

    def evaluate(self, cubes: Sequence[DyadicCube]) -> dict[str, float]:
        return {cube.key: self.measure(cube) for cube in cubes}


class ParabolicSolver:
    """Backward Euler on the flattened slab for a fixed coefficient field and direction"""

    def __init__(self, lattice: FlatLattice, A: CoefficientField, direction: str = "forward"):
        if direction not in ("forward", "adjoint"):
            raise ValueError(f"direction must be forward or adjoint, got {direction!r}")
        if A.dim != 2:
            raise ValueError(f"coefficient dimension {A.dim} does not match n = 2")
        self.lattice = lattice
        self.A = A
        self.direction = direction
        self.static = lattice.static and A.time_independent
        self._cache: dict[int, tuple[sparse.csc_matrix, sparse.csr_matrix, Any]] = {}
        self.n_factorizations = 0
        self.diffusion_added = 0
        self.max_residual = 0.0

    @property
    def n_unknowns(self) -> int:
        return (self.lattice.rho.size - 1) * self.lattice.x.size

    def _generator(self, k: int) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
        lat = self.lattice
        n_rho, n_x = lat.rho.size - 1, lat.x.size
        x0 = lat.rho[:, None] + lat.trace[k][None, :]
        coeff = self.A.sample(x0, lat.x[None, :, None], np.full(x0.shape, lat.t[k]))
        if self.direction == "adjoint":
            coeff = np.swapaxes(coeff, -1, -2)
        a00, a01, a10, a11 = coeff[..., 0, 0], coeff[..., 0, 1], coeff[..., 1, 0], coeff[..., 1, 1]
        px = lat.psi_x[k][None, :]
        tilde00 = a00 - px * (a01 + a10) + px**2 * a11
        tilde01 = a01 - px * a11
        tilde10 = a10 - px * a11
        tilde11 = a11
        sign = 1.0 if self.direction == "forward" else -1.0
        drift_x = np.gradient(tilde01, lat.h_rho, axis=0)[1:]
        drift_rho = _dx_periodic(tilde10, lat.hx, 1)[1:] + sign * lat.psi_t[k][None, :]

        ghost = np.concatenate([tilde00, tilde00[-2:-1]], axis=0)
        up = 0.5 * (ghost[1:-1] + ghost[2:])
        down = 0.5 * (ghost[1:-1] + ghost[:-2])
        inner11 = tilde11[1:]
        right = 0.5 * (inner11 + np.roll(inner11, -1, 1))
        left = 0.5 * (inner11 + np.roll(inner11, 1, 1))
        kappa = 0.5 * (tilde01 + tilde10)[1:] / (lat.h_rho * lat.hx)
        mag = np.abs(kappa)

        extra_rho = np.maximum(0.0, mag - np.minimum(up, down) / lat.h_rho**2)
        extra_x = np.maximum(0.0, mag - np.minimum(right, left) / lat.hx**2)
        added = int(np.count_nonzero(extra_rho) + np.count_nonzero(extra_x))
        if added:
            logger.debug("artificial diffusion at %d stencil entries, step %d", added, k)
            self.diffusion_added += added

        coef = {
            (1, 0): up / lat.h_rho**2 - mag + extra_rho + np.maximum(drift_rho, 0.0) / lat.h_rho,
            (-1, 0): down / lat.h_rho**2 - mag + extra_rho + np.maximum(-drift_rho, 0.0) / lat.h_rho,
            (0, 1): right / lat.hx**2 - mag + extra_x + np.maximum(drift_x, 0.0) / lat.hx,
            (0, -1): left / lat.hx**2 - mag + extra_x + np.maximum(-drift_x, 0.0) / lat.hx,
            (1, 1): np.maximum(kappa, 0.0),
            (-1, -1): np.maximum(kappa, 0.0),
            (1, -1): np.maximum(-kappa, 0.0),
            (-1, 1): np.maximum(-kappa, 0.0),
        }
        ii, jj = np.meshgrid(np.arange(1, n_rho + 1), np.arange(n_x), indexing="ij")
        rows = ((ii - 1) * n_x + jj).ravel()
        l_rows, l_cols, l_vals = [], [], []
        b_rows, b_cols, b_vals = [], [], []
        diag = np.zeros(rows.size)
        for (di, dj), value in coef.items():
            value = value.ravel()
            ti = (ii + di).ravel()
            ti = np.where(ti == n_rho + 1, n_rho - 1, ti)
            tj = ((jj + dj) % n_x).ravel()
            on_sigma = ti == 0
            b_rows.append(rows[on_sigma])
            b_cols.append(tj[on_sigma])
            b_vals.append(value[on_sigma])
            l_rows.append(rows[~on_sigma])
            l_cols.append(((ti - 1) * n_x + tj)[~on_sigma])
            l_vals.append(value[~on_sigma])
            diag -= value
        l_rows.append(rows)
        l_cols.append(rows)
        l_vals.append(diag)
        size = rows.size
        gen = sparse.csr_matrix(
            (np.concatenate(l_vals), (np.concatenate(l_rows), np.concatenate(l_cols))), shape=(size, size)
        )
        bnd = sparse.csr_matrix(
            (np.concatenate(b_vals), (np.concatenate(b_rows), np.concatenate(b_cols))), shape=(size, n_x)
        )
        return gen, bnd

    def operator(self, k: int) -> tuple[sparse.csc_matrix, sparse.csr_matrix, Any]:
        """(M_k, dt * B_k, LU of M_k) for the step ending at level k"""
        key = 0 if self.static else k
        if key not in self._cache:
            if not self.static:
                self._cache.clear()
            gen, bnd = self._generator(k)
            dt = self.lattice.dt
            matrix = (sparse.identity(gen.shape[0], format="csc") - dt * gen).tocsc()
            self._cache[key] = (matrix, dt * bnd, sparse_linalg.splu(matrix))
            self.n_factorizations += 1
        return self._cache[key]

    def _checked_solve(self, k: int, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        matrix, _, lu = self.operator(k)
        sol = lu.solve(rhs, trans="T" if transpose else "N")
        applied = matrix.T @ sol if transpose else matrix @ sol
        residual = float(np.max(np.abs(applied - rhs))) if rhs.size else 0.0
        scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
        self.max_residual = max(self.max_residual, residual / scale)
        if residual > self.lattice.config.residual_tol * scale:
            raise RuntimeError(f"linear solve did not converge at step {k}: residual {residual:.3e}")
        return sol

    def boundary_coupling(self, k: int) -> sparse.csr_matrix:
        return self.operator(k)[1]

    def solve(self, data: np.ndarray, initial: np.ndarray | None = None) -> np.ndarray:
        """March the lattice with Dirichlet data ``data`` of shape (n_t, n_x)

        Forward problems start from ``initial`` (default: the constant extension
        of the data at the first time) and march up in time; adjoint problems
        start from the last time and march down.
        """
        lat = self.lattice
        nt, n_rho1, n_x = lat.shape
        out = np.zeros(lat.shape)
        out[:, 0, :] = data
        order = range(1, nt) if self.direction == "forward" else range(nt - 2, -1, -1)
        first = 0 if self.direction == "forward" else nt - 1
        out[first, 1:, :] = np.broadcast_to(data[first], (n_rho1 - 1, n_x)) if initial is None else initial[1:]
        for k in order:
            prev = k - 1 if self.direction == "forward" else k + 1
            rhs = out[prev, 1:, :].ravel() + self.boundary_coupling(k) @ data[k]
            out[k, 1:, :] = self._checked_solve(k, rhs).reshape(n_rho1 - 1, n_x)
            logger.debug("step %d solved", k)
        return out

    def adjoint_sweep(self, index: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact discrete representing weights of the node ``index`` for the forward scheme

        Returns (weights of interior nodes per level, boundary masses per level,
        initial-slice masses).  Level k of the weights is the discrete adjoint
        Green function times the cell area.
        """
        lat = self.lattice
        nt, n_rho1, n_x = lat.shape
        k_pole, i_pole, j_pole = index
        weights = np.zeros(lat.shape)
        mass = np.zeros((nt, n_x))
        current = np.zeros((n_rho1 - 1) * n_x)
        current[(i_pole - 1) * n_x + j_pole] = 1.0
        weights[k_pole, 1:, :] = current.reshape(n_rho1 - 1, n_x)
        for k in range(k_pole, 0, -1):
            current = self._checked_solve(k, current, transpose=True)
            weights[k - 1, 1:, :] = current.reshape(n_rho1 - 1, n_x)
            mass[k] = self.boundary_coupling(k).T @ current
        initial = weights[0, 1:, :].sum(axis=0)
        return weights, mass, initial

    def summary(self) -> dict[str, Any]:
        return {
            "direction": self.direction,
            "static": self.static,
            "factorizations": self.n_factorizations,
            "artificial_diffusion_entries": self.diffusion_added,
            "max_relative_residual": self.max_residual,
        }


def _as_data(g: Any, lattice: FlatLattice) -> np.ndarray:
    if callable(g):
        tt, xx = np.meshgrid(lattice.t, lattice.x, indexing="ij")
        return np.broadcast_to(np.asarray(g(xx, tt), dtype=float), (lattice.t.size, lattice.x.size)).copy()
    data = np.asarray(g, dtype=float)
    return np.broadcast_to(data, (lattice.t.size, lattice.x.size)).copy()


def solve_parabolic(
    domain: GraphDomain,
    A: CoefficientField,
    g: Any,
    direction: str = "forward",
    config: SolverConfig | None = None,
    t_start: float = 0.0,
    n_steps: int = 32,
) -> SolutionField:
    """Solve the Dirichlet problem with lateral data g on Sigma over a time window

    ``g`` is a callable g(x, t), a scalar, or an array of shape (n_t, n_x).
    Forward problems start from the constant extension of g at the first
    time; adjoint problems run backward from the last time.
    """
    config = SolverConfig() if config is None else config
    lattice = FlatLattice(domain.psi, config, t_start, n_steps)
    solver = ParabolicSolver(lattice, A, direction)
    data = _as_data(g, lattice)
    values = solver.solve(data)
    summary = solver.summary()
    logger.info("solved %s problem on %s lattice: %s", direction, lattice.shape, summary)
    return SolutionField(lattice, values, direction, summary)


def _check_pole(lattice: FlatLattice, index: tuple[int, int, int]) -> None:
    margin = lattice.config.pole_margin
    _, i, _ = index
    if i < margin or i > lattice.config.n_rho - margin:
        raise ValueError(
            f"pole at rho index {i} is within {margin} cells of Sigma or the slab top ({lattice.config.n_rho})"
        )


def green_function(
    domain: GraphDomain,
    A: CoefficientField,
    pole: AmbientPoint,
    direction: str = "forward",
    config: SolverConfig | None = None,
    n_steps: int = 64,
) -> GreenFunction:
    """Green function with pole Y

    ``forward`` solves the equation in the free variable from a discrete
    delta at Y and is supported at times after t(Y); ``adjoint`` is the exact
    discrete adjoint of the forward scheme and is supported before t(Y).
    The delta is the bare lattice cell of mass one.  The metadata records the
    sign and slice-mass checks; the Riesz identity is checked by
    ``riesz_check``.
    """
    config = SolverConfig() if config is None else config
    dt = domain.psi.ht / config.time_refinement
    t_start = pole.t if direction == "forward" else pole.t - n_steps * dt
    lattice = FlatLattice(domain.psi, config, t_start, n_steps)
    index = lattice.snap(pole)
    _check_pole(lattice, index)
    if direction == "forward":
        solver = ParabolicSolver(lattice, A, "forward")
        initial = np.zeros(lattice.shape[1:])
        initial[index[1], index[2]] = 1.0 / lattice.cell
        values = solver.solve(np.zeros((lattice.t.size, lattice.x.size)), initial)
    elif direction == "adjoint":
        solver = ParabolicSolver(lattice, A, "forward")
        weights, _, _ = solver.adjoint_sweep(index)
        values = weights / lattice.cell
    else:
        raise ValueError(f"direction must be forward or adjoint, got {direction!r}")
    meta = solver.summary()
    meta["normalization"] = {"delta_mass": 1.0, "cell": lattice.cell}
    low = float(values.min())
    slice_mass = values.sum(axis=(1, 2)) * lattice.cell
    meta["checks"] = {
        "min_value": low,
        "nonnegative": bool(low >= -1e-12 * max(float(values.max()), 1.0)),
        "max_slice_mass": float(slice_mass.max()),
    }
    if not meta["checks"]["nonnegative"]:
        logger.warning("Green function (%s) with pole %s dips to %.3g", direction, index, low)
    logger.info("Green function (%s) with pole %s: %s", direction, index, meta)
    return GreenFunction(lattice, values, direction, meta, pole, index)


def parabolic_measure(
    domain: GraphDomain,
    A: CoefficientField,
    pole: AmbientPoint,
    config: SolverConfig | None = None,
    n_steps: int = 64,
    with_green: bool = False,
) -> BoundaryMeasure | tuple[BoundaryMeasure, GreenFunction]:
    """Parabolic measure omega^Y of the boundary cells, by an adjoint sweep from Y

    The masses are the exact representing weights of the discrete scheme, so
    they are nonnegative, additive and sum to one with the initial slice.
    """
    config = SolverConfig() if config is None else config
    dt = domain.psi.ht / config.time_refinement
    lattice = FlatLattice(domain.psi, config, pole.t - n_steps * dt, n_steps)
    index = lattice.snap(pole)
    _check_pole(lattice, index)
    solver = ParabolicSolver(lattice, A, "forward")
    weights, mass, initial = solver.adjoint_sweep(index)
    measure = BoundaryMeasure(pole, lattice.x, lattice.t, mass, lattice.sigma_cells(), initial)
    logger.info("parabolic measure with pole %s: total %.12f", index, measure.total())
    if not with_green:
        return measure
    meta = solver.summary()
    meta["normalization"] = {"delta_mass": 1.0, "cell": lattice.cell}
    green = GreenFunction(lattice, weights / lattice.cell, "adjoint", meta, pole, index)
    return measure, green


def riesz_check(
    green: GreenFunction,
    measure: BoundaryMeasure,
    A: CoefficientField,
    phi: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    dphi: Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> tuple[float, float]:
    """Both sides of int phi domega = -iint (A^T grad G + ...) for phi vanishing at the pole

    Returns (int phi domega, -iint (A^T grad G . grad phi + G d_t phi)).
    ``dphi`` returns (d_x0 phi, d_x phi, d_t phi).
    """
    lat = green.lattice
    x0, x, t = lat.mesh()
    derivs = green.derivatives()
    p0, px, pt = dphi(x0, x, t)
    coeff = A.sample(x0, x[..., None], t)
    # A^T grad G . grad phi = grad G . A grad phi
    flux0 = coeff[..., 0, 0] * p0 + coeff[..., 0, 1] * px
    flux1 = coeff[..., 1, 0] * p0 + coeff[..., 1, 1] * px
    integrand = derivs["u0"] * flux0 + derivs["ux"] * flux1 + green.values * pt
    weights = np.ones(lat.t.size)
    weights[[0, -1]] = 0.5
    rhs = -float(np.sum(integrand[:, 1:, :] * weights[:, None, None])) * lat.cell * lat.dt
    tt, xx = np.meshgrid(measure.t, measure.x, indexing="ij")
    boundary = phi(lat.trace, xx, tt)
    lhs = float(np.sum(boundary * measure.mass))
    return lhs, rhs


def _x_series(dx: np.ndarray, tau: np.ndarray, period: float, n_terms: int) -> np.ndarray:
    out = np.full(np.broadcast_shapes(dx.shape, tau.shape), 1.0 / period)
    for m in range(1, n_terms + 1):
        w = 2.0 * np.pi * m / period
        out = out + 2.0 / period * np.exp(-w * w * tau) * np.cos(w * dx)
    return out


def _terms(tau: np.ndarray, length: float) -> int:
    tmin = float(np.min(tau[tau > 0])) if np.any(tau > 0) else 1.0
    return int(length / math.pi * math.sqrt(80.0 / tmin)) + 5


def heat_green_oracle(
    x0: np.ndarray, x: np.ndarray, t: np.ndarray, pole: AmbientPoint, height: float, period: float
) -> np.ndarray:
    """Heat Green function of the slab: Dirichlet at x0 = 0, reflecting at x0 = height, periodic in x

    G(X, Y) for t > s; zero for t <= s.
    """
    tau = np.asarray(t, dtype=float) - pole.t
    positive = tau > 0
    tau_p = np.where(positive, tau, 1.0)
    series = np.zeros(np.broadcast_shapes(np.shape(x0), tau.shape))
    for k in range(_terms(tau_p, height)):
        mu = (k + 0.5) * math.pi / height
        series = series + 2.0 / height * np.sin(mu * x0) * math.sin(mu * pole.x0) * np.exp(-mu * mu * tau_p)
    dx = np.asarray(x, dtype=float) - pole.x[0]
    out = series * _x_series(dx, tau_p, period, _terms(tau_p, period))
    return np.where(positive, out, 0.0)


def heat_poisson_oracle(x: np.ndarray, s: np.ndarray, pole: AmbientPoint, height: float, period: float) -> np.ndarray:
    """Caloric measure density at boundary points (x, s), s < t(Y), for the slab"""
    tau = pole.t - np.asarray(s, dtype=float)
    positive = tau > 0
    tau_p = np.where(positive, tau, 1.0)
    series = np.zeros_like(tau_p)
    for k in range(_terms(tau_p, height)):
        mu = (k + 0.5) * math.pi / height
        series = series + 2.0 / height * mu * math.sin(mu * pole.x0) * np.exp(-mu * mu * tau_p)
    dx = np.asarray(x, dtype=float) - pole.x[0]
    out = series * _x_series(dx, tau_p, period, _terms(tau_p, period))
    return np.where(positive, out, 0.0)


@dataclass
class CoefficientReport:
    """Ellipticity margin, weighted derivative sups and Carleson norms of A"""

    margin: float
    lam: float
    symmetric: bool
    grad_bound: float
    hess_bound: float
    dt_bound: float
    mu_carleson: float
    l2_carleson: float
    radii: list[float] = field(default_factory=list)


def carleson_box_sup(density: np.ndarray, lattice: FlatLattice, radii: Sequence[float], n: int = 2) -> float:
    """sup over boundary centres and radii of R^(-n-1) * mass of the box above Q_R"""
    best = 0.0
    vol = lattice.cell * lattice.dt
    for r in radii:
        top = min(int(round(r / lattice.h_rho)), lattice.rho.size - 1)
        column = density[:, 1:top + 1, :].sum(axis=1)
        half_x = max(0, int(round(r / lattice.hx)))
        half_t = max(0, int(round(r * r / lattice.dt)))
        summed = ndimage.uniform_filter1d(column, 2 * half_x + 1, axis=1, mode="wrap") * (2 * half_x + 1)
        summed = ndimage.uniform_filter1d(summed, 2 * half_t + 1, axis=0, mode="constant") * (2 * half_t + 1)
        best = max(best, float(summed.max()) * vol / r ** (n + 1))
    return best


def check_coefficients(
    domain: GraphDomain,
    A: CoefficientField,
    config: SolverConfig | None = None,
    t_start: float = 0.0,
    n_steps: int = 16,
    radii: Sequence[float] | None = None,
) -> CoefficientReport:
    """Ellipticity, weighted derivative bounds and the Carleson conditions of A

    The mu-Carleson norm uses dmu = (|grad A| + |d_t A| dist) dX dt and the
    L2 version uses (|grad A|^2 dist + |d_t A|^2 dist^3) dX dt.
    """
    config = SolverConfig() if config is None else config
    lattice = FlatLattice(domain.psi, config, t_start, n_steps)
    x0, x, t = lattice.mesh()
    coeff = A.sample(x0, x[..., None], t)
    sym = 0.5 * (coeff + np.swapaxes(coeff, -1, -2))
    low = np.linalg.eigvalsh(sym)[..., 0]
    high = np.linalg.norm(coeff, 2, axis=(-2, -1))
    slack = np.minimum(low - 1.0 / A.lam, A.lam - high)
    worst = np.unravel_index(int(np.argmin(slack)), slack.shape)
    margin = float(slack[worst])
    if margin < -1e-12:
        witness = (float(x0[worst]), float(x[worst]), float(t[worst]))
        raise ValueError(f"ellipticity violated at (x0, x, t) = {witness}: margin {margin:.3g}")
    dist = boundary_distance(lattice)
    grad2 = np.zeros(lattice.shape)
    hess2 = np.zeros(lattice.shape)
    dt2 = np.zeros(lattice.shape)
    for i in range(A.dim):
        for j in range(A.dim):
            d = ambient_derivatives(coeff[..., i, j], lattice)
            grad2 += d["u0"] ** 2 + d["ux"] ** 2
            hess2 += d["u00"] ** 2 + 2.0 * d["u0x"] ** 2 + d["uxx"] ** 2
            dt2 += d["ut"] ** 2
    grad, hess, dtn = np.sqrt(grad2), np.sqrt(hess2), np.sqrt(dt2)
    inner = np.zeros(lattice.shape, dtype=bool)
    inner[:, 1:-1, :] = True
    if lattice.t.size > 2:
        inner[[0, -1]] = False
    if radii is None:
        radii = [config.height * 2.0 ** (-k) for k in range(1, 8) if config.height * 2.0 ** (-k) >= 2 * lattice.h_rho]
    mu = carleson_box_sup(grad + dtn * dist, lattice, radii)
    l2 = carleson_box_sup(grad2 * dist + dt2 * dist**3, lattice, radii)
    report = CoefficientReport(
        margin=margin,
        lam=A.lam,
        symmetric=A.symmetric,
        grad_bound=float((dist * grad)[inner].max()) if inner.any() else 0.0,
        hess_bound=float((dist**2 * hess)[inner].max()) if inner.any() else 0.0,
        dt_bound=float((dist**2 * dtn)[inner].max()) if inner.any() else 0.0,
        mu_carleson=mu,
        l2_carleson=l2,
        radii=list(radii),
    )
    logger.info("coefficient check for %s: margin %.3g, mu %.4g, L2 %.4g", A.name, margin, mu, l2)
    return report


@dataclass
class ReverseHolderReport:
    c_star: float
    q: float
    per_cube: dict[str, float]
    doubling: tuple[float, float]
    pole_in_parabola: dict[str, bool]


def reverse_holder(
    measure: BoundaryMeasure,
    q: float,
    cubes: Sequence[DyadicCube],
    constants: StructuralConstants | None = None,
    psi: GraphFunction | None = None,
) -> ReverseHolderReport:
    """C* = sup over cubes of (avg k^q)^(1/q) / avg k with averages against sigma

    When the measure has a pole, every cube is checked for the pole lying in
    the forward parabola P+_{kappa, 2r} above its centre.
    """
    if not cubes:
        raise ValueError("reverse Hoelder estimate needs a nonempty cube family")
    if q <= 1:
        raise ValueError(f"q must exceed 1, got {q}")
    density = measure.density
    per_cube: dict[str, float] = {}
    pole_ok: dict[str, bool] = {}
    doubling: list[float] = []
    for cube in cubes:
        mask = measure._mask(cube)
        sig = measure.sigma[mask]
        if sig.size == 0 or sig.sum() <= 0:
            continue
        avg = float(np.sum(measure.mass[mask]) / sig.sum())
        if avg <= 0:
            per_cube[cube.key] = math.inf
            continue
        avg_q = float(np.sum(density[mask] ** q * sig) / sig.sum())
        per_cube[cube.key] = avg_q ** (1.0 / q) / avg
        center = cube.center()
        half = measure.measure_box(center.x[0], center.t, 0.25 * cube.side)
        if half > 0:
            doubling.append(measure.measure_box(center.x[0], center.t, 0.5 * cube.side) / half)
        if measure.pole is not None and constants is not None and psi is not None:
            base = float(psi(np.array([center.x]), np.array([center.t]))[0])
            ok = in_parabola(measure.pole, AmbientPoint(base, center), 0.5 * cube.side, +1, constants.kappa)
            pole_ok[cube.key] = ok
            if not ok:
                logger.warning("pole outside the forward parabola of cube %s", cube.key)
    if not per_cube:
        raise ValueError("no cube of the family meets the measure support")
    band = (min(doubling), max(doubling)) if doubling else (math.nan, math.nan)
    return ReverseHolderReport(max(per_cube.values()), q, per_cube, band, pole_ok)


@dataclass
class BoundaryEstimates:
    """Min/max bands of the boundary-estimate ratios over the samples"""

    holder_exponent: tuple[float, float]
    carleson: tuple[float, float]
    backward_harnack: tuple[float, float]
    cfms: tuple[float, float]
    doubling: tuple[float, float]
    bourgain: tuple[float, float]
    rows: list[dict[str, float]] = field(default_factory=list)


def _band(values: Sequence[float]) -> tuple[float, float]:
    finite = [v for v in values if np.isfinite(v)]
    return (min(finite), max(finite)) if finite else (math.nan, math.nan)


def boundary_estimates_report(
    domain: GraphDomain,
    A: CoefficientField,
    samples: Sequence[tuple[float, float]],
    radii: Sequence[float],
    constants: StructuralConstants | None = None,
    config: SolverConfig | None = None,
    pole_height: float | None = None,
    pole_lag: float | None = None,
) -> BoundaryEstimates:
    """Hoelder, Carleson, backward Harnack, CFMS, doubling and Bourgain ratios

    For each boundary sample (x, t) one adjoint sweep from a pole Y high above
    and well after the sample gives G(Y, .) and omega^Y; each radius R adds one
    short sweep from the corkscrew A+_R for the Bourgain bound.
    """
    config = SolverConfig() if config is None else config
    constants = StructuralConstants.for_graph(domain.lip.combined) if constants is None else constants
    psi = domain.psi
    dt = psi.ht / config.time_refinement
    r_max = max(radii)
    height = 0.5 * config.height if pole_height is None else pole_height
    lag = 4.0 * r_max**2 + 0.25 * height**2 if pole_lag is None else pole_lag
    n = 2
    rows: list[dict[str, float]] = []
    for x_c, t_c in samples:
        base = float(psi(np.array([[x_c]]), np.array([t_c]))[0])
        X = AmbientPoint.make(base, x_c, t_c)
        pole = AmbientPoint.make(base + height, x_c, t_c + lag)
        n_steps = int(math.ceil((lag + 4.0 * r_max**2) / dt)) + 2
        measure, green = parabolic_measure(domain, A, pole, config, n_steps, with_green=True)
        lat = green.lattice
        for r in radii:
            a_plus = corkscrew(X, r, +1, constants)
            a_minus = corkscrew(X, r, -1, constants)
            u_plus = green.at(a_plus)
            u_minus = green.at(a_minus)
            row: dict[str, float] = {"x": x_c, "t": t_c, "R": r}
            # vertical profile at the sample for the Hoelder fit
            heights = lat.rho[1:][lat.rho[1:] <= r]
            if heights.size >= 2:
                profile = green.evaluate(base + heights, np.full(heights.shape, x_c), np.full(heights.shape, t_c))
                keep = profile > 0
                if keep.sum() >= 2:
                    row["holder"] = float(np.polyfit(np.log(heights[keep]), np.log(profile[keep]), 1)[0])
            x0, xx, tt = lat.mesh()
            box = (np.abs(xx - x_c) < r) & (np.abs(tt - t_c) < r * r) & (x0 - base < r) & (x0 > lat.trace[:, None, :])
            sup_box = float(green.values[box].max()) if box.any() else 0.0
            if u_plus > 0:
                row["carleson"] = max(sup_box, u_plus) / u_plus
                row["backward_harnack"] = u_minus / u_plus
            omega_r = measure.measure_box(x_c, t_c, r)
            if omega_r > 0:
                row["cfms"] = r**n * u_plus / omega_r
                row["doubling"] = measure.measure_box(x_c, t_c, 2.0 * r) / omega_r
            short = int(math.ceil(2.0 * (2.0 * r) ** 2 / dt)) + 2
            near = parabolic_measure(domain, A, a_plus, config, short)
            row["bourgain"] = near.measure_box(x_c, t_c, r)
            rows.append(row)
    report = BoundaryEstimates(
        holder_exponent=_band([r.get("holder", math.nan) for r in rows]),
        carleson=_band([r.get("carleson", math.nan) for r in rows]),
        backward_harnack=_band([r.get("backward_harnack", math.nan) for r in rows]),
        cfms=_band([r.get("cfms", math.nan) for r in rows]),
        doubling=_band([r.get("doubling", math.nan) for r in rows]),
        bourgain=_band([r.get("bourgain", math.nan) for r in rows]),
        rows=rows,
    )
    logger.info("boundary estimates: cfms band %s, bourgain band %s", report.cfms, report.bourgain)
    return report


@dataclass
class NormalizedGreen:
    """u = sigma(Q) G(X+_Q, .) and v = sigma(Q) G(., X-_Q) for a corona top cube"""

    cube: DyadicCube
    u: GreenFunction
    v: GreenFunction
    sigma_q: float
    report: dict[str, float]


def normalized_green(
    domain: GraphDomain,
    A: CoefficientField,
    cube: DyadicCube,
    constants: StructuralConstants,
    config: SolverConfig | None = None,
    margin: float = 1.0,
) -> NormalizedGreen:
    """Normalized Green functions of a top cube with comparability and derivative constants

    The lattices reach ``margin * l(Q)^2`` beyond the cube in time.  M1 is
    measured on the elevated set above 2Q at height 2 M0 l(Q); M2 on lattice
    nodes over Q below height l(Q), for both u and v.
    """
    config = SolverConfig() if config is None else config
    psi = domain.psi
    x_plus = top_corkscrew(cube, psi, +1, constants)
    x_minus = top_corkscrew(cube, psi, -1, constants)
    lo, hi = cube.bounds()
    dt = psi.ht / config.time_refinement
    ell = cube.side
    steps_u = int(math.ceil((x_plus.t - (lo[-1] - margin * ell**2)) / dt))
    steps_v = int(math.ceil((hi[-1] + margin * ell**2 - x_minus.t) / dt))
    u_green = green_function(domain, A, x_plus, "adjoint", config, steps_u)
    v_green = green_function(domain, A, x_minus, "forward", config, steps_v)
    sigma_q = surface_measure(psi, dyadic_mask(psi, cube))
    u_green.values = u_green.values * sigma_q
    v_green.values = v_green.values * sigma_q

    report: dict[str, float] = {"sigma_q": sigma_q}
    center = cube.center()
    # elevated set above 2Q
    glo, ghi = cube.dilate(2.0)
    xs = np.linspace(glo[0], ghi[0], 9)
    ts = np.linspace(glo[1], ghi[1], 9)
    xx, tt = np.meshgrid(xs, ts, indexing="ij")
    base = float(psi(np.array([center.x]), np.array([center.t]))[0])
    elev = base + 2.0 * constants.m0 * ell
    dist = elev - psi(xx[..., None], tt)
    ratios = u_green.evaluate(np.full(xx.shape, elev), xx, tt) / dist
    ratios = ratios[ratios > 0]
    report["M1"] = float(max(ratios.max(), 1.0 / ratios.min())) if ratios.size else math.inf

    for name, green in (("u", u_green), ("v", v_green)):
        lat = green.lattice
        dist_l = boundary_distance(lat)
        x0, xx3, tt3 = lat.mesh()
        region = cube.contains_points(xx3[..., None], tt3) & (lat.rho[None, :, None] >= 2 * lat.h_rho)
        region &= lat.rho[None, :, None] <= ell
        gap = np.abs(np.arange(lat.t.size) - green.pole_index[0])[:, None, None] * lat.dt
        region &= gap >= (config.pole_margin * lat.h_rho) ** 2
        vals = green.values[region] / dist_l[region]
        vals = vals[vals > 0]
        report[f"M2_{name}"] = float(max(vals.max(), 1.0 / vals.min())) if vals.size else math.inf
        d = green.derivatives()
        grad = np.sqrt(d["u0"] ** 2 + d["ux"] ** 2)
        hess = np.sqrt(d["u00"] ** 2 + 2.0 * d["u0x"] ** 2 + d["uxx"] ** 2)
        grad_t = np.sqrt(d["u0t"] ** 2 + d["uxt"] ** 2)
        if region.any():
            report[f"grad_{name}"] = float(grad[region].max())
            report[f"hess_{name}"] = float((hess * dist_l)[region].max())
            report[f"dt_{name}"] = float((np.abs(d["ut"]) * dist_l)[region].max())
            report[f"dtgrad_{name}"] = float((grad_t * dist_l**2)[region].max())
    report["M2"] = max(report.get("M2_u", math.nan), report.get("M2_v", math.nan))
    logger.info("normalized Green for %s: M1 %.4g, M2 %.4g", cube.key, report["M1"], report["M2"])
    return NormalizedGreen(cube, u_green, v_green, sigma_q, report)


def sample_point(psi: GraphFunction, x: float, t: float, height: float) -> AmbientPoint:
    """The ambient point at vertical gap ``height`` above (x, t)"""
    base = float(psi(np.array([[x]]), np.array([t]))[0])
    return AmbientPoint(base + height, SpaceTimePoint((x,), t))
