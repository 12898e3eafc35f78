"""Discretized two-component Gaussian space carrying the pair (w1, w2).

The Hilbert space L2([0, T], R^2) is replaced by R^{2n} through the
orthonormal basis of cell indicators scaled by ``1/sqrt(dt)``. Coordinate
``i < n`` of a vector refers to cell ``i`` of the first component and
coordinate ``n + i`` to cell ``i`` of the second, so the Gaussian element
``xi`` has coordinates ``(w1 increments, w2 increments) / sqrt(dt)`` and
covariance ``S = [[I, V], [V^T, I]]``. The whitened coordinates are
``xi_prime = S^{-1/2} xi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal

import numpy as np

from . import rng

PSD_FLOOR = 1e-14
CHECK_TOL = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * dt`` on ``[0, T]`` with ``n`` cells.

    The stored horizon is ``dt * n`` so the identity ``dt * n == T`` is exact
    in floating point.
    """

    n: int
    T: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"grid needs n >= 2 cells, got n={self.n}")
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got T={self.T}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "T", (self.T / self.n) * self.n)

    @property
    def dt(self) -> float:
        return self.T / self.n

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.dt

    def indicator(self, t: float) -> np.ndarray:
        """Coefficients of ``1_[0, t]`` in the cell basis (length n)."""
        k = int(round(t / self.dt))
        if not np.isclose(k * self.dt, t):
            raise ValueError(f"t={t} is not a grid point")
        out = np.zeros(self.n)
        out[:k] = np.sqrt(self.dt)
        return out

    def index(self, t: float) -> int:
        k = int(round(t / self.dt))
        if k < 0 or k > self.n or not np.isclose(k * self.dt, t):
            raise ValueError(f"t={t} is not a grid point")
        return k


@dataclass(frozen=True)
class CrossCovarianceSpec:
    """Correlation between ``w1`` and ``w2``.

    ``kind="zero"`` makes the components independent, ``kind="scalar"`` gives
    ``V = rho * I`` and ``kind="volterra"`` takes a lower-triangular table
    ``kernel[i, j] = k(t_i, t_j)`` discretized as ``V_ij = k(t_i, t_j) dt``.
    """

    kind: Literal["zero", "scalar", "volterra"] = "zero"
    rho: float = 0.0
    kernel: np.ndarray | None = field(default=None, compare=False)

    @classmethod
    def zero(cls) -> "CrossCovarianceSpec":
        return cls("zero")

    @classmethod
    def scalar(cls, rho: float) -> "CrossCovarianceSpec":
        return cls("scalar", rho=float(rho))

    @classmethod
    def volterra(cls, kernel) -> "CrossCovarianceSpec":
        return cls("volterra", kernel=np.asarray(kernel, dtype=float))

    @classmethod
    def volterra_from_function(cls, fn: Callable[[float, float], float], grid: TimeGrid,
                               strict: bool = True) -> "CrossCovarianceSpec":
        """Tabulate ``fn(t, s)`` on the grid, keeping ``s < t`` (or ``s <= t``)."""
        t = grid.times[:-1]
        table = np.vectorize(fn)(t[:, None], t[None, :]).astype(float)
        mask = np.tril(np.ones((grid.n, grid.n), dtype=bool), k=-1 if strict else 0)
        return cls.volterra(np.where(mask, table, 0.0))

    def matrix(self, grid: TimeGrid) -> np.ndarray:
        n = grid.n
        if self.kind == "zero":
            return np.zeros((n, n))
        if self.kind == "scalar":
            return self.rho * np.eye(n)
        if self.kind == "volterra":
            if self.kernel is None or self.kernel.shape != (n, n):
                raise ValueError(f"volterra kernel must be an {n}x{n} table")
            if np.any(np.triu(self.kernel, k=1) != 0):
                raise ValueError("volterra kernel must be lower-triangular")
            return self.kernel * grid.dt
        raise ValueError(f"unknown cross-covariance kind {self.kind!r}")


def _sym_function(S: np.ndarray, fn) -> np.ndarray:
    lam, U = np.linalg.eigh(S)
    lam = np.clip(lam, PSD_FLOOR, None)
    return (U * fn(lam)) @ U.T


@dataclass(frozen=True, eq=False)
class CovModel:
    """Covariance operators of the discretized pair on ``R^{2n}``."""

    grid: TimeGrid
    V: np.ndarray
    S: np.ndarray
    S_half: np.ndarray
    S_inv: np.ndarray
    S_inv_half: np.ndarray
    kind: str = "matrix"

    @classmethod
    def from_matrix(cls, grid: TimeGrid, V, kind: str = "matrix") -> "CovModel":
        V = np.array(V, dtype=float)
        n = grid.n
        if V.shape != (n, n):
            raise ValueError(f"V must be {n}x{n}, got {V.shape}")
        norm = np.linalg.norm(V, 2)
        if norm >= 1.0:
            raise ValueError(f"cross-covariance operator needs ||V|| < 1, got {norm:.6g}")
        eye = np.eye(n)
        S = np.block([[eye, V], [V.T, eye]])
        S_half = _sym_function(S, np.sqrt)
        S_inv = _sym_function(S, lambda x: 1.0 / x)
        S_inv_half = _sym_function(S, lambda x: 1.0 / np.sqrt(x))
        for M in (V, S_half, S_inv, S_inv_half):
            M.setflags(write=False)
        S.setflags(write=False)
        model = cls(grid, V, S, S_half, S_inv, S_inv_half, kind)
        if np.abs(S_half @ S_half - S).max() > CHECK_TOL:
            raise ArithmeticError("square root of S failed to reproduce S")
        if np.abs(S @ S_inv - np.eye(2 * n)).max() > CHECK_TOL:
            raise ArithmeticError("inverse of S failed to reproduce the identity")
        return model

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def dim(self) -> int:
        return 2 * self.grid.n

    @cached_property
    def Q(self) -> np.ndarray:
        return self.S_inv - np.eye(self.dim)

    @property
    def is_causal(self) -> bool:
        """``V`` lower-triangular: w2 increments only feed later w1 increments."""
        return bool(np.all(np.triu(self.V, k=1) == 0))

    def prefix_projector(self, k: int) -> np.ndarray:
        """Projector onto the first ``k`` cells of both components."""
        p = np.zeros(self.dim)
        p[:k] = 1.0
        p[self.n:self.n + k] = 1.0
        return np.diag(p)

    def prefix_defect(self) -> float:
        """``max_k ||P_k S - P_k S P_k||`` over all grid prefixes."""
        worst = 0.0
        for k in range(self.n + 1):
            P = self.prefix_projector(k)
            worst = max(worst, np.linalg.norm(P @ self.S - P @ self.S @ P, 2))
        return worst

    def w_rows(self, component: int) -> np.ndarray:
        """First-chaos rows (in xi_prime coordinates) of ``w_component(t_k)``."""
        n = self.n
        offset = 0 if component == 1 else n
        incr = np.sqrt(self.grid.dt) * self.S_half[offset:offset + n]
        rows = np.zeros((n + 1, self.dim))
        rows[1:] = np.cumsum(incr, axis=0)
        return rows

    @property
    def w2_basis(self) -> np.ndarray:
        """Rows ``R`` with ``xi_2 = R xi_prime``; they are orthonormal."""
        return self.S_half[self.n:]


def build_covariance(grid: TimeGrid, spec: CrossCovarianceSpec) -> CovModel:
    return CovModel.from_matrix(grid, spec.matrix(grid), kind=spec.kind)


@dataclass(frozen=True)
class NoiseSample:
    """One (or a batch of) realizations of the pair.

    Arrays may carry leading batch axes; the last axis is always the
    coordinate axis (``2n`` for ``xi``/``xi_prime``, ``n+1`` for paths).
    """

    xi_prime: np.ndarray
    xi: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    def __len__(self):
        return 1 if self.xi.ndim == 1 else self.xi.shape[0]


def noise_from_whitened(cov: CovModel, xi_prime: np.ndarray) -> NoiseSample:
    xi_prime = np.asarray(xi_prime, dtype=float)
    xi = xi_prime @ cov.S_half.T
    return noise_from_xi(cov, xi, xi_prime)


def noise_from_xi(cov: CovModel, xi: np.ndarray, xi_prime: np.ndarray | None = None) -> NoiseSample:
    xi = np.asarray(xi, dtype=float)
    if xi_prime is None:
        xi_prime = xi @ cov.S_inv_half.T
    n, sdt = cov.n, np.sqrt(cov.grid.dt)
    zeros = np.zeros(xi.shape[:-1] + (1,))
    w1 = np.concatenate([zeros, np.cumsum(xi[..., :n], axis=-1) * sdt], axis=-1)
    w2 = np.concatenate([zeros, np.cumsum(xi[..., n:], axis=-1) * sdt], axis=-1)
    return NoiseSample(xi_prime, xi, w1, w2)


def sample_pair(cov: CovModel, seed: int, index: int = 0) -> NoiseSample:
    """The ``index``-th realization of the stream fixed by ``seed``."""
    z = rng.normals(seed, 1, cov.dim, start=index)[0]
    return noise_from_whitened(cov, z)


def sample_pairs(cov: CovModel, seed: int, m: int, start: int = 0) -> NoiseSample:
    z = rng.normals(seed, m, cov.dim, start=start)
    return noise_from_whitened(cov, z)


def conditional_projector(cov: CovModel) -> np.ndarray:
    """Orthogonal projector (xi_prime coordinates) onto the span generating sigma(w2)."""
    R = cov.w2_basis
    P = R.T @ np.linalg.solve(R @ R.T, R)
    return 0.5 * (P + P.T)


@dataclass(frozen=True, eq=False)
class IntegratorProcess:
    """Mean-zero Gaussian process ``gamma(t_k) = (rows[k], xi_prime)``."""

    grid: TimeGrid
    rows: np.ndarray
    name: str = "gamma"

    def __post_init__(self):
        if self.rows.shape[0] != self.grid.n + 1:
            raise ValueError("need one coefficient row per grid time")
        if np.any(self.rows[0] != 0):
            raise ValueError("integrator must start at zero")

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.rows, axis=0)

    @property
    def variance(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.rows, self.rows)

    @cached_property
    def bound_constant(self) -> float:
        return grid_constant(self.increments, self.grid.dt)

    def evaluate(self, xi_prime: np.ndarray) -> np.ndarray:
        return np.asarray(xi_prime) @ self.rows.T

    def in_basis(self, M: np.ndarray) -> "IntegratorProcess":
        """Re-express rows for coordinates ``z = M xi_prime`` (M with orthonormal rows)."""
        return IntegratorProcess(self.grid, self.rows @ M.T, self.name)


def grid_constant(increments: np.ndarray, dt: float) -> float:
    """Smallest C with ``E(sum a_k dgamma_k)^2 <= C sum a_k^2 dt`` on the grid."""
    gram = increments @ increments.T
    return float(np.linalg.eigvalsh(0.5 * (gram + gram.T))[-1] / dt)


def regress_gamma(cov: CovModel) -> IntegratorProcess:
    """``gamma(t) = E(w1(t) | w2)`` as first-chaos rows in xi_prime coordinates."""
    R = cov.w2_basis
    gram = R @ R.T
    if np.linalg.cond(gram) > 1e12:
        raise np.linalg.LinAlgError("w2 coordinates are degenerate on this grid")
    P = conditional_projector(cov)
    rows = cov.w_rows(1) @ P
    rows[0] = 0.0
    return IntegratorProcess(cov.grid, rows, "E(w1|w2)")
