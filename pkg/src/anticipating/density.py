"""Densities of shifted and drift-transformed laws of the pair (w1, w2).

All quantities live in the xi coordinates of :mod:`gaussian_space`
(increments divided by ``sqrt(dt)``). A drift ``h`` given by its function
values ``a(w1(t_i))`` on the cells has coordinates ``sqrt(dt) * a``.

The transformed pair is the Euler scheme

    x1(t_{i+1}) = x1(t_i) + a1(x1(t_i)) dt + dw1_i,
    x2(t_{i+1}) = x2(t_i) + a2(x1(t_i)) dt + dw2_i,

and ``p`` is the density of its law with respect to the law of (w1, w2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gaussian_space import CovModel, NoiseSample, TimeGrid

Fn = Callable[[np.ndarray], np.ndarray]


def _preset(kind: str, eps: float) -> tuple[Fn, Fn, float]:
    if kind == "zero":
        return (lambda x: np.zeros_like(x, dtype=float)), (lambda x: np.zeros_like(x, dtype=float)), 0.0
    if kind == "constant":
        return (lambda x: np.full_like(x, eps, dtype=float)), (lambda x: np.zeros_like(x, dtype=float)), 0.0
    if kind == "tanh":
        return (lambda x: eps * np.tanh(x)), (lambda x: eps / np.cosh(x) ** 2), abs(eps)
    if kind == "sin":
        return (lambda x: eps * np.sin(x)), (lambda x: eps * np.cos(x)), abs(eps)
    if kind == "linear":
        return (lambda x: eps * np.asarray(x, dtype=float)), (lambda x: np.full_like(x, eps, dtype=float)), abs(eps)
    raise ValueError(f"unknown drift preset {kind!r}; choose zero, constant, tanh, sin or linear")


DRIFT_PRESETS = ("zero", "constant", "tanh", "sin", "linear")


@dataclass(frozen=True, eq=False)
class DriftSpec:
    """Drifts ``a1, a2`` with derivatives and sup-norm bounds of the derivatives."""

    a1: Fn
    da1: Fn
    a2: Fn
    da2: Fn
    bound1: float
    bound2: float
    label: str = "custom"
    a2_zero: bool = False

    @classmethod
    def preset(cls, a1: str = "zero", eps1: float = 0.0, a2: str = "zero", eps2: float = 0.0) -> "DriftSpec":
        f1, d1, b1 = _preset(a1, eps1)
        f2, d2, b2 = _preset(a2, eps2)
        a2_zero = a2 == "zero" or eps2 == 0.0
        return cls(f1, d1, f2, d2, b1, b2, f"a1={a1}({eps1:g}),a2={a2}({eps2:g})", a2_zero)

    @classmethod
    def zero(cls) -> "DriftSpec":
        return cls.preset()

    def smallness(self, cov: CovModel) -> float:
        """``||S^{-1/2}|| * sup(|a1'| + |a2'|) * sqrt(T)``; must be below one."""
        return float(np.linalg.norm(cov.S_inv_half, 2) * (self.bound1 + self.bound2) * math.sqrt(cov.grid.T))

    def check(self, cov: CovModel) -> None:
        s = self.smallness(cov)
        if s >= 1.0:
            raise ValueError(f"drift derivatives too large for absolute continuity: smallness {s:.4g} >= 1")

    def jacobian_constant(self, T: float) -> float:
        """``c`` in ``||P_t Dh phi||^2 <= c int_0^t ||P_s phi||^2 ds``."""
        return T * (self.bound1 ** 2 + self.bound2 ** 2)


@dataclass(frozen=True)
class DensityEval:
    value: np.ndarray | float
    log_value: np.ndarray | float
    zeta: np.ndarray | float
    divergence_term: np.ndarray | float
    quadratic_term: np.ndarray | float
    singular: bool = False


# shifts ----------------------------------------------------------------------------------------

def shift_density(h: np.ndarray, sample: NoiseSample, cov: CovModel) -> np.ndarray | float:
    """Density of the pair shifted by ``i(h)``; ``h`` in xi coordinates (length 2n)."""
    g = cov.S_inv @ np.asarray(h, dtype=float)
    out = np.exp(sample.xi @ g - 0.5 * g @ h)
    return float(out) if np.ndim(out) == 0 else out


def shift_exponent_paths(h1: np.ndarray, h2: np.ndarray, w1: np.ndarray, w2: np.ndarray,
                         cov: CovModel) -> np.ndarray | float:
    """Same exponent written with path integrals and the blocks of ``Q = S^{-1} - I``.

    ``h1, h2`` are function values on the cells, ``w1, w2`` paths of length n+1.
    """
    n, dt = cov.n, cov.grid.dt
    Q = cov.Q
    g1 = h1 + Q[:n, :n] @ h1 + Q[:n, n:] @ h2
    g2 = h2 + Q[n:, :n] @ h1 + Q[n:, n:] @ h2
    dw1, dw2 = np.diff(w1, axis=-1), np.diff(w2, axis=-1)
    return dw1 @ g1 + dw2 @ g2 - 0.5 * (g1 @ h1) * dt - 0.5 * (g2 @ h2) * dt


def gaussian_log_density(xi: np.ndarray, cov: CovModel) -> np.ndarray:
    """Log density of N(0, S) at ``xi`` (batch over leading axes)."""
    sign, logdet = np.linalg.slogdet(cov.S)
    quad = np.einsum("...i,ij,...j->...", xi, cov.S_inv, xi)
    return -0.5 * quad - 0.5 * logdet - 0.5 * cov.dim * math.log(2 * math.pi)


# drift transform -------------------------------------------------------------------------------

def drift_jacobian(drift: DriftSpec, sample: NoiseSample, cov: CovModel | None = None):
    """``h`` (xi coordinates) and ``Dh[i, j] = d h_i / d xi_j`` for a single sample.

    ``h_i = sqrt(dt) a(w1(t_i))`` uses the left end point of cell ``i`` so ``h``
    depends only on earlier increments and ``Dh`` is strictly lower
    triangular in each block, with a zero second block column.
    """
    w1 = np.asarray(sample.w1, dtype=float)
    if w1.ndim != 1:
        raise ValueError("drift_jacobian takes a single sample")
    n = len(w1) - 1
    dt = 1.0 / n if cov is None else cov.grid.dt
    left = w1[:-1]
    sdt = math.sqrt(dt)
    h = np.concatenate([sdt * drift.a1(left), sdt * drift.a2(left)])
    lower = np.tril(np.ones((n, n)), k=-1) * dt
    Dh = np.zeros((2 * n, 2 * n))
    Dh[:n, :n] = drift.da1(left)[:, None] * lower
    Dh[n:, :n] = drift.da2(left)[:, None] * lower
    return h, Dh


def det2(M: np.ndarray) -> tuple[float, bool]:
    """Carleman-Fredholm determinant ``det(I + M) exp(-tr M)`` and a singular flag."""
    M = np.asarray(M, dtype=float)
    sign, logdet = np.linalg.slogdet(np.eye(M.shape[0]) + M)
    if sign <= 0:
        return 0.0, True
    return float(np.exp(logdet - np.trace(M))), False


def det2_eigen(M: np.ndarray) -> float:
    """Second route: ``prod (1 + lambda) exp(-lambda)`` over the eigenvalues."""
    lam = np.linalg.eigvals(np.asarray(M, dtype=float))
    return float(np.real(np.prod((1 + lam) * np.exp(-lam))))


def quasinilpotence_certificate(M: np.ndarray, n_max: int) -> np.ndarray:
    """``||M^k||^{1/k}`` (spectral norm) for ``k = 1 .. n_max``."""
    M = np.asarray(M, dtype=float)
    out = np.empty(n_max)
    P = np.eye(M.shape[0])
    for k in range(1, n_max + 1):
        P = P @ M
        out[k - 1] = np.linalg.norm(P, 2) ** (1.0 / k)
    return out


def factorial_bound(cov: CovModel, drift: DriftSpec, n_max: int) -> np.ndarray:
    """Decay envelope ``||S|| sqrt(c) / (k!)^{1/(2k)}`` for ``k = 1 .. n_max``."""
    normS = np.linalg.norm(cov.S, 2)
    c = drift.jacobian_constant(cov.grid.T)
    k = np.arange(1, n_max + 1)
    logfact = np.array([math.lgamma(j + 1) for j in k])
    return normS * math.sqrt(c) * np.exp(-logfact / (2 * k))


def _drift_values(drift: DriftSpec, w1: np.ndarray, dt: float) -> np.ndarray:
    left = w1[..., :-1]
    sdt = math.sqrt(dt)
    return np.concatenate([sdt * drift.a1(left), sdt * drift.a2(left)], axis=-1)


def density_p(drift: DriftSpec, sample: NoiseSample, cov: CovModel, with_zeta: bool = True) -> DensityEval:
    """``p = zeta exp(J(S^{-1} h) - (S^{-1} h, h) / 2)`` for one sample or a batch.

    ``J(S^{-1} h) = I(S^{-1/2} h)`` is the finite-dimensional divergence in
    xi_prime coordinates: ``(u, xi_prime) - tr(du/dxi_prime)`` with
    ``u = S^{-1/2} h``. The trace equals ``tr(Dh)``, which vanishes because
    ``h`` only looks at past increments; it is still computed.
    """
    dt = cov.grid.dt
    h = _drift_values(drift, sample.w1, dt)
    g = h @ cov.S_inv
    quad = 0.5 * np.einsum("...i,...i->...", g, h)
    n = cov.n
    lower = np.tril(np.ones((n, n)), k=-1) * dt
    left = sample.w1[..., :-1]
    # diagonal of Dh is zero by construction; keep the explicit trace for clarity
    trace = np.einsum("...i,ii->...", drift.da1(left), lower)
    div = np.einsum("...i,...i->...", g, sample.xi) - trace
    if with_zeta:
        if np.ndim(sample.w1) == 1:
            _, Dh = drift_jacobian(drift, sample, cov)
            zeta, singular = det2(cov.S @ Dh)
        else:
            zs = []
            for w1 in sample.w1:
                _, Dh = drift_jacobian(drift, NoiseSample(None, None, w1, None), cov)
                zs.append(det2(cov.S @ Dh))
            zeta = np.array([z for z, _ in zs])
            singular = any(s for _, s in zs)
    else:
        zeta, singular = (1.0 if np.ndim(sample.w1) == 1 else np.ones(np.shape(sample.w1)[0])), False
    log_value = np.log(np.maximum(zeta, 1e-300)) + div - quad
    with np.errstate(over="ignore"):     # huge weights stay usable through log_value
        value = zeta * np.exp(div - quad)
    return DensityEval(value, log_value, zeta, div, quad, singular)


# Euler scheme and the brute-force oracle -----------------------------------------------------------

def euler_paths(drift: DriftSpec, w1: np.ndarray, w2: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Drive the Euler scheme with the increments of ``(w1, w2)`` (batch over leading axes)."""
    w1, w2 = np.asarray(w1, dtype=float), np.asarray(w2, dtype=float)
    dw1, dw2 = np.diff(w1, axis=-1), np.diff(w2, axis=-1)
    x1, x2 = np.zeros_like(w1), np.zeros_like(w2)
    for i in range(w1.shape[-1] - 1):
        x1[..., i + 1] = x1[..., i] + drift.a1(x1[..., i]) * dt + dw1[..., i]
        x2[..., i + 1] = x2[..., i] + drift.a2(x1[..., i]) * dt + dw2[..., i]
    return x1, x2


def _euler_xi(drift: DriftSpec, xi: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Euler map in xi coordinates: noise increments to output increments."""
    n, sdt = grid.n, math.sqrt(grid.dt)
    w1 = np.concatenate([[0.0], np.cumsum(xi[:n]) * sdt])
    w2 = np.concatenate([[0.0], np.cumsum(xi[n:]) * sdt])
    x1, x2 = euler_paths(drift, w1, w2, grid.dt)
    return np.concatenate([np.diff(x1), np.diff(x2)]) / sdt


def exact_density_oracle(drift: DriftSpec, point: tuple[np.ndarray, np.ndarray], cov: CovModel,
                         tol: float = 1e-13, max_iter: int = 60, fd_step: float = 1e-6) -> float:
    """Density of the Euler-transformed law at the path pair ``point`` by change of variables.

    The Euler map ``F`` is inverted with Newton's method on a central
    finite-difference Jacobian; the result is
    ``phi_S(F^{-1}(y)) / |det DF(F^{-1}(y))| / phi_S(y)``.
    """
    grid = cov.grid
    if grid.n > 16:
        raise ValueError("the brute-force oracle is limited to n <= 16")
    y1, y2 = (np.asarray(p, dtype=float) for p in point)
    sdt = math.sqrt(grid.dt)
    target = np.concatenate([np.diff(y1), np.diff(y2)]) / sdt
    dim = cov.dim

    def jac(z):
        J = np.empty((dim, dim))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = fd_step
            J[:, j] = (_euler_xi(drift, z + e, grid) - _euler_xi(drift, z - e, grid)) / (2 * fd_step)
        return J

    z = target.copy()
    for _ in range(max_iter):
        r = _euler_xi(drift, z, grid) - target
        if np.abs(r).max() < tol:
            break
        z = z - np.linalg.solve(jac(z), r)
    else:
        raise ArithmeticError("Newton inversion of the Euler map did not converge")
    _, logdet = np.linalg.slogdet(jac(z))
    return float(np.exp(gaussian_log_density(z, cov) - logdet - gaussian_log_density(target, cov)))


def derivative_recursion(drift: DriftSpec, x1: np.ndarray, dt: float) -> np.ndarray:
    """Discrete derivative ``D[s, t]`` of ``x1(t_s)`` in the direction of cell ``t`` of w1.

    Returned in units of the path increment (so ``D[s, t] = d x1(t_s) / d dw1_t``).
    """
    n = len(x1) - 1
    D = np.zeros((n + 1, n))
    for s in range(n):
        D[s + 1] = D[s] * (1 + drift.da1(np.array(x1[s])) * dt)
        D[s + 1, s] += 1.0
    return D
