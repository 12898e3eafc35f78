"""Gaussian strong random operators, integrator processes and fractional Brownian motion.

A GSRO on the grid is stored as ``(alpha0, alpha1)``: for a deterministic
input ``phi`` (length ``n_in``) the output component ``o`` is

    (A phi)_o = sum_i alpha0[o, i] phi_i + (sum_i alpha1[o, i, :] phi_i, xi_prime).

For a random input ``x`` the second term becomes the Skorokhod divergence of
the noise-indexed element ``u_j = sum_i alpha1[o, i, j] x_i``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import integrate, special

from . import chaos as ch
from .gaussian_space import CovModel, IntegratorProcess, TimeGrid, grid_constant


@dataclass(eq=False)
class Gsro:
    alpha0: np.ndarray
    alpha1: np.ndarray
    name: str = "A"

    def __post_init__(self):
        self.alpha0 = np.asarray(self.alpha0, dtype=float)
        self.alpha1 = np.asarray(self.alpha1, dtype=float)
        if self.alpha1.ndim != 3 or self.alpha1.shape[:2] != self.alpha0.shape:
            raise ValueError("alpha1 must have shape (n_out, n_in, noise_dim) matching alpha0")
        if not (np.all(np.isfinite(self.alpha0)) and np.all(np.isfinite(self.alpha1))):
            raise ValueError("GSRO tensors must be finite")

    @property
    def n_out(self) -> int:
        return self.alpha0.shape[0]

    @property
    def n_in(self) -> int:
        return self.alpha0.shape[1]

    @property
    def noise_dim(self) -> int:
        return self.alpha1.shape[2]

    def on_deterministic(self, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean vector and first-chaos rows of ``A phi``."""
        phi = np.asarray(phi, dtype=float)
        return self.alpha0 @ phi, np.einsum("oij,i->oj", self.alpha1, phi)

    def variance(self, phi: np.ndarray) -> np.ndarray:
        _, rows = self.on_deterministic(phi)
        return np.einsum("oj,oj->o", rows, rows)

    def quantized(self, C: np.ndarray) -> "Gsro":
        """``Gamma(C) A``: the noise enters through ``C xi_prime``."""
        C = np.asarray(C, dtype=float)
        return Gsro(self.alpha0.copy(), np.einsum("oij,jk->oik", self.alpha1, C), f"Gamma(C){self.name}")


def gsro_from_kernel(K: np.ndarray, noise_rows: np.ndarray, name: str = "kernel") -> Gsro:
    """GSRO ``(A phi)(t_o) = sum_j (sum_i K[o, j, i] phi_i) z_j`` with ``z_j = (noise_rows[j], xi_prime)``.

    ``K`` has layout ``[output time, noise cell, phi cell]``; ``noise_rows``
    are the xi_prime rows of the unit-variance noise coordinates.
    """
    K = np.asarray(K, dtype=float)
    if not np.all(np.isfinite(K)):
        raise ValueError("kernel tensor must be finite")
    alpha1 = np.einsum("oji,jk->oik", K, noise_rows)
    return Gsro(np.zeros(K.shape[::2]), alpha1, name)


def ito_kernel(grid: TimeGrid) -> np.ndarray:
    """``(K phi)(t, s) = phi(s) 1_[0,t](s)`` against unit-variance cell noise."""
    n = grid.n
    K = np.zeros((n + 1, n, n))
    for o in range(n + 1):
        K[o, np.arange(o), np.arange(o)] = math.sqrt(grid.dt)
    return K


def ito_gsro(cov: CovModel, component: int = 1) -> Gsro:
    """Left-point Ito integral ``int_0^{t_o} x dw_component`` of cell values ``x_i``."""
    offset = 0 if component == 1 else cov.n
    return gsro_from_kernel(ito_kernel(cov.grid), cov.S_half[offset:offset + cov.n], f"ito(w{component})")


def integrator_gsro(gamma: IntegratorProcess) -> Gsro:
    """Extended integral ``int_0^{t_o} x dgamma`` with left-point cell values."""
    n = gamma.grid.n
    dc = gamma.increments
    alpha1 = np.zeros((n + 1, n, dc.shape[1]))
    for o in range(n + 1):
        alpha1[o, :o] = dc[:o]
    return Gsro(np.zeros((n + 1, n)), alpha1, f"int d{gamma.name}")


def gsro_apply(A: Gsro, x: ch.VectorChaos, capacity: int | None = None) -> ch.VectorChaos:
    """``A x = alpha0 x + delta(alpha1 x)`` component-wise over the outputs."""
    if x.size != A.n_in:
        raise ValueError(f"input has {x.size} components, operator expects {A.n_in}")
    if x.dim != A.noise_dim:
        raise ValueError(f"input lives on {x.dim} coordinates, operator noise has {A.noise_dim}")
    det = x.apply_matrix(A.alpha0)
    outs = []
    for o in range(A.n_out):
        u = x.apply_matrix(A.alpha1[o].T)
        d = ch.divergence(u)
        if capacity is not None and d.K > capacity:
            d = d.truncated(capacity)
        outs.append(d + det.component(o))
    return ch.VectorChaos.from_components(outs)


def commutation_check(C: np.ndarray, A: Gsro, x: ch.VectorChaos) -> float:
    """Chaos norm of ``Gamma(C)(A x) - (Gamma(C) A)(Gamma(C) x)``."""
    lhs = ch.substitute(gsro_apply(A, x), C)
    rhs = gsro_apply(A.quantized(C), ch.substitute(x, C))
    return math.sqrt(ch.norm_sq(lhs - rhs))


def quantized_integrator(cov: CovModel, C: np.ndarray, component: int = 1) -> IntegratorProcess:
    """``gamma = Gamma(C) w_component`` as first-chaos rows."""
    C = np.asarray(C, dtype=float)
    if np.linalg.norm(C, 2) > 1 + ch.CONTRACTION_TOL:
        raise ValueError("integrator construction needs a contraction")
    return IntegratorProcess(cov.grid, cov.w_rows(component) @ C, f"Gamma(C)w{component}")


@dataclass(frozen=True)
class IntegratorBound:
    constant: float
    trial_max: float
    trials: int


def integrator_bound(gamma: IntegratorProcess, trials: int = 1000, seed: int = 0) -> IntegratorBound:
    """Exact grid constant plus the best ratio found over random step functions.

    The ratio ``E(sum a_k dgamma_k)^2 / sum a_k^2 dt`` is a Rayleigh quotient of
    the increment Gram matrix, so the exact constant is its top eigenvalue and
    every trial ratio is below it.
    """
    if trials < 1000:
        raise ValueError("integrator bound needs at least 1000 trial step functions")
    dc, dt = gamma.increments, gamma.grid.dt
    a = np.random.default_rng(seed).standard_normal((trials, gamma.grid.n))
    num = np.einsum("tj,tj->t", a @ dc, a @ dc)
    ratios = num / (np.einsum("tk,tk->t", a, a) * dt)
    return IntegratorBound(grid_constant(dc, dt), float(ratios.max()), trials)


def step_integral_variance(gamma: IntegratorProcess, phi: np.ndarray, k: int) -> float:
    """``E(int_0^{t_k} phi dgamma)^2`` for cell values ``phi``."""
    r = phi[:k] @ gamma.increments[:k]
    return float(r @ r)


# fractional Brownian motion -----------------------------------------------------------

def fbm_covariance(s, t, hurst: float):
    s, t = np.asarray(s, dtype=float), np.asarray(t, dtype=float)
    h2 = 2 * hurst
    return 0.5 * (np.abs(t) ** h2 + np.abs(s) ** h2 - np.abs(t - s) ** h2)


def mg_constant(hurst: float) -> float:
    """Closed-form normalization of the Volterra kernel giving ``Var B(1) = 1``."""
    h = hurst
    return math.sqrt(2 * h * special.gamma(1.5 - h) / (special.gamma(h + 0.5) * special.gamma(2 - 2 * h)))


def _mg_inner(t: float, s: float, hurst: float) -> float:
    """``s^{1/2-H} int_s^t (r-s)^{H-3/2} r^{H-1/2} dr`` in closed form."""
    if s <= 0 or s >= t:
        return 0.0
    a = hurst - 0.5
    # substitute r = s + (t-s) v; Euler integral gives a Gauss hypergeometric function
    return (t - s) ** a / a * special.hyp2f1(-a, a, a + 1, -(t - s) / s)


def mg_kernel(t: float, s: float, hurst: float, c: float | None = None) -> float:
    """Volterra kernel ``K(t, s)`` obtained by integrating its time derivative from ``s`` to ``t``."""
    c = mg_constant(hurst) if c is None else c
    return c * (hurst - 0.5) * _mg_inner(t, s, hurst)


def mg_grid_kernel(hurst: float, grid: TimeGrid, c: float) -> np.ndarray:
    """Cell-averaged kernel: ``B(t_k) ~ sum_j M[k, j] z_j`` with unit-variance cell noise."""
    n, dt = grid.n, grid.dt
    M = np.zeros((n + 1, n))
    sing = 0.5 - hurst
    for k in range(1, n + 1):
        t = k * dt
        for j in range(k):
            lo, hi = j * dt, (j + 1) * dt
            if j == 0:
                # kernel behaves like s^{1/2-H} near zero: integrate that weight exactly
                f = lambda s: mg_kernel(t, s, hurst, c) * s ** (-sing) if s > 0 else 0.0
                v, _ = integrate.quad(f, lo, hi, weight="alg", wvar=(sing, 0.0), limit=200)
            else:
                v, _ = integrate.quad(lambda s: mg_kernel(t, s, hurst, c), lo, hi, limit=200)
            M[k, j] = v / math.sqrt(dt)
    return M


@dataclass(eq=False)
class FbmKernel:
    """Lower-triangular representation ``B(t_k) = sum_j rows[k, j] z_j`` on a grid.

    ``rows`` is the grid-exact causal factor of ``R`` (``rows[0] = 0``);
    ``quadrature`` is the cell-averaged Volterra kernel used as a cross-check.
    """

    hurst: float
    grid: TimeGrid
    rows: np.ndarray
    c_alpha: float
    quadrature: np.ndarray | None = field(default=None, repr=False)

    @property
    def matrix(self) -> np.ndarray:
        return self.rows[1:]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.rows, axis=0)

    def covariance(self) -> np.ndarray:
        return self.rows @ self.rows.T

    def target(self) -> np.ndarray:
        t = self.grid.times
        return fbm_covariance(t[:, None], t[None, :], self.hurst)

    def integrator(self, noise_rows: np.ndarray) -> IntegratorProcess:
        """``B`` as an integrator driven by the unit noise ``z = noise_rows xi_prime``."""
        return IntegratorProcess(self.grid, self.rows @ noise_rows, f"B^{self.hurst:g}")

    def kernel_tensor(self) -> np.ndarray:
        """``[o, noise j, phi i] = 1_{i<o} dB_i/dz_j`` for ``(A phi)(t_o) = int_0^{t_o} phi dB``."""
        n = self.grid.n
        K = np.zeros((n + 1, n, n))
        dL = self.increments
        for o in range(n + 1):
            K[o, :, :o] = dL[:o].T
        return K

    def to_csv(self, path, which: str = "rows") -> Path:
        M = self.rows if which == "rows" else self.quadrature
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"cell_{j}" for j in range(self.grid.n)])
            for t, row in zip(self.grid.times, M):
                w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])
        return path


def fbm_kernel(hurst: float, grid: TimeGrid, quadrature: bool = False) -> FbmKernel:
    if not 0.5 < hurst < 1.0:
        raise ValueError(f"Hurst index must lie in (1/2, 1), got {hurst}")
    t = grid.times[1:]
    R = fbm_covariance(t[:, None], t[None, :], hurst)
    L = np.linalg.cholesky(R)
    rows = np.vstack([np.zeros(grid.n), L])
    c = _grid_normalization(hurst)
    Mq = mg_grid_kernel(hurst, grid, c) if quadrature else None
    return FbmKernel(hurst, grid, rows, c, Mq)


def _grid_normalization(hurst: float) -> float:
    """``c`` making ``int_0^1 K(1, s)^2 ds = 1`` by adaptive quadrature."""
    sing = 0.5 - hurst
    f = lambda s: (mg_kernel(1.0, s, hurst, 1.0) * s ** (-sing)) ** 2 if s > 0 else 0.0
    v, _ = integrate.quad(f, 0.0, 1.0, weight="alg", wvar=(2 * sing, 0.0), limit=400)
    return 1.0 / math.sqrt(v)
