"""Smoothing of the first component given the whole path of the second.

Three routes to ``E(f(x1(t)) | x2)`` are provided:

* :func:`bayes_smoother` samples ``w1`` from its Gaussian conditional law
  given ``w2 = u`` and reweights by the density ``p(w1, u)``;
* :func:`solve_spde` evolves ``U(r, t) = E(f(r + w1(t)) p | w2)`` as a chaos
  vector over the normalized ``w2`` increments ``zeta = xi_2``;
* :func:`tube_oracle` conditions unconditional simulations on a shrinking
  neighbourhood of the observed path (brute force).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import chaos as ch
from . import rng
from .density import DriftSpec, density_p, euler_paths
from .gaussian_space import (CovModel, IntegratorProcess, NoiseSample, conditional_projector,
                             noise_from_whitened, noise_from_xi, sample_pairs)

ESS_FLOOR = 100
Fn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class TestFunction:
    f: Fn
    df: Fn
    d2f: Fn
    name: str = "f"

    @classmethod
    def preset(cls, name: str, scale: float = 1.0) -> "TestFunction":
        if name == "gauss":
            return cls(lambda x: np.exp(-0.5 * x * x), lambda x: -x * np.exp(-0.5 * x * x),
                       lambda x: (x * x - 1) * np.exp(-0.5 * x * x), "gauss")
        if name == "tanh":
            return cls(lambda x: np.tanh(scale * x), lambda x: scale / np.cosh(scale * x) ** 2,
                       lambda x: -2 * scale ** 2 * np.tanh(scale * x) / np.cosh(scale * x) ** 2, "tanh")
        if name == "sin":
            return cls(lambda x: np.sin(scale * x), lambda x: scale * np.cos(scale * x),
                       lambda x: -scale ** 2 * np.sin(scale * x), "sin")
        if name == "identity":
            return cls(lambda x: np.asarray(x, dtype=float), lambda x: np.ones_like(x, dtype=float),
                       lambda x: np.zeros_like(x, dtype=float), "identity")
        if name == "one":
            return cls(lambda x: np.ones_like(x, dtype=float), lambda x: np.zeros_like(x, dtype=float),
                       lambda x: np.zeros_like(x, dtype=float), "one")
        raise ValueError(f"unknown test function {name!r}")


TEST_FUNCTIONS = ("gauss", "tanh", "sin", "identity", "one")


@dataclass(frozen=True, eq=False)
class SmoothingModel:
    cov: CovModel
    drift: DriftSpec
    f: TestFunction
    r_grid: np.ndarray

    def __post_init__(self):
        self.drift.check(self.cov)
        r = np.asarray(self.r_grid, dtype=float)
        if r.ndim != 1 or len(r) < 3 or np.any(np.diff(r) <= 0):
            raise ValueError("r_grid must be an increasing grid of at least 3 points")
        dr = np.diff(r)
        if not np.allclose(dr, dr[0], rtol=1e-9):
            raise ValueError("r_grid must be uniform")
        pad = 3 * math.sqrt(self.cov.grid.T)
        probe = np.linspace(r[0] - pad, r[-1] + pad, 201)
        for g in (self.f.f, self.f.df, self.f.d2f):
            if not np.all(np.isfinite(g(probe))):
                raise ValueError("test function or its derivatives are not finite on the extended grid")

    @property
    def grid(self):
        return self.cov.grid

    @property
    def dr(self) -> float:
        return float(self.r_grid[1] - self.r_grid[0])


def uniform_r_grid(lo: float, hi: float, m: int) -> np.ndarray:
    return np.linspace(lo, hi, m)


# simulation ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class PathBundle:
    x1: np.ndarray
    x2: np.ndarray
    noise: NoiseSample


def simulate_model(model: SmoothingModel, seed: int, m: int, start: int = 0) -> PathBundle:
    if m < 1:
        raise ValueError("need at least one path")
    noise = sample_pairs(model.cov, seed, m, start)
    x1, x2 = euler_paths(model.drift, noise.w1, noise.w2, model.grid.dt)
    return PathBundle(x1, x2, noise)


# Bayes smoother --------------------------------------------------------------------------------

def conditional_noise(cov: CovModel, observed_w2: np.ndarray, seed: int, m: int, start: int = 0) -> NoiseSample:
    """Samples of the pair with ``w2`` fixed to ``observed_w2``.

    Given ``xi_2 = z`` the first block is Gaussian with mean ``V z`` and
    covariance ``I - V V^T`` (Schur complement of ``S``).
    """
    n, sdt = cov.n, math.sqrt(cov.grid.dt)
    u = np.asarray(observed_w2, dtype=float)
    if u.shape != (n + 1,) or abs(u[0]) > 0:
        raise ValueError(f"observed path must have {n + 1} points starting at 0")
    z = np.diff(u) / sdt
    schur = np.eye(n) - cov.V @ cov.V.T
    L = np.linalg.cholesky(0.5 * (schur + schur.T))
    N = rng.normals(seed, m, n, start=start, stream=rng.STREAM_CONDITIONAL)
    xi1 = cov.V @ z + N @ L.T
    xi = np.concatenate([xi1, np.broadcast_to(z, (m, n))], axis=1)
    return noise_from_xi(cov, xi)


@dataclass
class SmootherOutput:
    psi: float
    stderr: float
    t_query: float
    pi_t: np.ndarray
    r_edges: np.ndarray
    ess: float
    flags: tuple = ()
    weights: np.ndarray | None = field(default=None, repr=False)
    w1: np.ndarray | None = field(default=None, repr=False)


def _histogram(values: np.ndarray, weights: np.ndarray, edges: np.ndarray) -> np.ndarray:
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)
    return np.bincount(idx, weights=weights, minlength=len(edges) - 1)


def r_edges(r_grid: np.ndarray) -> np.ndarray:
    mid = 0.5 * (r_grid[1:] + r_grid[:-1])
    return np.concatenate([[-np.inf], mid, [np.inf]])


def bayes_smoother(model: SmoothingModel, observed_x2: np.ndarray, t_query: float, seed: int,
                   m: int = 10 ** 4, start: int = 0) -> SmootherOutput:
    """Self-normalized importance sampling of ``E(f(x1(t)) | x2 = observed_x2)``.

    The random measure ``pi_t`` is the weighted law of ``w1(t)`` binned on
    ``r_grid``; values outside the grid fall into the end bins.
    """
    if m < 10 ** 4:
        raise ValueError("the smoother needs at least 10^4 conditional samples")
    cov = model.cov
    k = cov.grid.index(t_query)
    noise = conditional_noise(cov, observed_x2, seed, m, start)
    dens = density_p(model.drift, noise, cov, with_zeta=False)
    logw = np.asarray(dens.log_value)
    W = np.exp(logw - logw.max())
    W /= W.sum()
    ess = float(1.0 / np.sum(W * W))
    vals = model.f.f(noise.w1[:, k])
    psi = float(W @ vals)
    se = float(math.sqrt(np.sum(W * W * (vals - psi) ** 2)))
    edges = r_edges(np.asarray(model.r_grid))
    pi = np.stack([_histogram(noise.w1[:, j], W, edges) for j in range(cov.n + 1)])
    pi /= pi.sum(axis=1, keepdims=True)
    flags = ("unreliable-estimate",) if ess < ESS_FLOOR else ()
    return SmootherOutput(psi, se, t_query, pi, edges, ess, flags, W, noise.w1)


def smoother_functional(out: SmootherOutput, g: Fn, t_index: int) -> tuple[float, float]:
    vals = g(out.w1[:, t_index])
    W = out.weights
    est = float(W @ vals)
    return est, float(math.sqrt(np.sum(W * W * (vals - est) ** 2)))


def gaussian_conditional_oracle(cov: CovModel, observed_w2: np.ndarray, t_query: float) -> tuple[float, float]:
    """Mean and variance of ``w1(t)`` given ``w2`` by regression on the w2 increments."""
    n, sdt = cov.n, math.sqrt(cov.grid.dt)
    k = cov.grid.index(t_query)
    # Cov(w1(t), dw2_j) = sqrt(dt) sum_{i<k} V[i, j] sqrt(dt); Cov(dw2) = dt I
    a = np.zeros(n)
    a[:k] = 1.0
    cross = (a @ cov.V) * cov.grid.dt
    z = np.diff(np.asarray(observed_w2, dtype=float))
    coef = cross / cov.grid.dt
    mean = float(coef @ z)
    var = float(k * cov.grid.dt - coef @ cross)
    return mean, var


# tube oracle -----------------------------------------------------------------------------------

@dataclass
class TubeEstimate:
    value: float
    stderr: float
    eps: np.ndarray
    per_eps: np.ndarray
    per_eps_se: np.ndarray
    ess: np.ndarray


def tube_oracle(model: SmoothingModel, observed_x2: np.ndarray, t_query: float, seed: int,
                m: int = 10 ** 6, eps: Sequence[float] = (0.35, 0.45, 0.55, 0.65, 0.75),
                chunk: int = 2 ** 17) -> TubeEstimate:
    """Brute-force ``E(f(x1(t)) | x2 ~ observed)`` from unconditional paths.

    Paths are weighted by a Gaussian kernel of width ``eps`` in the space of
    x2 increments divided by ``sqrt(dt)``; a local-linear fit in that space
    removes the first-order bias, and the estimates for several ``eps`` are
    extrapolated linearly in ``eps^2`` to zero.
    """
    cov, k = model.cov, model.grid.index(t_query)
    sdt = math.sqrt(model.grid.dt)
    z0 = np.diff(np.asarray(observed_x2, dtype=float)) / sdt
    eps = np.asarray(eps, dtype=float)
    n = cov.n
    p = n + 1
    # weighted normal equations accumulated per eps, plus per-chunk estimates for errors
    XtWX = np.zeros((len(eps), p, p))
    XtWy = np.zeros((len(eps), p))
    sw, sw2 = np.zeros(len(eps)), np.zeros(len(eps))
    rows, ys, ws = [], [], []
    for lo in range(0, m, chunk):
        cnt = min(chunk, m - lo)
        b = simulate_model(model, seed, cnt, start=lo)
        dz = np.diff(b.x2, axis=1) / sdt - z0
        d2 = np.einsum("ij,ij->i", dz, dz)
        y = model.f.f(b.x1[:, k])
        keep = d2 < (4.0 * eps.max()) ** 2
        rows.append(dz[keep])
        ys.append(y[keep])
        ws.append(d2[keep])
    dz = np.concatenate(rows)
    y = np.concatenate(ys)
    d2 = np.concatenate(ws)
    X = np.concatenate([np.ones((len(y), 1)), dz], axis=1)
    per, per_se, ess = [], [], []
    for e in eps:
        w = np.exp(-0.5 * d2 / e ** 2)
        A = X.T @ (w[:, None] * X)
        beta = np.linalg.solve(A, X.T @ (w * y))
        resid = y - X @ beta
        # sandwich variance of the intercept
        Ainv = np.linalg.inv(A)
        G = X * (w * resid)[:, None]
        meat = G.T @ G
        var = (Ainv @ meat @ Ainv)[0, 0]
        per.append(beta[0])
        per_se.append(math.sqrt(var))
        ess.append(w.sum() ** 2 / np.sum(w * w))
    per, per_se = np.array(per), np.array(per_se)
    # weighted linear extrapolation in eps^2
    G = np.stack([np.ones_like(eps), eps ** 2], axis=1)
    Wt = 1.0 / per_se ** 2
    M = G.T @ (Wt[:, None] * G)
    coef = np.linalg.solve(M, G.T @ (Wt * per))
    # estimates share paths, so take the conservative (fully correlated) error of the extrapolant
    lever = np.linalg.solve(M, G.T * Wt)[0]
    se = float(np.abs(lever) @ per_se)
    return TubeEstimate(float(coef[0]), se, eps, per, per_se, np.array(ess))


# SPDE in the w2 chaos --------------------------------------------------------------------------

def gamma_rows_w2(cov: CovModel) -> np.ndarray:
    """Rows of ``gamma(t_k) = E(w1(t_k) | w2)`` in the normalized w2 increments ``zeta``."""
    n, sdt = cov.n, math.sqrt(cov.grid.dt)
    rows = np.zeros((n + 1, n))
    rows[1:] = sdt * np.cumsum(cov.V, axis=0)
    return rows


def gamma_w2(cov: CovModel) -> IntegratorProcess:
    return IntegratorProcess(cov.grid, gamma_rows_w2(cov), "E(w1|w2)")


def _wick_first_batch(F: list, c: np.ndarray, dim: int, capacity: int):
    """Batched ``F (wick) (c, zeta)`` over leading rows; degrees above ``capacity`` are returned apart."""
    out = [np.zeros_like(F[0])]
    overflow = None
    for k, A in enumerate(F):
        L = ch.layout(dim, k + 1)
        acc = np.zeros((A.shape[0], L.size))
        for p in range(k + 1):
            acc += A[:, L.drop[:, p]] * c[L.reps[:, p]]
        acc /= (k + 1)
        if k + 1 <= capacity:
            out.append(acc)
        else:
            overflow = acc
    while len(out) < len(F):
        out.append(np.zeros_like(F[len(out)]))
    return out[:len(F)], overflow


def _degree_norm_sq(A: np.ndarray, dim: int, k: int) -> np.ndarray:
    return math.factorial(k) * (A * A) @ ch.layout(dim, k).mult


def _projection(values: np.ndarray, zeta: np.ndarray, K: int, dim: int) -> list:
    """Hermite projection of ``values`` (shape (m, q)) on the zeta chaos: per degree (q, size).

    Higher degrees are projected from the centred values; Hermite features of
    positive degree have mean zero, so this only removes variance.
    """
    m = values.shape[0]
    centre = values.mean(axis=0)
    out = [np.zeros((values.shape[1], ch.layout(dim, k).size)) for k in range(K + 1)]
    for lo in range(0, m, 4096):
        feats = ch.hermite_features(dim, K, zeta[lo:lo + 4096])
        v = values[lo:lo + 4096] - centre
        for k, f in enumerate(feats[1:], start=1):
            out[k] += v.T @ f
    out = [o / (m * math.factorial(k)) for k, o in enumerate(out)]
    out[0] = centre[:, None]
    return out


def grad_density_first(drift: DriftSpec, noise: NoiseSample, cov: CovModel) -> np.ndarray:
    """``(S grad p)_1(t_k)`` as function values per cell, for a batch of samples.

    With ``h`` in xi coordinates and ``Dh = dh/dxi``,
    ``S grad p = p (h + S Dh^T S^{-1} (xi - h))``; the second block column of
    ``Dh`` vanishes, so the first block of ``S Dh^T y`` is ``Dh^T y`` itself.
    """
    n, dt = cov.n, cov.grid.dt
    sdt = math.sqrt(dt)
    left = noise.w1[:, :-1]
    h = np.concatenate([sdt * drift.a1(left), sdt * drift.a2(left)], axis=1)
    y = (noise.xi - h) @ cov.S_inv
    weighted = drift.da1(left) * y[:, :n] + drift.da2(left) * y[:, n:]
    # (Dh^T y)_j = dt sum_{i > j} weighted_i
    rev = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1]
    v1 = dt * np.concatenate([rev[:, 1:], np.zeros((len(rev), 1))], axis=1)
    p = density_p(drift, noise, cov, with_zeta=False).value
    return p[:, None] * (h[:, :n] + v1) / sdt


@dataclass
class SpdeField:
    r_grid: np.ndarray
    times: np.ndarray
    K: int
    dim: int
    U: list                      # per stored time: list over degree of (m_r, size) arrays
    stored_steps: list
    gamma: IntegratorProcess
    normalizer: ch.ChaosVector
    mode: str
    substeps: int
    overflow_norm_sq: float = 0.0
    projection_m: int = 0

    def at(self, r_index: int, step: int | None = None) -> ch.ChaosVector:
        j = -1 if step is None else self.stored_steps.index(step)
        return ch.ChaosVector(self.dim, [A[r_index] for A in self.U[j]], "w2")

    def mean_surface(self) -> np.ndarray:
        return np.stack([A[0][:, 0] for A in self.U])

    def evaluate(self, zeta: np.ndarray, step: int | None = None) -> np.ndarray:
        """Values of ``U(r, t)`` on the r grid at w2 coordinates ``zeta`` (shape (m, m_r))."""
        j = -1 if step is None else self.stored_steps.index(step)
        feats = ch.hermite_features(self.dim, self.K, np.atleast_2d(zeta))
        return sum(f @ (A * ch.layout(self.dim, k).mult).T for k, (f, A) in enumerate(zip(feats, self.U[j])))

    def lifted(self, cov: CovModel, r_index: int, step: int | None = None) -> ch.ChaosVector:
        """The field in xi_prime coordinates: ``zeta = R xi_prime``."""
        v = ch.substitute(self.at(r_index, step), cov.w2_basis)
        v.basis = "xi_prime"
        return v

    def off_subspace_norm(self, cov: CovModel, r_index: int, step: int | None = None) -> float:
        v = self.lifted(cov, r_index, step)
        proj = ch.second_quantization(conditional_projector(cov), v)
        return math.sqrt(ch.norm_sq(v - proj))


def solve_spde(model: SmoothingModel, K: int = 4, seed: int = 0, mode: str = "auto",
               substeps: int | None = None, projection_m: int = 2 * 10 ** 4,
               store: str = "auto") -> SpdeField:
    """Explicit Euler stepping of the chaos-valued SPDE for ``U(r, t)``.

    Each substep adds ``U_rr / 2 dt + U_r (wick) dgamma + third dt`` with
    central differences in ``r`` and Dirichlet values held at the initial
    data. ``mode="simplified"`` uses ``a1(r) U_r`` as third term (needs
    ``a2 = 0``); ``mode="conditional"`` projects
    ``f'(r + w1(t)) (S grad p)_1(t)`` on the w2 chaos by Monte Carlo.
    """
    cov, grid = model.cov, model.grid
    n, dt, dim = cov.n, grid.dt, cov.n
    r = np.asarray(model.r_grid, dtype=float)
    dr = model.dr
    if mode == "auto":
        mode = "simplified" if model.drift.a2_zero else "conditional"
    if mode not in ("simplified", "conditional"):
        raise ValueError(f"unknown third-term mode {mode!r}")
    if mode == "simplified" and not model.drift.a2_zero:
        raise ValueError("the simplified third term requires a2 = 0")
    limit = dr * dr / 2
    if substeps is None:
        substeps = max(1, math.ceil(dt / limit - 1e-12))
    elif dt / substeps > limit * (1 + 1e-12):
        raise ValueError(f"explicit stepping unstable: dt/substeps={dt / substeps:.4g} exceeds dr^2/2={limit:.4g}")
    h = dt / substeps
    gam = gamma_w2(cov)
    dgam = gam.increments

    # joint samples for the conditional projections
    independent = not np.any(cov.V)
    if independent and mode == "simplified":
        # no noise enters the stepping: the field stays deterministic (degree 0)
        K = 0
    need_mc = not (independent and mode == "simplified")
    if need_mc:
        z = rng.normals(seed, projection_m, 2 * n, stream=rng.STREAM_CHAOS)
        noise = noise_from_whitened(cov, z)
        zeta = noise.xi[:, n:]
        pvals = density_p(model.drift, noise, cov, with_zeta=False).value
    if independent:
        # p does not involve w2 at all, so E(p | w2) = E p = 1
        norm = ch.constant(1.0, dim, "w2").padded(K)
    else:
        norm = ch.ChaosVector(dim, [A[0] for A in _projection(pvals[:, None], zeta, K, dim)], "w2")
    norm.basis = "w2"

    U = [np.outer(model.f.f(r), c) for c in norm.coeffs]
    boundary = [A[[0, -1]].copy() for A in U]
    third = None
    if mode == "conditional":
        gp = grad_density_first(model.drift, noise, cov)
        vals = np.concatenate([model.f.df(r[None, :] + noise.w1[:, [k]]) * gp[:, [k]] for k in range(n)], axis=1)
        proj = _projection(vals, zeta, K, dim)
        third = [[P[k * len(r):(k + 1) * len(r)] for P in proj] for k in range(n)]
    if store == "auto":
        store = "all" if len(r) * sum(ch.layout(dim, k).size for k in range(K + 1)) * (n + 1) < 5e7 else "final"
    snaps, steps = [], []
    if store == "all":
        snaps.append([A.copy() for A in U])
        steps.append(0)
    overflow = 0.0
    a1r = model.drift.a1(r)
    for k in range(n):
        c = dgam[k] / substeps
        for _ in range(substeps):
            Ur = [np.zeros_like(A) for A in U]
            Urr = [np.zeros_like(A) for A in U]
            for d, A in enumerate(U):
                Ur[d][1:-1] = (A[2:] - A[:-2]) / (2 * dr)
                Urr[d][1:-1] = (A[2:] - 2 * A[1:-1] + A[:-2]) / (dr * dr)
            if np.any(c):
                wick, over = _wick_first_batch(Ur, c, dim, K)
                if over is not None:
                    overflow = max(overflow, float(_degree_norm_sq(over, dim, K + 1).max()))
            else:
                wick = [np.zeros_like(A) for A in U]
            new = []
            for d, A in enumerate(U):
                B = A + 0.5 * h * Urr[d] + wick[d]
                if mode == "simplified":
                    B = B + h * a1r[:, None] * Ur[d]
                else:
                    B = B + h * third[k][d]
                B[[0, -1]] = boundary[d]
                new.append(B)
            U = new
        if store == "all" or k == n - 1:
            snaps.append([A.copy() for A in U])
            steps.append(k + 1)
    if overflow > 0:
        warnings.warn(f"chaos degree {K} exceeded during stepping; largest dropped mass {overflow:.3e}",
                      RuntimeWarning, stacklevel=2)
    return SpdeField(r, grid.times, K, dim, snaps, steps, gam, norm, mode, substeps, overflow,
                     projection_m if need_mc else 0)


def wick_step_pathwise(F: ch.ChaosVector, c: np.ndarray) -> ch.ChaosVector:
    """``F (wick) (c, z)`` as the ordinary product minus the trace correction ``(DF, c)``."""
    return ch.multiply(F, ch.first_chaos(c, F.basis)) - ch.directional_derivative(F, c)


# Feynman-Kac and heat references ------------------------------------------------------------------

def heat_gauss(r: np.ndarray, t) -> np.ndarray:
    """``E exp(-(r + W_t)^2 / 2)`` in closed form."""
    t = np.asarray(t, dtype=float)
    return np.exp(-0.5 * r * r / (1 + t)) / np.sqrt(1 + t)


@dataclass
class FkResult:
    mean: np.ndarray
    stderr: np.ndarray


def feynman_kac(a: Fn, f: Fn, r: np.ndarray, times: np.ndarray, seed: int, m: int = 2 * 10 ** 4,
                fine: int = 16) -> FkResult:
    """``E f(X_t)`` for ``dX = a(X) dt + dW``, ``X_0 = r``, with ``fine`` Euler substeps per interval.

    Common random numbers are used across ``r`` so the surface is smooth in ``r``.
    """
    r = np.asarray(r, dtype=float)
    times = np.asarray(times, dtype=float)
    steps = len(times) - 1
    X = np.broadcast_to(r, (m, len(r))).copy()
    mean = np.zeros((len(times), len(r)))
    se = np.zeros_like(mean)
    v = f(X)
    mean[0], se[0] = v.mean(axis=0), v.std(axis=0) / math.sqrt(m)
    for j in range(steps):
        dtj = (times[j + 1] - times[j]) / fine
        dW = rng.normals(seed, m, fine, start=0, stream=rng.STREAM_ORACLE + 10 * (j + 1)) * math.sqrt(dtj)
        for s in range(fine):
            X = X + a(X) * dtj + dW[:, [s]]
        v = f(X)
        mean[j + 1], se[j + 1] = v.mean(axis=0), v.std(axis=0, ddof=1) / math.sqrt(m)
    return FkResult(mean, se)


# Kolmogorov backward equation in the expectation case -------------------------------------------------

@dataclass(frozen=True, eq=False)
class SdePreset:
    name: str
    a: Fn
    b: float
    f: Fn
    exact: Callable[[np.ndarray, np.ndarray], np.ndarray]


def sde_preset(name: str, T: float = 1.0) -> SdePreset:
    if name == "brownian":
        return SdePreset(name, lambda x: np.zeros_like(x), 1.0, lambda x: np.exp(-0.5 * x * x),
                         lambda r, s: heat_gauss(r, T - s))
    if name == "ou":
        return SdePreset(name, lambda x: -x, 1.0, lambda x: np.asarray(x, dtype=float),
                         lambda r, s: r * np.exp(-(T - s)))
    if name == "transport":
        mu = 0.6
        return SdePreset(name, lambda x: -0.5 * x + 0.3, 0.0, lambda x: np.exp(-0.5 * x * x),
                         lambda r, s: np.exp(-0.5 * (mu + (r - mu) * np.exp(-0.5 * (T - s))) ** 2))
    raise ValueError(f"unknown SDE preset {name!r}; choose brownian, ou or transport")


@dataclass
class KolmogorovReport:
    preset: str
    r: np.ndarray
    s: np.ndarray
    residual: np.ndarray
    stderr: np.ndarray
    discretization: np.ndarray
    tolerance: np.ndarray
    value_error: float

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.residual) <= self.tolerance))

    @property
    def worst_ratio(self) -> float:
        return float(np.max(np.abs(self.residual) / self.tolerance))


def kolmogorov_check(preset: SdePreset, r: Sequence[float] = (-1.0, -0.5, 0.0, 0.5, 1.0),
                     s: Sequence[float] = (0.25, 0.5, 0.75), T: float = 1.0, dr: float = 0.1,
                     ds: float = 0.05, fine: float = 0.005, m: int = 10 ** 5, seed: int = 0) -> KolmogorovReport:
    """Monte-Carlo ``Phi(r, s) = E f(x(r, s, T))`` checked against the backward equation.

    ``Phi`` is sampled on the stencil ``(r +- dr, s +- ds)`` with common random
    numbers (paths started later reuse the final increments of earlier ones),
    and the residual ``d_s Phi + b^2 Phi_rr / 2 + a Phi_r`` is averaged per
    path. The tolerance is four standard errors plus the residual of the same
    stencil applied to the closed-form solution plus the Euler bias scale.
    """
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    nsteps = int(round(T / fine))
    hstep = T / nsteps
    starts_s = np.concatenate([s - ds, s, s + ds])
    idx = np.rint(starts_s / hstep).astype(int)
    if not np.allclose(idx * hstep, starts_s):
        raise ValueError("stencil times must lie on the fine simulation grid")
    rr = np.stack([r - dr, r, r + dr])          # (3, nr)
    m_chunk = 2 ** 14
    sums = np.zeros((len(s), len(r)))
    sq = np.zeros_like(sums)
    value_err = 0.0
    for lo in range(0, m, m_chunk):
        cnt = min(m_chunk, m - lo)
        dW = rng.normals(seed, cnt, nsteps, start=lo, stream=rng.STREAM_ORACLE) * math.sqrt(hstep)
        # state for every start time in the stencil and every r in the stencil
        X = np.empty((cnt, len(starts_s), 3, len(r)))
        X[:] = rr[None, None]
        for step in range(nsteps):
            active = idx <= step
            if not active.any():
                continue
            Xa = X[:, active]
            X[:, active] = Xa + preset.a(Xa) * hstep + preset.b * dW[:, step, None, None, None]
        F = preset.f(X)
        ns = len(s)
        F_lo, F_mid, F_hi = F[:, :ns], F[:, ns:2 * ns], F[:, 2 * ns:]
        ds_term = (F_hi[:, :, 1] - F_lo[:, :, 1]) / (2 * ds)
        rr_term = (F_mid[:, :, 2] - 2 * F_mid[:, :, 1] + F_mid[:, :, 0]) / (dr * dr)
        r_term = (F_mid[:, :, 2] - F_mid[:, :, 0]) / (2 * dr)
        res = ds_term + 0.5 * preset.b ** 2 * rr_term + preset.a(r)[None, None, :] * r_term
        sums += res.sum(axis=0)
        sq += (res * res).sum(axis=0)
    mean = sums / m
    se = np.sqrt(np.maximum(sq / m - mean * mean, 0.0) / max(m - 1, 1))
    # the same stencil on the exact solution measures the finite-difference error
    S, R = np.meshgrid(s, r, indexing="ij")
    E = preset.exact
    disc = ((E(R, S + ds) - E(R, S - ds)) / (2 * ds)
            + 0.5 * preset.b ** 2 * (E(R + dr, S) - 2 * E(R, S) + E(R - dr, S)) / dr ** 2
            + preset.a(R) * (E(R + dr, S) - E(R - dr, S)) / (2 * dr))
    euler = hstep * np.max(np.abs(E(R, S)))
    tol = 4 * se + np.abs(disc) + euler
    return KolmogorovReport(preset.name, r, s, mean, se, np.abs(disc) + euler, tol, value_err)


# consistency between the SPDE and the smoother --------------------------------------------------------

@dataclass
class ConsistencyReport:
    stats: dict
    diagnostics: dict
    passed: bool


def _reverse_path(u: np.ndarray) -> np.ndarray:
    """``u_rev(s) = u(T) - u(T - s)`` on the grid."""
    return u[..., -1:] - u[..., ::-1]


def consistency_check(model: SmoothingModel, t_query: float | None = None, seed: int = 0, K: int = 4,
                      mode: str = "auto", paths: int = 200, inner_m: int = 10 ** 4,
                      chaos_m: int = 10 ** 5, r_value: float = 0.0, field: SpdeField | None = None,
                      nsig: float = 4.0) -> ConsistencyReport:
    """Compare statistics of the normalized SPDE field with the Bayes smoother.

    The SPDE side is ``U(r0, T) / E(p | w2)`` as a function of the w2 path;
    the smoother side is ``psi(u)`` for ``u`` drawn from the law of ``w2``.
    Mean, variance and covariance with ``u(T)`` are compared with combined
    standard errors (the smoother variance is corrected for its inner
    Monte-Carlo noise). Pathwise discrepancies, against ``psi`` on the same
    path and on its time reversal, are reported as diagnostics.
    """
    cov = model.cov
    n = cov.n
    T = cov.grid.T
    if t_query is None:
        t_query = T
    if not math.isclose(t_query, T):
        raise ValueError("the field is compared on the full observation window")
    if field is None:
        field = solve_spde(model, K=K, seed=seed, mode=mode)
    ir = int(np.argmin(np.abs(model.r_grid - r_value)))
    if not math.isclose(model.r_grid[ir], r_value, abs_tol=1e-12):
        raise ValueError("r_value must be a point of r_grid")
    U = field.at(ir)
    P = field.normalizer
    sdt = math.sqrt(cov.grid.dt)

    def ratio(zeta):
        return ch.evaluate_many([U, P], zeta)

    # chaos side statistics on many independent w2 paths
    zc = rng.normals(seed + 1, chaos_m, n, stream=rng.STREAM_AUX)
    vals = ratio(zc)
    q = vals[:, 0] / vals[:, 1]
    uT = zc.sum(axis=1) * sdt
    chaos_stats = _moment_stats(q, uT)

    # smoother side on fewer paths
    zs = rng.normals(seed + 2, paths, n, stream=rng.STREAM_AUX)
    psi, psi_se, psi_rev = np.empty(paths), np.empty(paths), np.empty(paths)
    for j in range(paths):
        u = np.concatenate([[0.0], np.cumsum(zs[j]) * sdt])
        o = bayes_smoother(model, u, t_query, seed + 3, inner_m, start=j * inner_m)
        psi[j], psi_se[j] = o.psi, o.stderr
        psi_rev[j] = bayes_smoother(model, _reverse_path(u), t_query, seed + 3, inner_m, start=j * inner_m).psi
    uTs = zs.sum(axis=1) * sdt
    sm_stats = _moment_stats(psi, uTs, inner_var=float(np.mean(psi_se ** 2)))

    stats = {}
    ok = True
    for key in ("mean", "var", "cov_wT", "cov_wT2"):
        a, sa = chaos_stats[key]
        b, sb = sm_stats[key]
        comb = math.sqrt(sa * sa + sb * sb)
        good = abs(a - b) <= nsig * comb
        ok &= good
        stats[key] = {"spde": a, "spde_se": sa, "smoother": b, "smoother_se": sb,
                      "diff": a - b, "tolerance": nsig * comb, "pass": bool(good)}
    qs = ratio(zs)
    qs = qs[:, 0] / qs[:, 1]
    diag = {
        "rms_vs_same_path": float(np.sqrt(np.mean((qs - psi) ** 2))),
        "rms_vs_reversed_path": float(np.sqrt(np.mean((qs - psi_rev) ** 2))),
        "rms_inner_stderr": float(np.sqrt(np.mean(psi_se ** 2))),
        "mode": field.mode,
        "overflow_norm_sq": field.overflow_norm_sq,
    }
    return ConsistencyReport(stats, diag, bool(ok))


def _moment_stats(x: np.ndarray, w: np.ndarray, inner_var: float = 0.0) -> dict:
    """Mean, variance and covariance with ``w`` with delta-method standard errors."""
    m = len(x)
    mu = float(x.mean())
    xc = x - mu
    var = float(xc @ xc / (m - 1))
    wc = w - w.mean()
    cv = float(xc @ wc / (m - 1))
    se_mu = math.sqrt(var / m)
    se_var = float(np.std(xc * xc, ddof=1) / math.sqrt(m))
    se_cv = float(np.std(xc * wc, ddof=1) / math.sqrt(m))
    w2c = w * w - np.mean(w * w)
    cv2 = float(xc @ w2c / (m - 1))
    se_cv2 = float(np.std(xc * w2c, ddof=1) / math.sqrt(m))
    return {"mean": (mu, se_mu), "var": (var - inner_var, se_var), "cov_wT": (cv, se_cv),
            "cov_wT2": (cv2, se_cv2)}
