"""Finite-dimensional Wiener chaos algebra.

A square-integrable functional of a standard Gaussian vector ``z`` in ``R^d``
is stored through its chaos decomposition

    alpha = sum_k A_k(z, ..., z),

where ``A_k`` is a symmetric k-tensor and ``A_k(z, ..., z)`` denotes the
Hermite (Wick) polynomial ``sum_{i} A_k[i_1..i_k] :z_{i_1} ... z_{i_k}:``.
Symmetric tensors are kept in compressed form: one entry per non-decreasing
multi-index, ordered by colex rank (see :class:`Layout`). All maps below act
exactly on these coefficients.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations, combinations_with_replacement
from typing import Callable, Sequence

import numpy as np

from . import rng

CONTRACTION_TOL = 1e-10
_FEATURE_CHUNK = 4096

_binom = np.ones((1, 1), dtype=np.int64)


def _binom_table(amax: int, bmax: int) -> np.ndarray:
    global _binom
    if _binom.shape[0] > amax and _binom.shape[1] > bmax:
        return _binom
    A, B = max(amax + 1, _binom.shape[0]), max(bmax + 1, _binom.shape[1])
    T = np.zeros((A, B), dtype=np.int64)
    T[:, 0] = 1
    for a in range(1, A):
        T[a, 1:] = T[a - 1, 1:] + T[a - 1, :-1]
    _binom = T
    return T


def rank(idx: np.ndarray) -> np.ndarray:
    """Colex rank of sorted multi-indices ``idx[..., k]``."""
    idx = np.asarray(idx)
    k = idx.shape[-1]
    if k == 0:
        return np.zeros(idx.shape[:-1], dtype=np.intp)
    shifted = idx + np.arange(k)
    T = _binom_table(int(shifted.max(initial=0)), k)
    out = np.zeros(idx.shape[:-1], dtype=np.int64)
    for l in range(k):
        out += T[shifted[..., l], l + 1]
    return out.astype(np.intp)


class Layout:
    """Compressed storage of symmetric k-tensors over ``d`` coordinates."""

    def __init__(self, d: int, k: int):
        self.d, self.k = d, k
        if k == 0:
            reps = np.zeros((1, 0), dtype=np.intp)
        else:
            reps = np.array(list(combinations_with_replacement(range(d), k)), dtype=np.intp)
            reps = reps[np.argsort(rank(reps))]
        self.reps = reps
        self.size = len(reps)
        eq = reps[:, :, None] == reps[:, None, :]
        counts = eq.sum(axis=-1)
        first = np.ones(reps.shape, dtype=bool)
        if k > 1:
            first[:, 1:] = reps[:, 1:] != reps[:, :-1]
        self.powers = np.where(first, counts, 0)
        fact = np.array([math.factorial(int(c)) for c in range(k + 1)], dtype=float)
        self.multfact = np.prod(fact[self.powers], axis=1) if k else np.ones(1)
        self.mult = math.factorial(k) / self.multfact
        self._drop = None
        self._add = None
        self._full = None

    @property
    def drop(self) -> np.ndarray:
        """``drop[J, p]``: rank (degree k-1) of rep ``J`` with position ``p`` removed."""
        if self._drop is None:
            cols = [rank(np.delete(self.reps, p, axis=1)) for p in range(self.k)]
            self._drop = np.stack(cols, axis=1) if cols else np.zeros((self.size, 0), dtype=np.intp)
        return self._drop

    @property
    def add(self) -> np.ndarray:
        """``add[I, h]``: rank (degree k+1) of rep ``I`` with coordinate ``h`` inserted."""
        if self._add is None:
            h = np.broadcast_to(np.arange(self.d)[None, :, None], (self.size, self.d, 1))
            r = np.broadcast_to(self.reps[:, None, :], (self.size, self.d, self.k))
            self._add = rank(np.sort(np.concatenate([r, h], axis=-1), axis=-1))
        return self._add

    @property
    def full_ranks(self) -> np.ndarray:
        """Compressed position of every entry of the full ``d^k`` tensor."""
        if self._full is None:
            if self.k == 0:
                self._full = np.zeros(1, dtype=np.intp)
            else:
                idx = np.indices((self.d,) * self.k).reshape(self.k, -1).T
                self._full = rank(np.sort(idx, axis=1))
        return self._full

    @property
    def full_positions(self) -> np.ndarray:
        """Flat index (in the full tensor) of each representative."""
        return np.ravel_multi_index(self.reps.T, (self.d,) * self.k) if self.k else np.zeros(1, dtype=np.intp)


@lru_cache(maxsize=None)
def layout(d: int, k: int) -> Layout:
    return Layout(d, k)


def hermite_table(x: np.ndarray, K: int) -> np.ndarray:
    """Probabilists' Hermite polynomials ``He_0 .. He_K`` at ``x`` (last axis new)."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (K + 1,))
    out[..., 0] = 1.0
    if K >= 1:
        out[..., 1] = x
    for m in range(1, K):
        out[..., m + 1] = x * out[..., m] - m * out[..., m - 1]
    return out


def hermite_features(dim: int, K: int, z: np.ndarray) -> list[np.ndarray]:
    """Basis values ``H_I(z) = prod_j He_{m_j}(z_j)`` for every rep, per degree."""
    z = np.atleast_2d(z)
    He = hermite_table(z, K)
    feats = []
    for k in range(K + 1):
        L = layout(dim, k)
        f = np.ones((z.shape[0], L.size))
        for l in range(k):
            f *= He[:, L.reps[:, l], L.powers[:, l]]
        feats.append(f)
    return feats


@dataclass(eq=False)
class ChaosVector:
    """Truncated chaos expansion of a real random variable.

    ``coeffs[k]`` holds the compressed degree-k tensor. ``basis`` records which
    standard Gaussian coordinates the tensors refer to (``"xi_prime"`` for the
    whitened 2n-dimensional element, ``"w2"`` for the normalized increments of
    the second component). ``tail_norm_sq`` carries the squared chaos norm that
    was dropped by truncation, when known.
    """

    dim: int
    coeffs: list
    basis: str = "xi_prime"
    tail_norm_sq: float = 0.0
    stderr: list | None = field(default=None, repr=False)
    flags: tuple = ()

    def __post_init__(self):
        self.coeffs = [np.asarray(c, dtype=float) for c in self.coeffs]
        if not self.coeffs:
            self.coeffs = [np.zeros(1)]
        for k, c in enumerate(self.coeffs):
            if c.shape != (layout(self.dim, k).size,):
                raise ValueError(f"degree {k} coefficients must have length {layout(self.dim, k).size}")

    @property
    def K(self) -> int:
        return len(self.coeffs) - 1

    @property
    def mean(self) -> float:
        return float(self.coeffs[0][0])

    @property
    def degree(self) -> int:
        for k in range(self.K, -1, -1):
            if np.any(self.coeffs[k] != 0):
                return k
        return 0

    def degree_norms_sq(self) -> np.ndarray:
        return np.array([math.factorial(k) * np.dot(layout(self.dim, k).mult, c * c)
                         for k, c in enumerate(self.coeffs)])

    def padded(self, K: int) -> "ChaosVector":
        if K <= self.K:
            return self
        extra = [np.zeros(layout(self.dim, k).size) for k in range(self.K + 1, K + 1)]
        return ChaosVector(self.dim, list(self.coeffs) + extra, self.basis, self.tail_norm_sq)

    def truncated(self, K: int) -> "ChaosVector":
        """Drop degrees above ``K``, adding their mass to ``tail_norm_sq``."""
        if K >= self.K:
            return self
        dropped = float(self.degree_norms_sq()[K + 1:].sum())
        return ChaosVector(self.dim, self.coeffs[:K + 1], self.basis, self.tail_norm_sq + dropped)

    def _binary(self, other, op):
        if isinstance(other, ChaosVector):
            _check_compatible(self, other)
            K = max(self.K, other.K)
            a, b = self.padded(K), other.padded(K)
            return ChaosVector(self.dim, [op(x, y) for x, y in zip(a.coeffs, b.coeffs)], self.basis)
        out = [c.copy() for c in self.coeffs]
        out[0] = op(out[0], float(other))
        return ChaosVector(self.dim, out, self.basis)

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __neg__(self):
        return ChaosVector(self.dim, [-c for c in self.coeffs], self.basis)

    def __mul__(self, s):
        if isinstance(s, ChaosVector):
            return multiply(self, s)
        return ChaosVector(self.dim, [s * c for c in self.coeffs], self.basis, self.tail_norm_sq * s * s)

    __rmul__ = __mul__

    def full(self, k: int) -> np.ndarray:
        """Degree-k tensor expanded to shape ``(dim,) * k``."""
        L = layout(self.dim, k)
        return self.coeffs[k][L.full_ranks].reshape((self.dim,) * k)

    def to_dict(self) -> dict:
        return {
            "format": "chaos-vector/1",
            "layout": "non-decreasing multi-index, colex rank",
            "dim": self.dim,
            "max_degree": self.K,
            "basis": self.basis,
            "tail_norm_sq": self.tail_norm_sq,
            "coeffs": [c.tolist() for c in self.coeffs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ChaosVector":
        if data.get("format") != "chaos-vector/1":
            raise ValueError("not a serialized chaos vector")
        v = cls(int(data["dim"]), [np.array(c, dtype=float) for c in data["coeffs"]],
                data.get("basis", "xi_prime"), float(data.get("tail_norm_sq", 0.0)))
        if v.K != data["max_degree"]:
            raise ValueError("max_degree does not match the stored coefficients")
        return v

    @classmethod
    def from_json(cls, text: str) -> "ChaosVector":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_full(cls, tensors: Sequence, basis: str = "xi_prime", atol: float = 1e-12) -> "ChaosVector":
        """Build from full tensors; each must already be symmetric."""
        tensors = [np.asarray(t, dtype=float) for t in tensors]
        dim = tensors[1].shape[0] if len(tensors) > 1 else 1
        coeffs = []
        for k, t in enumerate(tensors):
            if k == 0:
                coeffs.append(t.reshape(1))
                continue
            L = layout(dim, k)
            flat = t.ravel()
            comp = flat[L.full_positions]
            if np.abs(comp[L.full_ranks] - flat).max() > atol:
                raise ValueError(f"degree {k} tensor is not symmetric")
            coeffs.append(comp)
        return cls(dim, coeffs, basis)


def _check_compatible(a: ChaosVector, b: ChaosVector):
    if a.dim != b.dim or a.basis != b.basis:
        raise ValueError(f"incompatible chaos vectors: dim {a.dim}/{b.dim}, basis {a.basis}/{b.basis}")


@dataclass(eq=False)
class VectorChaos:
    """H-valued random element: ``coeffs[k][h]`` is component ``h`` at degree k."""

    dim: int
    coeffs: list
    basis: str = "xi_prime"

    def __post_init__(self):
        self.coeffs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in self.coeffs]
        m = self.coeffs[0].shape[0]
        for k, c in enumerate(self.coeffs):
            if c.shape != (m, layout(self.dim, k).size):
                raise ValueError(f"degree {k} block must have shape ({m}, {layout(self.dim, k).size})")

    @classmethod
    def from_components(cls, comps: Sequence[ChaosVector]) -> "VectorChaos":
        K = max(c.K for c in comps)
        comps = [c.padded(K) for c in comps]
        for c in comps[1:]:
            _check_compatible(comps[0], c)
        return cls(comps[0].dim, [np.stack([c.coeffs[k] for c in comps]) for k in range(K + 1)],
                   comps[0].basis)

    @property
    def size(self) -> int:
        return self.coeffs[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.coeffs) - 1

    def component(self, h: int) -> ChaosVector:
        return ChaosVector(self.dim, [c[h] for c in self.coeffs], self.basis)

    def components(self) -> list[ChaosVector]:
        return [self.component(h) for h in range(self.size)]

    @property
    def mean(self) -> np.ndarray:
        return self.coeffs[0][:, 0].copy()

    def norm_sq(self) -> float:
        return float(sum(math.factorial(k) * np.einsum("hi,i,hi->", c, layout(self.dim, k).mult, c)
                         for k, c in enumerate(self.coeffs)))

    def apply_matrix(self, M: np.ndarray) -> "VectorChaos":
        """Deterministic linear map on the H index: ``(Mx)_h = sum_j M[h, j] x_j``."""
        M = np.asarray(M, dtype=float)
        return VectorChaos(self.dim, [M @ c for c in self.coeffs], self.basis)

    def padded(self, K: int) -> "VectorChaos":
        if K <= self.K:
            return self
        extra = [np.zeros((self.size, layout(self.dim, k).size)) for k in range(self.K + 1, K + 1)]
        return VectorChaos(self.dim, list(self.coeffs) + extra, self.basis)

    def __add__(self, other: "VectorChaos") -> "VectorChaos":
        K = max(self.K, other.K)
        a, b = self.padded(K), other.padded(K)
        return VectorChaos(self.dim, [x + y for x, y in zip(a.coeffs, b.coeffs)], self.basis)

    def __sub__(self, other: "VectorChaos") -> "VectorChaos":
        return self + other.scaled(-1.0)

    def scaled(self, s: float) -> "VectorChaos":
        return VectorChaos(self.dim, [s * c for c in self.coeffs], self.basis)


# constructors -----------------------------------------------------------------

def constant(c: float, dim: int, basis: str = "xi_prime") -> ChaosVector:
    return ChaosVector(dim, [np.array([float(c)])], basis)


def first_chaos(vec, basis: str = "xi_prime") -> ChaosVector:
    """The Gaussian variable ``(vec, z)``."""
    vec = np.asarray(vec, dtype=float)
    return ChaosVector(len(vec), [np.zeros(1), vec.copy()], basis)


def deterministic_element(phi: np.ndarray, dim: int, basis: str = "xi_prime") -> VectorChaos:
    """A non-random H element ``phi`` viewed as a VectorChaos."""
    phi = np.asarray(phi, dtype=float)
    return VectorChaos(dim, [phi[:, None]], basis)


def exp_vector(phi, K: int, basis: str = "xi_prime") -> ChaosVector:
    """Chaos of ``exp((phi, z) - |phi|^2 / 2)`` truncated at degree ``K``.

    The degree-k tensor is ``phi^{(x)k} / k!``; the exact truncated mass
    ``sum_{k > K} |phi|^{2k} / k!`` is stored in ``tail_norm_sq``.
    """
    phi = np.asarray(phi, dtype=float)
    d = len(phi)
    coeffs = []
    for k in range(K + 1):
        L = layout(d, k)
        coeffs.append(np.prod(phi[L.reps], axis=1) / math.factorial(k) if k else np.ones(1))
    s = float(phi @ phi)
    tail, term, k = 0.0, 1.0, 0
    for j in range(1, K + 1):
        term *= s / j
    k = K
    while True:
        k += 1
        term *= s / k
        tail += term
        if term <= 1e-18 * max(tail, 1e-300) or k > K + 500:
            break
    return ChaosVector(d, coeffs, basis, tail_norm_sq=tail if s > 0 else 0.0)


def random_chaos(dim: int, degrees: Sequence[int] | int, gen: np.random.Generator,
                 basis: str = "xi_prime") -> ChaosVector:
    """Random polynomial functional; each listed degree carries unit chaos norm on average."""
    if isinstance(degrees, int):
        degrees = range(degrees + 1)
    degrees = list(degrees)
    K = max(degrees)
    coeffs = []
    for k in range(K + 1):
        L = layout(dim, k)
        if k in degrees:
            scale = 1.0 / math.sqrt(math.factorial(k) * L.mult.sum())
            coeffs.append(gen.standard_normal(L.size) * scale)
        else:
            coeffs.append(np.zeros(L.size))
    return ChaosVector(dim, coeffs, basis)


# evaluation, expansion and norms -------------------------------------------------------------

def evaluate(v: ChaosVector, z) -> np.ndarray | float:
    """Value of ``v`` at the point(s) ``z`` (shape ``(dim,)`` or ``(m, dim)``)."""
    if v.basis == "xi":
        raise ValueError("convert to whitened coordinates before evaluating")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    if z.shape[-1] != v.dim:
        raise ValueError(f"point must have {v.dim} coordinates")
    out = evaluate_many([v], np.atleast_2d(z))[:, 0]
    return float(out[0]) if single else out


def evaluate_many(vs: Sequence[ChaosVector], z: np.ndarray) -> np.ndarray:
    """Evaluate several vectors of equal dimension at ``z``; returns ``(m, len(vs))``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    dim, K = vs[0].dim, max(v.K for v in vs)
    stacked = [np.stack([v.padded(K).coeffs[k] * layout(dim, k).mult for v in vs], axis=1)
               for k in range(K + 1)]
    out = np.zeros((z.shape[0], len(vs)))
    for lo in range(0, z.shape[0], _FEATURE_CHUNK):
        feats = hermite_features(dim, K, z[lo:lo + _FEATURE_CHUNK])
        out[lo:lo + _FEATURE_CHUNK] = sum(f @ c for f, c in zip(feats, stacked))
    return out


def norm_sq(v) -> float:
    """Squared chaos norm ``sum_k k! ||A_k||^2`` (summed over components for H-valued input)."""
    if isinstance(v, VectorChaos):
        return v.norm_sq()
    return float(v.degree_norms_sq().sum())


def inner(a: ChaosVector, b: ChaosVector) -> float:
    """``E[a b]`` from the coefficients alone."""
    _check_compatible(a, b)
    K = min(a.K, b.K)
    return float(sum(math.factorial(k) * np.dot(layout(a.dim, k).mult, a.coeffs[k] * b.coeffs[k])
                     for k in range(K + 1)))


def expand(sampler: Callable[[np.ndarray], np.ndarray], dim: int, K: int, m: int, seed: int,
           basis: str = "xi_prime") -> ChaosVector:
    """Monte-Carlo Hermite projection ``A_k[I] = E[alpha H_I(z)] / k!``.

    ``sampler`` maps an ``(m, dim)`` array of standard normal points to the
    values of the functional. Per-coefficient standard errors are attached as
    ``stderr``; a near-constant sampler raises the ``"degenerate-variance"``
    flag.
    """
    if m < 1000:
        raise ValueError("Monte-Carlo projection needs at least 1000 samples")
    sums = [np.zeros(layout(dim, k).size) for k in range(K + 1)]
    sq = [np.zeros_like(s) for s in sums]
    total, total_sq = 0.0, 0.0
    for lo in range(0, m, _FEATURE_CHUNK):
        cnt = min(_FEATURE_CHUNK, m - lo)
        z = rng.normals(seed, cnt, dim, start=lo, stream=rng.STREAM_CHAOS)
        vals = np.asarray(sampler(z), dtype=float).reshape(cnt)
        total += vals.sum()
        total_sq += (vals * vals).sum()
        for k, f in enumerate(hermite_features(dim, K, z)):
            prod = vals[:, None] * f
            sums[k] += prod.sum(axis=0)
            sq[k] += (prod * prod).sum(axis=0)
    coeffs, errs = [], []
    for k in range(K + 1):
        mean = sums[k] / m
        var = np.maximum(sq[k] / m - mean * mean, 0.0)
        coeffs.append(mean / math.factorial(k))
        errs.append(np.sqrt(var / m) / math.factorial(k))
    flags = ()
    variance = total_sq / m - (total / m) ** 2
    if variance <= 1e-12 * max(1.0, (total / m) ** 2):
        flags = ("degenerate-variance",)
    return ChaosVector(dim, coeffs, basis, stderr=errs, flags=flags)


# Malliavin calculus ---------------------------------------------------------------------

def derivative(v: ChaosVector) -> VectorChaos:
    """Malliavin derivative: component ``h`` at degree k-1 is ``k A_k(e_h, ...)``."""
    d = v.dim
    if v.K == 0:
        return VectorChaos(d, [np.zeros((d, 1))], v.basis)
    blocks = []
    for k in range(1, v.K + 1):
        add = layout(d, k - 1).add
        blocks.append((k * v.coeffs[k][add]).T)
    return VectorChaos(d, blocks, v.basis)


def directional_derivative(x, h: np.ndarray):
    """``(Dx, h)``: derivative of a scalar or H-valued element along deterministic ``h``."""
    h = np.asarray(h, dtype=float)
    if isinstance(x, ChaosVector):
        Dx = derivative(x)
        return ChaosVector(x.dim, [h @ c for c in Dx.coeffs], x.basis)
    blocks = []
    for k in range(1, x.K + 1):
        add = layout(x.dim, k - 1).add
        blocks.append(k * np.einsum("mih,h->mi", x.coeffs[k][:, add], h))
    if not blocks:
        blocks = [np.zeros((x.size, 1))]
    return VectorChaos(x.dim, blocks, x.basis)


def divergence(x: VectorChaos) -> ChaosVector:
    """Skorokhod divergence: degree k+1 output is the full symmetrization of the inputs."""
    d = x.dim
    if x.size != d:
        raise ValueError(f"divergence needs an element with {d} components, got {x.size}")
    coeffs = [np.zeros(1)]
    for k, X in enumerate(x.coeffs):
        L = layout(d, k + 1)
        acc = np.zeros(L.size)
        for p in range(k + 1):
            acc += X[L.reps[:, p], L.drop[:, p]]
        coeffs.append(acc / (k + 1))
    return ChaosVector(d, coeffs, x.basis)


def _sym_contract(A: np.ndarray, a: int, B: np.ndarray, b: int, r: int, d: int) -> np.ndarray:
    """Compressed ``Sym(A contracted with B over r slots)`` of degree ``a + b - 2r``."""
    q = a + b - 2 * r
    out_L = layout(d, q)
    J = out_L.reps
    Lr = layout(d, r)
    acc = np.zeros(out_L.size)
    subsets = list(combinations(range(q), a - r))
    for S in subsets:
        Sc = [p for p in range(q) if p not in S]
        JS = np.broadcast_to(J[:, None, list(S)], (out_L.size, Lr.size, a - r))
        JSc = np.broadcast_to(J[:, None, Sc], (out_L.size, Lr.size, b - r))
        Lb = np.broadcast_to(Lr.reps[None, :, :], (out_L.size, Lr.size, r))
        ia = rank(np.sort(np.concatenate([JS, Lb], axis=-1), axis=-1))
        ib = rank(np.sort(np.concatenate([Lb, JSc], axis=-1), axis=-1))
        acc += (A[ia] * B[ib]) @ Lr.mult
    return acc / len(subsets)


def wick_product(a: ChaosVector, b: ChaosVector, capacity: int | None = None) -> ChaosVector:
    """Wick product: degree j+k part is the symmetrized tensor product ``A_j (x) B_k``.

    With ``capacity`` set, degrees above it are dropped and their norm is added
    to ``tail_norm_sq``.
    """
    _check_compatible(a, b)
    d = a.dim
    top = a.K + b.K
    K = top if capacity is None else min(top, capacity)
    coeffs = [np.zeros(layout(d, q).size) for q in range(top + 1)]
    for j, A in enumerate(a.coeffs):
        if not np.any(A):
            continue
        for k, B in enumerate(b.coeffs):
            if np.any(B) and (j + k <= K or capacity is not None):
                coeffs[j + k] += _sym_contract(A, j, B, k, 0, d)
    out = ChaosVector(d, coeffs, a.basis)
    if capacity is not None and top > capacity:
        out = out.truncated(capacity)
        if out.tail_norm_sq > 0:
            warnings.warn(f"Wick product exceeded degree {capacity}; truncated mass {out.tail_norm_sq:.3e}",
                          RuntimeWarning, stacklevel=2)
    return out


def multiply(a: ChaosVector, b: ChaosVector, capacity: int | None = None) -> ChaosVector:
    """Ordinary (pointwise) product via the Hermite product formula."""
    _check_compatible(a, b)
    d = a.dim
    top = a.degree + b.degree
    coeffs = [np.zeros(layout(d, q).size) for q in range(top + 1)]
    for j in range(a.degree + 1):
        A = a.coeffs[j]
        if not np.any(A):
            continue
        for k in range(b.degree + 1):
            B = b.coeffs[k]
            if not np.any(B):
                continue
            for r in range(min(j, k) + 1):
                w = math.factorial(r) * math.comb(j, r) * math.comb(k, r)
                coeffs[j + k - 2 * r] += w * _sym_contract(A, j, B, k, r, d)
    out = ChaosVector(d, coeffs, a.basis)
    if capacity is not None:
        out = out.truncated(capacity)
    return out


def pairing(x: VectorChaos, y: VectorChaos) -> ChaosVector:
    """Pointwise H inner product ``(x, y) = sum_h x_h y_h``."""
    if x.size != y.size:
        raise ValueError("H-valued elements of different length")
    terms = [multiply(x.component(h), y.component(h)) for h in range(x.size)]
    K = max(t.K for t in terms)
    return ChaosVector(x.dim, [sum(t.padded(K).coeffs[k] for t in terms) for k in range(K + 1)], x.basis)


def scalar_times(alpha: ChaosVector, x: VectorChaos) -> VectorChaos:
    """Pointwise product of a random scalar with each component of ``x``."""
    return VectorChaos.from_components([multiply(alpha, c) for c in x.components()])


# second quantization ------------------------------------------------------------------------

def substitute(v, M: np.ndarray):
    """Replace the argument ``z`` by ``M z`` in every tensor: ``A_k(M., ..., M.)``."""
    M = np.asarray(M, dtype=float)
    if isinstance(v, VectorChaos):
        return VectorChaos.from_components([substitute(c, M) for c in v.components()])
    d_in = v.dim
    if M.shape[0] != d_in:
        raise ValueError(f"matrix must have {d_in} rows")
    d_out = M.shape[1]
    coeffs = [v.coeffs[0].copy()]
    for k in range(1, v.K + 1):
        T = v.full(k)
        for _ in range(k):
            T = np.tensordot(T, M, axes=([0], [0]))
        coeffs.append(T.ravel()[layout(d_out, k).full_positions])
    return ChaosVector(d_out, coeffs, v.basis)


def second_quantization(C: np.ndarray, v):
    """``Gamma(C)``: contract every tensor slot with the contraction ``C``."""
    C = np.asarray(C, dtype=float)
    norm = np.linalg.norm(C, 2)
    if norm > 1.0 + CONTRACTION_TOL:
        raise ValueError(f"second quantization needs ||C|| <= 1, got {norm:.12g}")
    return substitute(v, C)


def to_xi_basis(v: ChaosVector, S_inv_half: np.ndarray) -> ChaosVector:
    """Rewrite tensors in terms of the correlated element ``xi = S^{1/2} xi_prime``."""
    out = substitute(v, S_inv_half)
    out.basis = "xi"
    return out


def to_xi_prime_basis(v: ChaosVector, S_half: np.ndarray) -> ChaosVector:
    out = substitute(v, S_half)
    out.basis = "xi_prime"
    return out
