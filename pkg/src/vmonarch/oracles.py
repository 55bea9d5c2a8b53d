"""Slow dense reference implementations.

Everything here is O(N^2) and runs in float64 regardless of input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .monarch import MonarchFactors
from .tensor_core import F64, Mat, as_mat, xlogx

MAX_ORACLE_N = 8192


@dataclass
class DenseAttnResult:
    output: Mat
    probs: Mat
    logsumexp: np.ndarray
    entropy: np.ndarray


def _scores(Q: Mat, K: Mat, scale: bool) -> Mat:
    s = Q @ K.T
    if scale:
        s = s * (1.0 / np.sqrt(Q.shape[1]))
    return s


def dense_attention(Q, K, V, scale: bool = True) -> DenseAttnResult:
    """softmax(Q K^T s) V with s = 1/sqrt(d) when ``scale`` is set, else 1."""
    Q = as_mat(Q, F64, "Q")
    K = as_mat(K, F64, "K")
    V = as_mat(V, F64, "V")
    if Q.shape[1] != K.shape[1]:
        raise DimensionError(f"Q has d={Q.shape[1]} but K has d={K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise DimensionError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
    if K.shape[0] == 0:
        raise DimensionError("attention over zero keys")
    s = _scores(Q, K, scale)
    mx = s.max(axis=1, keepdims=True)
    e = np.exp(s - mx)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    lse = (mx + np.log(z))[:, 0]
    ent = -xlogx(p).sum(axis=1)
    return DenseAttnResult(output=p @ V, probs=p, logsumexp=lse, entropy=ent)


def variational_objective(A, S, tol: float = 1e-4) -> float:
    """<A, S> + H(A) for a row-stochastic A."""
    A = np.asarray(A, dtype=F64)
    S = np.asarray(S, dtype=F64)
    if A.shape != S.shape or A.ndim != 2:
        raise DimensionError(f"A {A.shape} and S {S.shape} must be equal 2-D shapes")
    if np.any(A < -tol):
        raise DomainError(f"A has negative entries (min {A.min():.3g})")
    dev = np.max(np.abs(A.sum(axis=1) - 1.0))
    if dev > tol:
        raise DomainError(f"A is not row-stochastic: worst row-sum deviation {dev:.3g}")
    return float(np.sum(A * S) - np.sum(xlogx(np.clip(A, 0, None))))


def _check_factors(F: MonarchFactors, b: int, n: int) -> tuple[int, int]:
    if b < 1 or n % b:
        raise DimensionError(f"n={n} is not divisible by b={b}")
    m = n // b
    if F.L.shape != (b, m, m) or F.R.shape != (m, b, b):
        raise DimensionError(
            f"factors L{F.L.shape}, R{F.R.shape} do not match m={m}, b={b}"
        )
    return m, b


def materialize_monarch(F: MonarchFactors, b: int | None = None, n: int | None = None) -> Mat:
    """Dense n x n matrix with M[j*b + i, k*b + l] = L[i, j, k] * R[k, i, l]."""
    b = F.b if b is None else b
    n = F.n if n is None else n
    m, b = _check_factors(F, b, n)
    L = np.asarray(F.L, dtype=F64)
    R = np.asarray(F.R, dtype=F64)
    M = np.einsum("ijk,kil->jikl", L, R)
    return M.reshape(n, n)


def monarch_objective(F: MonarchFactors, Q, K, scale: bool = True) -> float:
    """<M, S> + H(M) for M = materialize_monarch(F), without forming M.

    Uses the block identity M[(j,i),(k,l)] = L[i,j,k] R[k,i,l] so the inner
    product collapses to sums over (i, k) of aggregated query/key vectors.
    """
    Q = as_mat(Q, F64, "Q")
    K = as_mat(K, F64, "K")
    if Q.shape != K.shape:
        raise DimensionError(f"Q {Q.shape} and K {K.shape} must match")
    m, b = _check_factors(F, F.b, Q.shape[0])
    if scale:
        Q = Q * (1.0 / np.sqrt(Q.shape[1]))
    L = np.asarray(F.L, dtype=F64)
    R = np.asarray(F.R, dtype=F64)
    Qb = Q.reshape(m, b, -1)  # [j, i]
    Kb = K.reshape(m, b, -1)  # [k, l]
    q_agg = np.einsum("ijk,jiv->kiv", L, Qb)
    k_agg = np.einsum("kil,klv->kiv", R, Kb)
    inner = np.sum(q_agg * k_agg)
    r_mass = R.sum(axis=2)  # [k, i]
    l_mass = L.sum(axis=1)  # [i, k]
    ent_l = -np.einsum("ijk,ki->", xlogx(L), r_mass)
    ent_r = -np.einsum("ik,ki->", l_mass, xlogx(R).sum(axis=2))
    return float(inner + ent_l + ent_r)
