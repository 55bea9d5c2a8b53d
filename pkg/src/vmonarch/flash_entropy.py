"""Tiled attention that also returns per-row Shannon entropy in one pass.

The forward pass keeps three running statistics per query row on top of the
output accumulator: the running max ``m``, the rescaled normalizer ``l`` and
``h = sum_j exp(s_j - m) * (s_j - m)``. When the max grows by ``-log(alpha)``
the old sums are rescaled by ``alpha`` and ``h`` picks up ``alpha*log(alpha)*l``.
At the end ``H = log(l) - h / l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .tensor_core import Mat, mm


@dataclass(frozen=True)
class TileConfig:
    b_r: int = 64
    b_c: int = 64

    def __post_init__(self):
        if self.b_r < 1 or self.b_c < 1:
            raise DomainError(f"tile sizes must be >= 1, got ({self.b_r}, {self.b_c})")


@dataclass
class StreamRowState:
    """Running statistics for a group of query rows."""

    run_max: np.ndarray
    norm_sum: np.ndarray
    ent_acc: np.ndarray
    out_acc: np.ndarray | None = None

    @classmethod
    def empty(cls, rows: int, d: int | None = None, dtype=np.float64) -> "StreamRowState":
        return cls(
            run_max=np.full(rows, -np.inf, dtype=dtype),
            norm_sum=np.zeros(rows, dtype=dtype),
            ent_acc=np.zeros(rows, dtype=dtype),
            out_acc=None if d is None else np.zeros((rows, d), dtype=dtype),
        )

    def update(self, scores: np.ndarray, values: np.ndarray | None = None) -> None:
        """Fold one tile of scores (rows x cols) and its value rows into the state."""
        new_max = np.maximum(self.run_max, scores.max(axis=1))
        shifted = scores - new_max[:, None]
        p = np.exp(shifted)
        log_alpha = self.run_max - new_max
        # first tile: alpha = exp(-inf) = 0 and the alpha*log(alpha) term vanishes
        log_alpha[~np.isfinite(log_alpha)] = 0
        alpha = np.where(np.isfinite(self.run_max), np.exp(log_alpha), 0).astype(p.dtype)
        # log p is exactly the shifted score, so no log of underflowed zeros
        self.ent_acc = alpha * self.ent_acc + alpha * log_alpha * self.norm_sum + np.sum(
            p * shifted, axis=1
        )
        self.norm_sum = alpha * self.norm_sum + p.sum(axis=1)
        if values is not None:
            self.out_acc = alpha[:, None] * self.out_acc + mm(p, values)
        self.run_max = new_max

    def entropy(self) -> np.ndarray:
        return np.log(self.norm_sum) - self.ent_acc / self.norm_sum

    def logsumexp(self) -> np.ndarray:
        return self.run_max + np.log(self.norm_sum)

    def output(self) -> np.ndarray:
        return self.out_acc / self.norm_sum[:, None]


def stream_entropy(x) -> tuple[float, float, float, float]:
    """Element-at-a-time online entropy of softmax(x).

    Returns (run_max, norm_sum, ent_acc, entropy).
    """
    m, s, acc = -math.inf, 0.0, 0.0
    for xi in np.asarray(x, dtype=np.float64).ravel():
        xi = float(xi)
        new_m = max(m, xi)
        p = math.exp(xi - new_m)
        if m == -math.inf:
            acc, s = p * (xi - new_m), p
        else:
            log_a = m - new_m
            a = math.exp(log_a)
            acc = acc * a + s * a * log_a + p * (xi - new_m)
            s = s * a + p
        m = new_m
    if s == 0.0:
        raise DimensionError("entropy of an empty vector")
    return m, s, acc, math.log(s) - acc / s


def _check_qkv(Q, K, V):
    Q, K, V = (np.asarray(a) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise DimensionError("Q, K, V must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise DimensionError(f"Q has d={Q.shape[1]} but K has d={K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise DimensionError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
    if K.shape[0] == 0:
        raise DomainError("attention over an empty key set")
    dtype = np.result_type(Q, K, V, np.float32)
    return Q.astype(dtype, copy=False), K.astype(dtype, copy=False), V.astype(dtype, copy=False)


def flash_entropy_fwd(Q, K, V, cfg: TileConfig = TileConfig()) -> tuple[Mat, np.ndarray, np.ndarray]:
    """Single-pass tiled attention returning (O, logsumexp, entropy).

    Q must already carry the attention scale; scores are Q @ K.T.
    """
    Q, K, V = _check_qkv(Q, K, V)
    nq, nk = Q.shape[0], K.shape[0]
    O = np.empty((nq, V.shape[1]), dtype=Q.dtype)
    lse = np.empty(nq, dtype=Q.dtype)
    H = np.empty(nq, dtype=Q.dtype)
    for r0 in range(0, nq, cfg.b_r):
        r1 = min(r0 + cfg.b_r, nq)
        q = Q[r0:r1]
        st = StreamRowState.empty(r1 - r0, V.shape[1], Q.dtype)
        for c0 in range(0, nk, cfg.b_c):
            c1 = min(c0 + cfg.b_c, nk)
            st.update(mm(q, K[c0:c1].T), V[c0:c1])
        O[r0:r1] = st.output()
        lse[r0:r1] = st.logsumexp()
        H[r0:r1] = st.entropy()
    return O, lse, H


def flash_entropy_bwd(
    Q, K, V, O, dO, lse, H, dH=None, entropy_grad: bool = False,
    cfg: TileConfig = TileConfig(),
) -> tuple[Mat, Mat, Mat]:
    """Tiled backward pass for :func:`flash_entropy_fwd`.

    Gradients are with respect to the (pre-scaled) Q, K and V of the loss
    ``<dO, O> + <dH, H>``; the entropy term is only included when
    ``entropy_grad`` is set.
    """
    Q, K, V = _check_qkv(Q, K, V)
    dt = Q.dtype
    O = np.asarray(O, dtype=dt)
    dO = np.asarray(dO, dtype=dt)
    lse = np.asarray(lse, dtype=dt)
    H = np.asarray(H, dtype=dt)
    nq, nk = Q.shape[0], K.shape[0]
    if O.shape != (nq, V.shape[1]) or dO.shape != O.shape:
        raise DimensionError(f"O/dO must have shape {(nq, V.shape[1])}")
    if lse.shape != (nq,) or H.shape != (nq,):
        raise DimensionError(f"lse and H must have length {nq}")
    if entropy_grad:
        if dH is None:
            raise DimensionError("entropy_grad requires dH")
        dH = np.asarray(dH, dtype=dt)
        if dH.shape != (nq,):
            raise DimensionError(f"dH must have length {nq}")

    D = np.sum(dO * O, axis=1)
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    for c0 in range(0, nk, cfg.b_c):
        c1 = min(c0 + cfg.b_c, nk)
        k, v = K[c0:c1], V[c0:c1]
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        for r0 in range(0, nq, cfg.b_r):
            r1 = min(r0 + cfg.b_r, nq)
            q, do = Q[r0:r1], dO[r0:r1]
            s = mm(q, k.T)
            logp = s - lse[r0:r1, None]
            p = np.exp(logp)
            dv += mm(p.T, do)
            dp = mm(do, v.T)
            ds = p * (dp - D[r0:r1, None])
            if entropy_grad:
                ds -= dH[r0:r1, None] * p * (logp + H[r0:r1, None])
            dQ[r0:r1] += mm(ds, k)
            dk += mm(ds.T, q)
        dK[c0:c1] = dk
        dV[c0:c1] = dv
    return dQ, dK, dV
