"""Alternating-maximization Monarch attention.

Block layout (N = m*b, token ``j*b + i`` is block j, position i):

* ``Kb``/``Vb`` are (m, b, d) natural views; ``Qb`` is the (b, m, d) view
  with ``Qb[i, j] = Q[j*b + i]``.
* ``R`` is (m, b, b), ``L`` is (b, m, m) and the attention matrix they
  represent is ``M[j*b + i, k*b + l] = L[i, j, k] * R[k, i, l]``.

Each half-step is the exact maximizer of ``<M, QK^T> + H(M)`` with the other
factor held fixed, so without clamping the objective never decreases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, StateError
from .flash_entropy import TileConfig, flash_entropy_fwd
from .tensor_core import Mat, Tensor3, as_mat, block_cols, block_rows, mm


@dataclass
class MonarchFactors:
    L: Tensor3  # (b, m, m)
    R: Tensor3  # (m, b, b)

    @property
    def m(self) -> int:
        return self.R.shape[0]

    @property
    def b(self) -> int:
        return self.L.shape[0]

    @property
    def n(self) -> int:
        return self.m * self.b


@dataclass
class IterState:
    aR: Tensor3  # (m, b, d)
    cR: np.ndarray  # (m, b)
    aL: Tensor3 | None = None  # (b, m, d)
    cL: np.ndarray | None = None  # (b, m)


@dataclass(frozen=True)
class MonarchConfig:
    m: int
    b: int
    iters: int = 2
    clamp_min: float = 0.1
    clamp_enabled: bool = True
    # stream non-final R-updates through the flash-entropy kernel instead of
    # materializing R
    fused: bool = True
    tiles: TileConfig = field(default_factory=lambda: TileConfig(128, 256))

    def __post_init__(self):
        if self.m < 1 or self.b < 1:
            raise DimensionError(f"m and b must be >= 1, got ({self.m}, {self.b})")
        if self.iters < 1:
            raise DomainError(f"iters must be >= 1, got {self.iters}")
        if self.clamp_min < 0:
            raise DomainError("clamp_min must be >= 0")

    @property
    def n(self) -> int:
        return self.m * self.b


_CHUNK_ELEMS = 1 << 22


def _softmax_last(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over the last axis plus the matching log-probabilities."""
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    return e / s, z - np.log(s)


def init_state(Q, cfg: MonarchConfig) -> IterState:
    """Start state equivalent to L = identity: aR is Q in (m, b, d) blocks, cR = 1."""
    if cfg.iters < 1:
        raise DomainError("iters must be >= 1")
    Q = as_mat(Q, name="Q")
    if Q.shape[0] != cfg.n:
        raise DimensionError(f"N={Q.shape[0]} but m*b={cfg.m}*{cfg.b}={cfg.n}")
    aR = block_rows(Q, cfg.m, cfg.b).copy()
    return IterState(aR=aR, cR=np.ones((cfg.m, cfg.b), dtype=Q.dtype))


def _temperature(cR: np.ndarray, cfg: MonarchConfig) -> np.ndarray:
    if cfg.clamp_enabled:
        return np.maximum(cR, np.asarray(cfg.clamp_min, dtype=cR.dtype))
    if np.any(cR <= 0):
        raise DomainError(f"c_R has non-positive entries (min {cR.min():.3g}) and clamping is off")
    return cR


def r_update(state: IterState, Kb: Tensor3, cfg: MonarchConfig, materialize: bool = True):
    """Solve for R with L fixed; refresh aL and cL in ``state``.

    Returns ``(R, aL, cL)``. With ``materialize=False`` each block runs through
    :func:`flash_entropy_fwd` (keys and values both Kb[k]) and R is None.
    """
    if state.aR is None or state.cR is None:
        raise StateError("r_update needs aR and cR")
    m, b, d = state.aR.shape
    if Kb.shape != (m, b, d):
        raise DimensionError(f"Kb has shape {Kb.shape}, expected {(m, b, d)}")
    c = _temperature(state.cR, cfg)
    if materialize:
        R = np.empty((m, b, b), dtype=state.aR.dtype)
        aL = np.empty((b, m, d), dtype=state.aR.dtype)
        cL = np.empty((b, m), dtype=state.aR.dtype)
        # groups of blocks bound the temporaries to ~_CHUNK_ELEMS scores
        step = max(1, _CHUNK_ELEMS // (b * b))
        for k0 in range(0, m, step):
            ks = slice(k0, min(k0 + step, m))
            logits = mm(state.aR[ks], Kb[ks].transpose(0, 2, 1)) / c[ks, :, None]
            r, log_r = _softmax_last(logits)
            R[ks] = r
            aL[:, ks] = mm(r, Kb[ks]).transpose(1, 0, 2)
            cL[:, ks] = np.sum(r * log_r, axis=2).T
    else:
        R = None
        aL = np.empty((b, m, d), dtype=state.aR.dtype)
        cL = np.empty((b, m), dtype=state.aR.dtype)
        for k in range(m):
            q = state.aR[k] / c[k][:, None]
            out, _, ent = flash_entropy_fwd(q, Kb[k], Kb[k], cfg.tiles)
            aL[:, k] = out
            cL[:, k] = -ent
    state.aL, state.cL = aL, cL
    return R, aL, cL


def l_update(state: IterState, Qb: Tensor3, cfg: MonarchConfig):
    """Solve for L with R fixed; refresh aR and cR in ``state``.

    Returns ``(L, aR, cR)``.
    """
    if state.aL is None or state.cL is None:
        raise StateError("l_update called before any r_update")
    b, m, d = state.aL.shape
    if Qb.shape != (b, m, d):
        raise DimensionError(f"Qb has shape {Qb.shape}, expected {(b, m, d)}")
    logits = mm(Qb, state.aL.transpose(0, 2, 1)) - state.cL[:, None, :]
    L, _ = _softmax_last(logits)
    cR = np.ascontiguousarray(L.sum(axis=1).T)
    aR = np.ascontiguousarray(mm(L.transpose(0, 2, 1), Qb).transpose(1, 0, 2))
    state.aR, state.cR = aR, cR
    return L, aR, cR


def apply_factors(F: MonarchFactors, V: Mat) -> Mat:
    """O = M V via the two block-diagonal products; never forms M."""
    m, b = F.m, F.b
    Vb = block_rows(V, m, b)
    y = mm(F.R, Vb).transpose(1, 0, 2)  # (b, m, d), [i, k]
    out = mm(F.L, y)  # (b, m, d), [i, j]
    return np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(m * b, V.shape[1])


def monarch_attention(Q, K, V, cfg: MonarchConfig, scale: bool = True) -> tuple[Mat, MonarchFactors]:
    """Approximate softmax(QK^T/sqrt(d)) V with a Monarch matrix after ``cfg.iters`` rounds."""
    Q = as_mat(Q, name="Q")
    K = as_mat(K, name="K")
    V = as_mat(V, name="V")
    if Q.shape != K.shape or V.shape[0] != Q.shape[0]:
        raise DimensionError(f"Q {Q.shape}, K {K.shape}, V {V.shape} are inconsistent")
    if Q.shape[0] != cfg.n:
        raise DimensionError(f"N={Q.shape[0]} but m*b={cfg.n}")
    dt = np.result_type(Q, K, V)
    Q, K, V = Q.astype(dt, copy=False), K.astype(dt, copy=False), V.astype(dt, copy=False)
    if scale:
        Q = Q * dt.type(1.0 / np.sqrt(Q.shape[1]))

    Kb = block_rows(K, cfg.m, cfg.b)
    Qb = block_cols(Q, cfg.m, cfg.b)
    state = init_state(Q, cfg)
    R = L = None
    for t in range(cfg.iters):
        last = t == cfg.iters - 1
        R, _, _ = r_update(state, Kb, cfg, materialize=last or not cfg.fused)
        L, _, _ = l_update(state, Qb, cfg)
    F = MonarchFactors(L=L, R=R)
    return apply_factors(F, V), F
