"""Video-facing wrapper: token grids, first-frame recomputation, cost accounting.

Tokens are frame-major (``idx = t*h*w + r*w + c``), so the default
factorization m = frames, b = tokens per frame lines Monarch blocks up with
frames without any reordering.

FLOPs convention used by :func:`flops_estimate`: 2 FLOPs per multiply-add,
transcendentals (exp/log) and elementwise work excluded, every matmul of the
R/L updates counted for all iterations plus the output assembly L(RV).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, DomainError
from .flash_entropy import TileConfig, flash_entropy_fwd
from .monarch import MonarchConfig, monarch_attention

FLOPS_CONVENTION = (
    "2 FLOPs per MAC; exp/log and elementwise ops excluded; monarch counts all "
    "R/L-update matmuls over t iterations plus output assembly; full attention "
    "is QK^T and PV (4*N^2*d); recompute is first-frame rows against all keys"
)


@dataclass(frozen=True)
class TokenGrid:
    t_frames: int
    h: int
    w: int
    head_dim: int = 64
    heads: int = 1
    batch: int = 1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1:
                raise DimensionError(f"{name} must be positive, got {v}")

    @property
    def hw(self) -> int:
        return self.h * self.w

    @property
    def n(self) -> int:
        return self.t_frames * self.hw


@dataclass(frozen=True)
class VMonarchConfig:
    iters: int = 2
    clamp_min: float = 0.1
    clamp_enabled: bool = True
    recompute_first_frame: bool = True
    override_m_b: tuple[int, int] | None = None
    fused: bool = True
    tiles: TileConfig = field(default_factory=lambda: TileConfig(128, 256))

    def __post_init__(self):
        if self.iters < 1:
            raise DomainError(f"iters must be >= 1, got {self.iters}")


@dataclass(frozen=True)
class Preset:
    grid: TokenGrid
    video_shape: tuple[int, int, int]
    reported_sparsity: float | None = None
    note: str = ""


# latent grids for Wan-style VAEs (temporal stride 4, spatial 8, patch 2)
PRESETS: dict[str, Preset] = {
    "wan-61f": Preset(TokenGrid(16, 28, 52), (61, 448, 832), 0.875),
    "wan-141f": Preset(TokenGrid(36, 28, 52), (141, 448, 832), 0.944),
    "wan-321f": Preset(TokenGrid(81, 28, 52), (321, 448, 832)),
    "wan-93f-704p": Preset(
        TokenGrid(24, 44, 80),
        (93, 704, 1280),
        0.920,
        note="reported 92.0% does not follow from 1 - t(T+HW)/(THW) on this grid",
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise DomainError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class CostReport:
    sparsity: float
    sparsity_approx: float
    monarch_flops: int
    full_attn_flops: int
    recompute_flops: int
    reduction_ratio: float
    convention: str = FLOPS_CONVENTION


def factorize(grid: TokenGrid, cfg: VMonarchConfig = VMonarchConfig()) -> tuple[int, int]:
    if cfg.override_m_b is None:
        return grid.t_frames, grid.hw
    m, b = cfg.override_m_b
    if m < 1 or b < 1 or m * b != grid.n:
        raise DimensionError(f"override ({m}, {b}) does not factor N={grid.n}")
    return m, b


def sparsity_estimate(grid: TokenGrid, cfg: VMonarchConfig = VMonarchConfig()) -> float:
    """1 - t(m + b)/(m b) for the effective factorization."""
    m, b = factorize(grid, cfg)
    return 1.0 - cfg.iters * (m + b) / (m * b)


def sparsity_approx(grid: TokenGrid, cfg: VMonarchConfig = VMonarchConfig()) -> float:
    """The large-b approximation 1 - t/m."""
    m, _ = factorize(grid, cfg)
    return 1.0 - cfg.iters / m


def monarch_macs(m: int, b: int, d: int, iters: int) -> int:
    per_iter = 2 * m * b * b * d + 2 * b * m * m * d
    return iters * per_iter + m * b * b * d + b * m * m * d


def flops_estimate(grid: TokenGrid, cfg: VMonarchConfig = VMonarchConfig(), d: int | None = None) -> CostReport:
    d = grid.head_dim if d is None else d
    m, b = factorize(grid, cfg)
    n = grid.n
    units = grid.batch * grid.heads
    monarch = 2 * monarch_macs(m, b, d, cfg.iters) * units
    full = 4 * n * n * d * units
    recompute = 4 * grid.hw * n * d * units if cfg.recompute_first_frame else 0
    return CostReport(
        sparsity=sparsity_estimate(grid, cfg),
        sparsity_approx=sparsity_approx(grid, cfg),
        monarch_flops=monarch,
        full_attn_flops=full,
        recompute_flops=recompute,
        reduction_ratio=full / (monarch + recompute),
    )


def recompute_overhead(m: int, b: int, iters: int) -> float:
    """Cost of first-frame recomputation relative to the Monarch iterations: b/(t(m+b))."""
    return b / (iters * (m + b))


def _one_unit(q, k, v, grid: TokenGrid, cfg: VMonarchConfig) -> np.ndarray:
    m, b = factorize(grid, cfg)
    mcfg = MonarchConfig(
        m=m, b=b, iters=cfg.iters, clamp_min=cfg.clamp_min,
        clamp_enabled=cfg.clamp_enabled, fused=cfg.fused, tiles=cfg.tiles,
    )
    out, _ = monarch_attention(q, k, v, mcfg)
    if cfg.recompute_first_frame:
        hw = grid.hw
        q0 = q[:hw] * q.dtype.type(1.0 / np.sqrt(q.shape[1]))
        out[:hw] = flash_entropy_fwd(q0, k, v, cfg.tiles)[0]
    return out


def vmonarch_attention(Q, K, V, grid: TokenGrid, cfg: VMonarchConfig = VMonarchConfig(), threads: int = 1) -> np.ndarray:
    """Monarch attention over a frame-major token grid.

    Q, K, V have shape (..., N, d); every leading index (batch, head) is an
    independent unit. With recomputation on, output rows of the first frame
    are replaced by exact attention of those queries against all keys.
    """
    Q, K, V = (np.asarray(a) for a in (Q, K, V))
    if Q.shape != K.shape or Q.shape != V.shape:
        raise DimensionError(f"Q {Q.shape}, K {K.shape}, V {V.shape} must match")
    if Q.ndim < 2 or Q.shape[-2] != grid.n:
        raise DimensionError(f"expected (..., {grid.n}, d), got {Q.shape}")
    if Q.dtype.kind != "f":
        Q, K, V = (a.astype(np.float64) for a in (Q, K, V))
    lead = Q.shape[:-2]
    n, d = Q.shape[-2:]
    qs, ks, vs = (a.reshape(-1, n, d) for a in (Q, K, V))
    units = range(qs.shape[0])

    def work(u):
        return _one_unit(qs[u], ks[u], vs[u], grid, cfg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(work, units))
    else:
        outs = [work(u) for u in units]
    return np.stack(outs).reshape(*lead, n, d)
