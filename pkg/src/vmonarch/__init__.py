"""Monarch-factorized attention for spatio-temporal token grids."""

from .errors import DimensionError, DomainError, FormatError, StateError, VMonarchError
from .flash_entropy import (
    StreamRowState,
    TileConfig,
    flash_entropy_bwd,
    flash_entropy_fwd,
    stream_entropy,
)
from .monarch import (
    IterState,
    MonarchConfig,
    MonarchFactors,
    apply_factors,
    init_state,
    l_update,
    monarch_attention,
    r_update,
)
from .oracles import (
    DenseAttnResult,
    dense_attention,
    materialize_monarch,
    monarch_objective,
    variational_objective,
)
from .tensor_core import Perm, count_macs, permute_bn, row_entropy, row_softmax
from .video import (
    PRESETS,
    CostReport,
    TokenGrid,
    VMonarchConfig,
    factorize,
    flops_estimate,
    recompute_overhead,
    sparsity_approx,
    sparsity_estimate,
    vmonarch_attention,
)

__version__ = "0.1.0"
