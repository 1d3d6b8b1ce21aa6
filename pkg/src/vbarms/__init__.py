"""Variable-block multilevel ILU (VBARMS) with dense block discovery and FGMRES."""

from .compression import (
    CompressionParams,
    QuotientGraph,
    angle_blocking,
    build_quotient_graph,
    checksum_keys,
    compress,
    exact_blocking,
    graph_blocking,
    graph_blocking_detail,
    pattern_metrics,
)
from .domain import (
    DomainMap,
    GlobalPreconditioner,
    LocalSystem,
    bj_apply,
    build_global_preconditioner,
    build_local_systems,
    build_schur_preconditioner,
    partition_quotient_graph,
    ras_apply,
    schur_apply,
)
from .factorization import (
    FactorParams,
    MissingDiagonalBlockError,
    SingularPivotError,
    VbarmsPreconditioner,
    block_ilut,
    eliminate,
    vbarms_factorize,
    vbarms_solve,
    vbilut_factorize,
)
from .krylov import DivergenceError, KrylovParams, SolveStats, fgmres
from .ordering import SingularScalingError, block_independent_set, scale
from .sparse import (
    BlockPartition,
    CsrMatrix,
    DimensionError,
    ParseError,
    Permutation,
    VbcsrMatrix,
    block_metrics,
    load_matrix,
    load_matrix_market,
    symmetrized_pattern,
    to_vbcsr,
)

__version__ = "0.1.0"
