"""Vector-retrieval and sparse-attention engine over per-head KV caches.

The library manages immutable per-(layer, kv head) key/value contexts,
retrieves critical tokens through flat, graph, and coarse block indexes
(top-k, prefix-filtered, and dynamic inner-product range queries), computes
attention by merging partial results over token subsets, and persists
contexts as block-structured vector files behind a buffer pool. The
``sparsekv`` CLI replays synthetic decode workloads and reports recall,
recovery ratio, and latency.
"""

from .attention import PartialAttention, full_attention, recovery_ratio, sparse_attention
from .config import EngineConfig, load_config
from .core import HeadAddress, ModelShape, WindowConfig, as_vector, inner_product, scaled_score
from .dipr import (
    CandidateList,
    alpha_to_beta,
    dipr_bruteforce,
    diprs,
    is_critical_by_attention,
    theorem1_check,
)
from .filtering import PrefixPredicate, filtered_diprs
from .index import (
    BlockIndex,
    FlatIndex,
    GraphIndex,
    GraphParams,
    build_block_index,
    build_graph,
    build_shared_graph,
    select_representatives,
)
from .planner import IndexKind, Plan, PlannerConfig, PlanRequest, QueryKind, plan
from .store import ContextRecord, ContextStore, Session
from .vfs import (
    BufferPool,
    append_vectors,
    delete_vectors,
    read_vector_file,
    write_vector_file,
)

__version__ = "0.1.0"

__all__ = [
    "PartialAttention", "full_attention", "recovery_ratio", "sparse_attention",
    "EngineConfig", "load_config",
    "HeadAddress", "ModelShape", "WindowConfig", "as_vector", "inner_product",
    "scaled_score",
    "CandidateList", "alpha_to_beta", "dipr_bruteforce", "diprs",
    "is_critical_by_attention", "theorem1_check",
    "PrefixPredicate", "filtered_diprs",
    "BlockIndex", "FlatIndex", "GraphIndex", "GraphParams", "build_block_index",
    "build_graph", "build_shared_graph", "select_representatives",
    "IndexKind", "Plan", "PlannerConfig", "PlanRequest", "QueryKind", "plan",
    "ContextRecord", "ContextStore", "Session",
    "BufferPool", "append_vectors", "delete_vectors", "read_vector_file",
    "write_vector_file",
    "__version__",
]
