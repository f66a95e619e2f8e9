"""Structured-sparsity DNN compression and inference toolkit.

Submodules:

* `graph`: layer-wise model representation, shape inference, fusion passes
* `pruning`: structure constraints, projections, ADMM pruning
* `formats`: compact structured-sparse storage and a CSR baseline
* `reorder`: row reordering and per-group column compaction
* `kernels`: dense reference and structured-sparse execution
* `pipeline`: graph-level prune and compile
* `sfm`, `imageio`: model and image files
* `zoo`, `bench`, `cli`: miniature models, benchmark harness, command line
"""

from .graph import GraphIR, LayerNode, TensorShape, build_graph, fuse_conv_activation, fuse_conv_bn, infer_shapes
from .kernels import ExecPlan, FlopCounter, reference_run, run_graph
from .pipeline import PruneConfig, compile_graph, prune_graph
from .pruning import (
    AdmmConfig,
    Channel,
    Column,
    Connectivity,
    Filter,
    Pattern,
    PatternLibrary,
    PruneTask,
    admm_prune,
    project,
    select_pattern_library,
    sparsity_report,
)

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig", "Channel", "Column", "Connectivity", "ExecPlan", "Filter", "FlopCounter",
    "GraphIR", "LayerNode", "Pattern", "PatternLibrary", "PruneConfig", "PruneTask", "TensorShape",
    "admm_prune", "build_graph", "compile_graph", "fuse_conv_activation", "fuse_conv_bn",
    "infer_shapes", "project", "prune_graph", "reference_run", "run_graph",
    "select_pattern_library", "sparsity_report",
]
