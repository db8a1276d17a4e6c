from . import ops
from .gradcheck import NondeterministicFunction, grad_check, grad_check_leaves
from .ops import (
    add,
    concat,
    conv1d,
    conv_transpose1d,
    cosine_similarity,
    cross_entropy,
    embedding,
    l1_distance,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mean_pool_segments,
    relu,
    scale,
    segment_pool_matrix,
    segment_sizes,
    softmax,
    sub,
    tanh,
)
from .tensor import (
    AutodiffError,
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    corrupt_backward,
    current_graph,
    no_grad,
)

__all__ = [
    "AutodiffError",
    "Graph",
    "NonFiniteError",
    "NondeterministicFunction",
    "ShapeError",
    "Tensor",
    "add",
    "concat",
    "conv1d",
    "conv_transpose1d",
    "corrupt_backward",
    "cosine_similarity",
    "cross_entropy",
    "current_graph",
    "embedding",
    "grad_check",
    "grad_check_leaves",
    "l1_distance",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mean",
    "mean_pool_segments",
    "no_grad",
    "ops",
    "relu",
    "scale",
    "segment_pool_matrix",
    "segment_sizes",
    "softmax",
    "sub",
    "tanh",
]
