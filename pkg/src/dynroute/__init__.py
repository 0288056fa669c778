"""dynroute: scale-adaptive dynamic routing networks.

Data-dependent path selection over a multi-scale routing space via soft
conditional gates, budget-constrained end-to-end training, an analytic
MAC/parameter cost model, and embedding/extraction of static architectures
inside the routing space.
"""

from .engine import Graph, Tensor, backward, grad_check
from .space import ArchMask, NodeId, PathKind, RoutingSpace, build_space

__all__ = [
    "ArchMask",
    "Graph",
    "NodeId",
    "PathKind",
    "RoutingSpace",
    "Tensor",
    "backward",
    "build_space",
    "grad_check",
]

__version__ = "0.1.0"
