"""High-order derivative propagation for message-passing networks.

The package computes exact partial derivatives of small message-passing
networks with respect to their input node features by propagating sparse
derivative tensors layer by layer, turns them into derivative-informed node
features, and trains the resulting two-stage pipeline end to end. Built-in
verification suites cross-check every computed quantity against independent
oracles (finite differences, dense matrix powers, explicit node marking).
"""

from .activations import ActivationKind, act_deriv, act_value
from .graphcore import (Dataset, Graph, a_not_a2_pairs, count_substructure_per_node,
                        count_triangles, gen_complete, gen_cycle, gen_erdos_renyi,
                        load_graph_json, normalized_adjacency, rwse)
from .derivengine import (PartitionTable, SparseDerivTensor, compute_all,
                          deriv_init, sparsity_stats)
from .mpnn import MpnnModel, mpnn_forward, residual_concat, rwse_init

__version__ = "0.1.0"
