"""owlearn: unrolled proximal networks with open-world rejection.

Library surface: dense numerics, proximal operators and the reference ISTA
iteration, graph and hypergraph Laplacians, unrolled layers with exact
reverse mode, generalized multi-modal fusion, open-world losses with
agent-threshold rejection, and the end-to-end training protocols.
"""

from .numerics import (make_rng, matmul, minmax_normalize, row_softmax,
                       spectral_norm)
from .prox import (IstaProblem, ProxKind, ista_lipschitz, ista_objective,
                   ista_solve, ista_step, moreau_envelope, prox_oracle,
                   row_group_threshold, soft_threshold)
from .graph import (GraphKind, GraphOperator, hypergraph_laplacian, knn_graph,
                    knn_similarity, laplacian, load_edge_list)
from .fusion import FusionKind, FusionParams, fuse, fuse_backward, init_fusion
from .unroll import (ContractionReport, LayerParams, UnrolledModel,
                     init_from_ista, layer_forward, model_forward,
                     rescale_linear_part, verify_contraction)
from .openworld import (UNKNOWN, AccuracyReport, AgentThreshold, LossReport,
                        known_loss, open_world_accuracy, predict,
                        rank_and_discard, select_agent, total_loss,
                        unknown_loss)
from .data import (OpenWorldDataset, SplitMasks, apply_split, load_csv,
                   load_dataset, make_blobs, split_open_world)
from .train import (GradSet, LossConfig, ModelSpec, TrainConfig, TrainResult,
                    backward, evaluate, grad_check, run_protocol1,
                    run_protocol2)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
