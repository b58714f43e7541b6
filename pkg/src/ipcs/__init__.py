"""Interactive point cloud semantic segmentation workbench."""

from .tensor import (BatchNormState, BNMode, ComputationTape, Tensor, backward,
                     batch_norm, masked_weighted_cross_entropy, matmul,
                     row_entropy, softmax)
from .optim import OptimizerConfig, OptimizerState, reset_state, step
from .scene import (DomainShift, LabeledCloud, SceneSpec, crop_longest_axis,
                    generate_scene, grid_subsample, load_ply, make_benchmark,
                    save_ply)
from .segnet import (NetworkParams, SegmentationState, SegNetConfig, forward,
                     init_params, knn_index, load_params, save_params,
                     train_supervised)
# note: the refine() entry point itself stays namespaced (ipcs.refine.refine)
# so the submodule name is not shadowed
from .refine import (InteractionRecord, RefineConfig, RefinementSession,
                     correction_energy, create_session, evaluate_filter_scores,
                     export_session, ia_baseline_refine, replay_session,
                     stabilization_energy, update_filter_scores, warm_up)
from .simulate import ErrorRegion, SimConfig, cluster_errors, error_map, kde_density, next_clicks
from .evaluate import EvalConfig, RunRecord, miou, noc_protocol, run_benchmark

__version__ = "0.1.0"
