"""mtbalance: multi-task gradient balancing toolkit.

Pure-numpy implementations of gradient- and loss-based task balancing
methods, a small shared-encoder/multi-head network with exact reverse-mode
gradients, synthetic multi-task problem generators, the evaluation metrics
(relative multi-task gain, mean rank, gradient interference), static-weight
extraction, and a seeded experiment harness with a CLI.
"""

from .aggregators import (AggregationResult, CdttState, GradientBundle,
                          cagrad, cdtt, edm, graddrop, imtl_g, mgda_ub,
                          nash_mtl, pcgrad)
from .errors import (BalancingError, ConfigError, DegenerateGeometryError,
                     IdxFormatError, MetricError, NonFiniteLossError,
                     NonPositiveLossError, SingularMatrixError,
                     ZeroGradientError)
from .harness import (ALL_METHODS, GRADIENT_METHODS, LOSS_METHODS, PROBLEMS,
                      MetricReport, Protocol, TrialConfig, TrialResult,
                      compare_smtos, extract_and_replay, grid_search,
                      run_trial, run_trials)
from .metrics import (InterferenceMeter, MetricValue, TaskMetrics,
                      WeightTrace, delta_mtm, epoch_ema,
                      extract_fixed_weights, interference, mean_rank)
from .model import (AdamState, HeadSpec, NetworkSpec, TaskGradients,
                    adam_step, backward_per_task, backward_weighted, forward,
                    init_params)
from .numerics import (gram, min_norm_in_hull, min_norm_two_task,
                       positive_fixed_point, project_to_simplex, rng_stream,
                       solve_linear)
from .problems import (ConflictSpec, Dataset, DatasetSplits, TaskSpec,
                       compose_pair, conflict_regression, downscale_bilinear,
                       load_multimnist, mixed_norm_two_task, read_idx_images,
                       read_idx_labels, symmetric_two_task)
from .rotation import (RotationSet, cayley, rotate_features, rotation_loss,
                       rotation_step, rotation_target)
from .weighters import (FamoState, UwState, WeightVector, auto_lambda_update,
                        famo_update, famo_weights, fixed, rlw, si, unit_scal,
                        uw_grad_s, uw_loss)

__version__ = "0.1.0"
