"""Dataset generality via CNN transfer under layer freezing.

Train a small CNN on a base dataset, freeze all but its rear layers,
re-initialize the classifier, retrain on a second dataset, and compare
against training from scratch. The ratio of the two test accuracies is
the generality of the base dataset with respect to the second.
"""

from .datasets import (DatasetBundle, load_idx_split, partition_by_classes,
                       split_train_valid, subsample_per_class, batches)
from .gradcheck import grad_check
from .kernels import KernelContext, RunningStats
from .network import (ARCHITECTURES, FreezePlan, LayerSpec, Network,
                      build_network, derive_freeze_plan, freeze_for_transfer)
from .checkpoint import load_checkpoint, save_checkpoint
from .optimizer import (History, OptimConfig, OptimizerState, Schedule,
                        evaluate, lr_at, momentum_coefficient, step, train)
from .precision import get_dtype, precision, precision_name, set_precision
from .synthetic import FAMILIES, GLYPH_NAMES, make_synthetic
from .transfer import (GeneralityCurve, GeneralityRecord, JobAudit,
                       RecordStore, SubsampleTable, class_generality,
                       generality_curve, generality_matrix, generality_ratio,
                       retrain_transfer, subsample_generality, train_base)

__version__ = "0.1.0"
