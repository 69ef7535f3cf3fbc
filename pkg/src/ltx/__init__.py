"""Learning-to-explain: trained explainer models for frozen image classifiers."""
from .core import (LossWeights, TargetSpec, loss_inv, loss_mask, loss_pred, loss_smooth, ltx_loss, mask_blend,
                   target_select)
from .data import (Checkpoint, Dataset, FormatError, SplitMix64, gen_synthetic, read_checkpoint, read_dataset,
                   read_map_csv, train_val_split, write_checkpoint, write_dataset, write_map_csv, write_pgm)
from .metrics import MetricReport, PerturbationCurve, auc, evaluate_dataset, perturb_curve, pixel_order
from .models import Explained, Explainer, ModelSpec, TrainingError, init_explainer_from_explained, train_explained
from .tensor import ContractError, ShapeError, Tensor
from .training import (FinetuneConfig, PretrainConfig, class_specific_explain, finetune_batch, finetune_instance,
                       monitor_eval, pretrain)

__version__ = "0.1.0"
