"""Dual-task Siamese change detection for bitemporal building imagery."""

from .config import (CdlParams, EncoderConfig, LossConfig, LossWeights, ModelConfig,
                     TrainConfig, default_run_config, load_run_config, merge_run_config)
from .data import (AugmentOp, Batch, BitemporalSample, Manifest, SceneSet, TileRecord,
                   augment, batch_iter, build_manifest, load_sample, sample_augment_op,
                   split_manifest, tile_scene)
from .errors import (AttentionBudgetError, ConfigurationError, DataError,
                     DataIntegrityError, DtcdError, NumericAbortError, ShapeError)
from .losses import LossReport, bce, cdl, cdl_grad, clamp_probs, focal, total_loss
from .metrics import (ConfusionCounts, DivergenceReport, MetricReport, accumulate,
                      binarize, compute_metrics, evaluate_split, f1_iou_from_pr,
                      label_divergence, post_classification_compare)
from .model import (DualAttention, DualTaskChangeNet, FeaturePyramid, FinalBlock,
                    ModelOutput, PyramidPoolingCenter, SiameseEncoder, SqueezeExcite,
                    build_model, count_trainable)
from .checkpoint import Checkpoint, read_checkpoint, snapshot, write_checkpoint
from .synthetic import synthetic_scene_set
from .trainer import (ABLATION_PRESETS, RunHistory, apply_ablation_preset,
                      compare_post_classification, evaluate_checkpoint,
                      export_predictions, predict, run_ablation, train)

__version__ = "0.1.0"
