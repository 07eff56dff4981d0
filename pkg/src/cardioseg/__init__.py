"""Ensemble slice-classifier segmentation for 3D cardiac volumes.

Multiple 2D encoder-decoder classifiers segment every slice of a volume;
their per-pixel probabilities are pooled either with fixed convex weights or
with memory-based uncertainty weights, and the whole ensemble trains jointly
through the pooling layer with one loss and one optimizer.
"""

from .checkpoint import load_train_state, read_arrays, save_train_state, write_arrays
from .config import ExperimentConfig, load_experiment, load_phantom, load_sweep
from .costs import CostReport, cost_report, member_flops, member_param_count, pooling_flops
from .ensemble import (
    ENSEMBLE_ID,
    VARIANCE_MAX,
    EnsembleConfig,
    PixelWeightField,
    ProbVolume,
    StrategySetup,
    UncertaintyMemory,
    bootstrap_trainset,
    compute_memory,
    pool_fixed,
    pool_uncertainty,
    predict_ensemble,
    run_strategy,
    uncertainty_weights,
)
from .errors import (
    CardiosegError,
    ConfigError,
    DataError,
    NumericError,
    VolumeFormatError,
    VolumeShapeError,
)
from .losses import LossConfig, dice_loss, focal_loss, total_loss
from .metrics import (
    EvalConfig,
    MetricRecord,
    argmax_mask,
    average_dsc,
    end_coefficient,
    end_slice_avg_dsc,
    evaluate_frame,
    evaluate_testset,
    hard_dsc,
    hausdorff,
    read_metrics_csv,
    write_metrics_csv,
)
from .models import (
    ClassifierSpec,
    SliceClassifier,
    forward_slice,
    forward_volume,
    init_classifier,
)
from .pvol import load_dataset, load_volume, save_dataset, save_volume
from .render import render_frame
from .training import (
    TrainConfig,
    TrainState,
    fit,
    fit_solo,
    frozen_weight_gradient_gap,
    gradient_check,
    init_train_state,
    rmsprop_step,
    solo_eval_config,
    train_epoch,
    train_strategy,
)
from .volume import (
    CLASS_NAMES,
    NUM_CLASSES,
    AugmentationSpec,
    CineVolume,
    LabelMask,
    PhantomSpec,
    augment,
    generate_phantom,
    normalize,
    resize_volume,
)

__version__ = "0.1.0"
