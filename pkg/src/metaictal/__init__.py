"""Meta label correction for peri-onset windows, with early-warning indicators.

A labeling network assigns soft targets to windows too close to an onset to
trust expert labels; the main classifier trains on those targets through a
bilevel loop whose outer step tunes the labeler against trusted data. The
trained classifier's output probability doubles as a tipping-point
early-warning indicator and is benchmarked against rolling variance.
"""

__version__ = "0.1.0"

from .core import (
    Episode,
    EpisodeMeta,
    LabeledWindow,
    NormStats,
    ParamVector,
    Purity,
    SplitDataset,
    WindowPair,
    slice_window,
    window_sample_count,
)
from .errors import MetaictalError
from .nets import Architecture, MainHyper, MainNetwork, MetaHyper, MetaNetwork, bce_loss, grad
from .pipeline import PartitionOptions, normalize, partition, split_train_test
from .synthgen import SynthConfig, generate_cohort, generate_episode
from .trainer import (
    MetaGradMode,
    TrainConfig,
    evaluate_accuracy,
    inner_update,
    meta_gradient,
    train_baseline,
    train_meta,
)
from .eval import (
    GridTable,
    IndicatorTrace,
    LeadRow,
    TraceKind,
    accuracy_grid,
    attach_ground_truth,
    ensemble_indicator,
    first_crossing,
    lead_time_comparison,
    onset_centered_trace,
    probability_indicator,
    variance_indicator,
)
from .config import (
    DEFAULT_CONFIG,
    StudyConfig,
    apply_overrides,
    load_config,
    parse_cells,
    validate_config,
)
from .study import evaluate_run, run_study, training_seed

__all__ = [
    "DEFAULT_CONFIG",
    "GridTable",
    "IndicatorTrace",
    "LeadRow",
    "StudyConfig",
    "TraceKind",
    "accuracy_grid",
    "apply_overrides",
    "attach_ground_truth",
    "ensemble_indicator",
    "evaluate_run",
    "first_crossing",
    "lead_time_comparison",
    "load_config",
    "onset_centered_trace",
    "parse_cells",
    "probability_indicator",
    "run_study",
    "training_seed",
    "validate_config",
    "variance_indicator",
    "Architecture",
    "Episode",
    "EpisodeMeta",
    "LabeledWindow",
    "MainHyper",
    "MainNetwork",
    "MetaGradMode",
    "MetaHyper",
    "MetaNetwork",
    "MetaictalError",
    "NormStats",
    "ParamVector",
    "PartitionOptions",
    "Purity",
    "SplitDataset",
    "SynthConfig",
    "TrainConfig",
    "WindowPair",
    "bce_loss",
    "evaluate_accuracy",
    "generate_cohort",
    "generate_episode",
    "grad",
    "inner_update",
    "meta_gradient",
    "normalize",
    "partition",
    "slice_window",
    "split_train_test",
    "train_baseline",
    "train_meta",
    "window_sample_count",
]
