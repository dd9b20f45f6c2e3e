"""Layer sweep probing: truncate a CNN at successive cut-off layers,
pool the feature maps to a bounded vector, and score a linear probe per
layer over repeated seeded runs."""

__version__ = "0.1.0"

from .data import (
    DatasetManifest,
    ImageSample,
    ManifestRecord,
    SplitAssignment,
    bilinear_resize,
    generate_synthetic,
    iter_samples,
    load_manifest,
    preprocess_image,
    split_by_subject,
)
from .errors import (
    ConfigError,
    CutprobeError,
    DataError,
    FormatError,
    GraphError,
    ShapeMismatchError,
)
from .features import (
    DEFAULT_BUDGET,
    FeatureRecord,
    adaptive_maxpool,
    cache_read,
    cache_write,
    compute_pool_geometry,
    extract_features,
    extract_features_multi,
    feature_length,
)
from .graph import (
    BUNDLED_GRAPHS,
    ModelGraph,
    NodeSpec,
    bundled_graph,
    count_params,
    forward,
    generate_random_weights,
    load_graph,
    load_weights,
    param_counts,
    parse_graph,
    truncate_at,
    validate_weights,
)
from .probe import (
    ProbeModel,
    TrainConfig,
    TrainTrace,
    evaluate,
    init_probe,
    load_probe,
    save_probe,
    train_probe,
)
from .runner import (
    ExperimentConfig,
    LayerStats,
    RunResult,
    SweepReport,
    aggregate_stats,
    emit_report,
    load_config,
    run_sweep,
)
from .weights import WeightStore, parse_weights, read_weights, serialize_weights, write_weights

__all__ = [
    "__version__",
    "BUNDLED_GRAPHS",
    "DEFAULT_BUDGET",
    "ConfigError",
    "CutprobeError",
    "DataError",
    "DatasetManifest",
    "ExperimentConfig",
    "FeatureRecord",
    "FormatError",
    "GraphError",
    "ImageSample",
    "LayerStats",
    "ManifestRecord",
    "ModelGraph",
    "NodeSpec",
    "ProbeModel",
    "RunResult",
    "ShapeMismatchError",
    "SplitAssignment",
    "SweepReport",
    "TrainConfig",
    "TrainTrace",
    "WeightStore",
    "adaptive_maxpool",
    "aggregate_stats",
    "bilinear_resize",
    "bundled_graph",
    "cache_read",
    "cache_write",
    "compute_pool_geometry",
    "count_params",
    "emit_report",
    "evaluate",
    "extract_features",
    "extract_features_multi",
    "feature_length",
    "forward",
    "generate_random_weights",
    "generate_synthetic",
    "init_probe",
    "iter_samples",
    "load_config",
    "load_graph",
    "load_manifest",
    "load_probe",
    "load_weights",
    "param_counts",
    "parse_graph",
    "parse_weights",
    "preprocess_image",
    "read_weights",
    "run_sweep",
    "save_probe",
    "serialize_weights",
    "split_by_subject",
    "train_probe",
    "truncate_at",
    "validate_weights",
    "write_weights",
]
