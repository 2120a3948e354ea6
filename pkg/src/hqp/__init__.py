"""Accuracy-bounded structural pruning followed by INT8 post-training quantization.

The flow is: score every filter by its diagonal-Fisher sensitivity on a
calibration set, remove the least sensitive filters step by step while the
validation accuracy stays within ``delta_max`` of the baseline, then
quantize the surviving dense network to 8-bit integers.
"""

from .config import RunConfig, load_config, parse_config
from .costs import COUNTERS, CostCounters, compare_cost_models
from .data import Dataset, DatasetBundle, load_dataset, synthetic_blobs
from .errors import (
    HQPError,
    ShapeError,
    TapeError,
    NonFiniteGradientError,
    GraphError,
    PruningError,
    ResidualGroupError,
    CalibrationError,
    QuantizationError,
    ModelFormatError,
    BadMagicError,
    VersionMismatchError,
    TruncatedFileError,
    DatasetError,
    TrainingDivergedError,
    ConfigError,
)
from .graph import (
    FilterId,
    Layer,
    ModelGraph,
    build_mini_convnet,
    build_mini_resnet,
    check_shapes,
    count_flops,
    count_params,
    fold_batchnorm,
    forward,
    predict,
)
from .pipeline import (
    HQPOutcome,
    LatencyStats,
    MethodResult,
    benchmark_latency,
    compression_report,
    run_baseline_variants,
    run_hqp,
)
from .pruning import (
    PruneConfig,
    PruneState,
    conditional_prune,
    fixed_ratio_prune,
    magnitude_ranking,
    remove_filters,
    validate_accuracy,
)
from .quantization import (
    QuantParams,
    calibrate_kl,
    calibrate_minmax,
    dequantize_tensor,
    int8_forward,
    int8_predict,
    quant_error_stats,
    quantize_model,
    quantize_tensor,
)
from .report import MethodRow, RunReport, build_report, emit_report
from .sensitivity import (
    RankedSaliencyList,
    SensitivityRecord,
    compute_sensitivity,
    dump_sensitivity,
    load_sensitivity,
    rank_filters,
)
from .serialize import load_model, model_from_bytes, model_to_bytes, save_model
from .train import accuracy, train_baseline

__version__ = "0.1.0"
