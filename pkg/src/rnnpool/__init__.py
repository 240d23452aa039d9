"""RNNPool: RNN-based pooling for low-memory vision networks, with memory analysis tools."""
from .dag import Dag, enumerate_min_peak, simulate
from .errors import (AnalysisError, NumericError, PlanningError, QuantizationError, ShapeError,
                     SizeCapError, SpecError, TrainingError)
from .executor import ArenaStats, run_naive, run_streaming
from .fastgrnn import FastGrnnCell
from .graph import NetworkSpec, count_madds, count_params, infer_shapes, lower, validate_spec
from .memplan import (MemoryReport, block_memory, layerbylayer_peak, lower_bound_no_recompute,
                      receptive_fields, recompute_madds, rowwise_schedule_bound)
from .pool import (RnnPoolLayerCfg, RnnPoolParams, rnnpool_backward, rnnpool_forward,
                   rnnpool_layer_forward)
from .presets import PRESET_NAMES, preset
from .quant import QuantTensor, dequantize, quantize_per_channel, run_quantized
from .tensor import PatchSpec, TensorMap

__version__ = "0.1.0"

__all__ = [
    "Dag", "enumerate_min_peak", "simulate",
    "AnalysisError", "NumericError", "PlanningError", "QuantizationError", "ShapeError",
    "SizeCapError", "SpecError", "TrainingError",
    "ArenaStats", "run_naive", "run_streaming",
    "FastGrnnCell",
    "NetworkSpec", "count_madds", "count_params", "infer_shapes", "lower", "validate_spec",
    "MemoryReport", "block_memory", "layerbylayer_peak", "lower_bound_no_recompute",
    "receptive_fields", "recompute_madds", "rowwise_schedule_bound",
    "RnnPoolLayerCfg", "RnnPoolParams", "rnnpool_backward", "rnnpool_forward",
    "rnnpool_layer_forward",
    "PRESET_NAMES", "preset",
    "QuantTensor", "dequantize", "quantize_per_channel", "run_quantized",
    "PatchSpec", "TensorMap",
]
