"""Fixed-point LSTM gesture recognizers: quantization, training and cost accounting."""

from .quantizer import QuantSpec, optimize_step_size, quantize
from .netcore import MasterModel, NetworkGraph, preset
from .trainer import TrainConfig, RetrainPlan, train_float, retrain_quantized, evaluate
from .sensitivity import BitAllocation, sensitivity_table, full_quantization, escalate_bits

__all__ = [
    "QuantSpec", "optimize_step_size", "quantize",
    "MasterModel", "NetworkGraph", "preset",
    "TrainConfig", "RetrainPlan", "train_float", "retrain_quantized", "evaluate",
    "BitAllocation", "sensitivity_table", "full_quantization", "escalate_bits",
]
