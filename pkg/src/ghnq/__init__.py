"""Desk-scale lab for predicting CNN parameters with a graph hypernetwork
and measuring their robustness under simulated uniform quantization."""

from .data import Dataset, load_cifar10, synthetic_dataset
from .evaluation import (EvalReport, evaluate, layerwise_distribution_stats,
                         per_network_robustness)
from .forward import float_forward, quant_error_metrics, quantized_forward
from .graphs import (ArchGraph, OpKind, SpaceConfig, compute_virtual_edges,
                     count_params, deserialize_graph, make_splits,
                     sample_architecture, serialize_graph)
from .hypernet import (Hypernet, HypernetConfig, load_checkpoint, predict,
                       save_checkpoint)
from .quant import QuantConfig, QuantEncoding, bn_fold, compute_encoding, fake_quantize
from .tensor import Tensor, backward, no_grad, use_dtype
from .training import TrainConfig, finetune

__version__ = "0.1.0"

__all__ = [
    "ArchGraph", "Dataset", "EvalReport", "Hypernet", "HypernetConfig",
    "OpKind", "QuantConfig", "QuantEncoding", "SpaceConfig", "Tensor",
    "TrainConfig", "backward", "bn_fold", "compute_encoding",
    "compute_virtual_edges", "count_params", "deserialize_graph", "evaluate",
    "fake_quantize", "finetune", "float_forward",
    "layerwise_distribution_stats", "load_checkpoint", "load_cifar10",
    "make_splits", "no_grad", "per_network_robustness", "predict",
    "quant_error_metrics", "quantized_forward", "sample_architecture",
    "save_checkpoint", "serialize_graph", "synthetic_dataset", "use_dtype",
    "__version__",
]
