"""Run deep learning models from a zoo, each engine isolated in its own worker process."""

from .errors import ChecksumMismatch, DataError, EngineError, ZoorunError
from .model_spec import load_descriptor, parse_model_descriptor
from .ndtensor import DType, Tensor, from_array, read_zrt, write_zrt
from .runner import Model, predict, test_model

__all__ = [
    "ChecksumMismatch",
    "DType",
    "DataError",
    "EngineError",
    "Model",
    "Tensor",
    "ZoorunError",
    "from_array",
    "load_descriptor",
    "parse_model_descriptor",
    "predict",
    "read_zrt",
    "test_model",
    "write_zrt",
]
