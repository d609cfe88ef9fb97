# Copyright (C) 2026   fedblocks developers


from importlib.metadata import metadata

from . import client, data, errors, experiment, metrics, model, server, tensor, utils
from .data import ModalityConfig, MultimodalDataset, SynthTask
from .experiment import ExperimentConfig
from .model import BlockedModel, BlockId, ModalityMask, ModelSpec
from .server import AggregationMode

meta = metadata("fedblocks")
__version__ = meta["Version"]
__author__ = meta["Author-email"]
__license__ = meta["license-expression"]
__email__ = meta["Author-email"]
__program_name__ = meta["Name"]


__all__ = [
    "client",
    "data",
    "errors",
    "experiment",
    "metrics",
    "model",
    "server",
    "tensor",
    "utils",
    "AggregationMode",
    "BlockId",
    "BlockedModel",
    "ExperimentConfig",
    "ModalityConfig",
    "ModalityMask",
    "ModelSpec",
    "MultimodalDataset",
    "SynthTask",
]
