# Exceptions raised by fedblocks

# Copyright (C) 2026   fedblocks developers


class FedBlocksError(Exception):
    """Base class for all fedblocks errors."""


class DimensionError(FedBlocksError, ValueError):
    """Tensor shapes are incompatible, or an input is empty where it may not be."""


class LabelIndexError(FedBlocksError, IndexError):
    """A class label is outside ``[0, n_classes)``."""


class TapeError(FedBlocksError, RuntimeError):
    """A tensor was not recorded on the tape it is used with."""


class SpecError(FedBlocksError, ValueError):
    """A model or task specification is invalid."""


class BlockError(FedBlocksError, ValueError):
    """A block id is invalid for the model, or a parameter vector has the wrong length."""


class MaskMismatchError(FedBlocksError, ValueError):
    """Inputs are inconsistent with the modality mask."""


class DataError(FedBlocksError, ValueError):
    """Dataset or evaluation input is empty or cannot be partitioned."""


class ConfigError(FedBlocksError, ValueError):
    """An experiment configuration is invalid.

    Args:
        field: Dotted path of the offending field, e.g. ``federation.rounds``.
        message: Human readable explanation.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}" if field else message)


class EmptyShardError(FedBlocksError, RuntimeError):
    """A client has no training samples and must be skipped this round."""


class ProtocolError(FedBlocksError, RuntimeError):
    """The aggregation protocol was violated (missing update, ineligible block, leaked gradient)."""


class PlanError(FedBlocksError, RuntimeError):
    """An aggregation plan cannot be applied, e.g. its weights sum to zero."""


class UndefinedGainError(FedBlocksError, ValueError):
    """Personalization gains are undefined because the full-model score is not positive."""
