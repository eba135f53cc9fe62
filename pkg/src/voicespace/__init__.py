"""Multimodal voice-space alignment: a KV-Former aggregator trained with soft
contrastive losses against a frozen flow-matching generator, on a synthetic
speaker world."""

from .bench import EvalSet, run_benchmark, ssc, ssd, sst
from .config import RunConfig, parse_config, rng_for
from .errors import (ConfigError, ContractError, DimensionError, FormatError, IntegrityError, LengthError,
                     StagePipelineError, UnsupportedVersionError, ValidationError, VoiceSpaceError)
from .synthdata import World, WorldConfig, gen_batch, gen_world, load_embeddings, save_embeddings
from .tensor import Tensor, backward
from .trainer import Checkpoint, load_checkpoint, run_pipeline, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "ContractError", "DimensionError", "EvalSet", "FormatError", "IntegrityError",
    "LengthError", "RunConfig", "StagePipelineError", "Tensor", "UnsupportedVersionError", "ValidationError",
    "VoiceSpaceError", "World", "WorldConfig", "backward", "gen_batch", "gen_world", "load_checkpoint",
    "load_embeddings", "parse_config", "rng_for", "run_benchmark", "run_pipeline", "save_checkpoint",
    "save_embeddings", "ssc", "ssd", "sst", "train",
]
