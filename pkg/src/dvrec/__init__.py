"""Shapley-valued training-sample selection for BPR recommenders.

A Harsanyi-structured valuator scores every (user, positive, negative)
triplet in a batch with its exact Shapley value; a Bernoulli selection
policy over those values gates the recommender's BPR updates and is itself
trained with REINFORCE on a validation metric.
"""

from .data import Dataset, TripletBatch, load_dataset, make_batch, prepare, save_dataset, split
from .estimator import DVRRecommender, InteractionFilter
from .exceptions import (
    CacheFormatError,
    ComplexityError,
    ConfigError,
    DataError,
    DVRError,
    FilterError,
    NumericError,
    StructureError,
)
from .metrics import evaluate
from .recmodel import init_model
from .trainer import TrainConfig, Trainer, run
from .valuator import init_valuator, shapley_values

__version__ = "0.1.0"

__all__ = [
    "CacheFormatError", "ComplexityError", "ConfigError", "DVRError", "DVRRecommender", "DataError",
    "Dataset", "FilterError", "InteractionFilter", "NumericError", "StructureError", "TrainConfig",
    "Trainer", "TripletBatch", "evaluate", "init_model", "init_valuator", "load_dataset", "make_batch",
    "prepare", "run", "save_dataset", "shapley_values", "split",
]
