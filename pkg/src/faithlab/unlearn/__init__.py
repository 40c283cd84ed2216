from .attribution import (
    AttributionMap,
    attribute,
    n_selected,
    pair_attributions,
    random_neurons,
    regularize,
    regularize_scores,
    select_neurons,
    select_unforgotten,
)
from .config import DEFAULT_LR, METHODS, ConfigError, UnlearnConfig
from .losses import ReferenceModel, loss_for_method
from .loop import History, NumericAbort, klue_mask, unlearn_run

__all__ = [
    "AttributionMap",
    "attribute",
    "n_selected",
    "pair_attributions",
    "random_neurons",
    "regularize",
    "regularize_scores",
    "select_neurons",
    "select_unforgotten",
    "DEFAULT_LR",
    "METHODS",
    "ConfigError",
    "UnlearnConfig",
    "ReferenceModel",
    "loss_for_method",
    "History",
    "NumericAbort",
    "klue_mask",
    "unlearn_run",
]
