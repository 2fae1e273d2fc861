"""foldnet: unfold same-topology network ensembles and shrink them back.

The package turns K separately trained networks into one large network
whose inner layers are K times wider (reproducing the ensemble's
averaged outputs), then removes the redundancy again with SVD
factorization of linear layers, data-free least-squares neuron removal
on weight matrices, and data-bound removal driven by recorded neuron
activities interleaved with fine-tuning.
"""

from .linalg import ols_min_norm, truncated_svd
from .network import (
    Connection,
    Dataset,
    LayerSpec,
    ModelFormatError,
    Network,
    attention_weights,
    build_encdec,
    build_feedforward,
    build_gru_classifier,
    ensemble_decode,
    forward,
    greedy_decode,
    gru_step,
    load_model,
    save_model,
)
from .shrink import (
    ActivityMatrix,
    ShrinkReport,
    apply_removal,
    databound_lambda,
    databound_select,
    datafree_lambda,
    datafree_select,
    divergence,
    shrink_layer_datafree,
    shrink_layer_svd,
)
from .train import (
    PruneSchedule,
    TrainConfig,
    make_task,
    record_activities,
    shrink_databound,
    train_adagrad,
)
from .unfold import LayerRole, layer_role, size_factor, unfold

__version__ = "0.1.0"

__all__ = [
    "ActivityMatrix",
    "Connection",
    "Dataset",
    "LayerRole",
    "LayerSpec",
    "ModelFormatError",
    "Network",
    "PruneSchedule",
    "ShrinkReport",
    "TrainConfig",
    "apply_removal",
    "attention_weights",
    "build_encdec",
    "build_feedforward",
    "build_gru_classifier",
    "databound_lambda",
    "databound_select",
    "datafree_lambda",
    "datafree_select",
    "divergence",
    "ensemble_decode",
    "forward",
    "greedy_decode",
    "gru_step",
    "layer_role",
    "load_model",
    "make_task",
    "ols_min_norm",
    "record_activities",
    "save_model",
    "shrink_databound",
    "shrink_layer_datafree",
    "shrink_layer_svd",
    "size_factor",
    "train_adagrad",
    "truncated_svd",
    "unfold",
]
