"""Toy classifiers, SGD training and LRP attributions."""

from .io import (
    FormatError,
    load_checkpoint,
    maps_from_array,
    read_atr,
    read_metadata,
    save_checkpoint,
    write_atr,
    write_metadata,
)
from .lrp import (
    AttributionMap,
    RuleAssignmentError,
    attribute_batch,
    lrp_alphabeta,
    lrp_composite,
    lrp_epsilon,
    lrp_flat,
    lrp_maxpool,
    lrp_relevance,
    sum_pool_grid,
)
from .network import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    ReLU,
    ShapeError,
    ToyNetwork,
    class_rank,
    forward,
    make_cnn,
    make_mlp,
    make_network,
    predict_logits,
    softmax,
)
from .training import TrainConfig, accuracy, train_sgd
