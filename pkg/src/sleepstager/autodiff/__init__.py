from .tensor import Tensor, concat, index_rows, no_grad, set_debug_checks
from .ops import (
    BatchNormState,
    LSTMDirectionParams,
    batchnorm1d,
    bilstm_layer,
    conv1d,
    dropout,
    linear,
    log_softmax,
    maxpool1d,
    softmax,
    weighted_cross_entropy,
)
from .optim import (
    ControllerAction,
    OptimConfig,
    ParamStore,
    TrainController,
    adam_step,
    clip_gradients,
    global_grad_norm,
)

__all__ = [
    "BatchNormState",
    "ControllerAction",
    "LSTMDirectionParams",
    "OptimConfig",
    "ParamStore",
    "Tensor",
    "TrainController",
    "adam_step",
    "batchnorm1d",
    "bilstm_layer",
    "clip_gradients",
    "concat",
    "conv1d",
    "dropout",
    "global_grad_norm",
    "index_rows",
    "linear",
    "log_softmax",
    "maxpool1d",
    "no_grad",
    "set_debug_checks",
    "softmax",
    "weighted_cross_entropy",
]
