from .functional import Parameter, decay, sigmoid, softmax
from .gradcheck import grad_check, gradient_errors, numerical_gradient
from .layers import (
    BatchNorm,
    Dense,
    Dropout,
    LSTMCellParams,
    Recurrent,
    TLSTMCellParams,
    batchnorm_forward,
    dense_forward,
    dropout_forward,
    lstm_cell_backward,
    lstm_cell_forward,
    recurrent_layer_backward,
    recurrent_layer_forward,
    tlstm_adjust,
    tlstm_adjust_backward,
    tlstm_cell_backward,
    tlstm_cell_forward,
)
from .losses import mae_loss, weighted_cross_entropy
from .optim import Nadam, nadam_update

__all__ = [
    "BatchNorm", "Dense", "Dropout", "LSTMCellParams", "Nadam", "Parameter", "Recurrent",
    "TLSTMCellParams", "batchnorm_forward", "decay", "dense_forward", "dropout_forward",
    "grad_check", "gradient_errors", "lstm_cell_backward", "lstm_cell_forward", "mae_loss",
    "nadam_update", "numerical_gradient", "recurrent_layer_backward", "recurrent_layer_forward",
    "sigmoid", "softmax", "tlstm_adjust", "tlstm_adjust_backward", "tlstm_cell_backward",
    "tlstm_cell_forward", "weighted_cross_entropy",
]
