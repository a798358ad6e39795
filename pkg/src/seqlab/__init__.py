"""Recurrent sequence labeling of kinematic time series.

Vanilla RNN and peephole LSTM cells in forward or bidirectional mode, trained
with exact backpropagation through time and mini-batch SGD, evaluated by
leave-one-user-out cross-validation on frame accuracy and segment edit
distance.
"""

from .model import Model, ModelSpec, Prediction, forward_sequence
from .numeric import Rng
from .training import TrainingConfig, train

__version__ = "0.1.0"

__all__ = ["Model", "ModelSpec", "Prediction", "Rng", "TrainingConfig", "forward_sequence", "train"]
