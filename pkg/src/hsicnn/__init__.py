"""Contextual fully-convolutional CNN for hyperspectral pixel classification."""
from .data import HSICube, LabelMap
from .errors import ConfigMismatchError, DivergenceError, FormatError, NonFiniteError
from .network import NetworkConfig, build, forward_image, forward_patch, predict
from .optim import TrainPlan, train

__version__ = "0.1.0"
