"""Fair representation fine-tuning with distance-covariance penalties."""
from .autodiff import Node
from .data import LabeledDataset
from .dependence import dc_conditional, dc_fast, dc_naive
from .metrics import FairnessReport, PredictionSet, evaluate
from .network import ModelParams, NetworkSpec, build, build_probe, forward
from .training import TrainConfig, train

__version__ = "0.1.0"
