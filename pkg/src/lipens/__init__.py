"""Lipschitz-guided bagging and stacking of small feed-forward classifiers."""

from ._kernels import BACKEND
from .autodiff import DimensionError, Tensor
from .nn import DenseLayer, Network, build_architecture
from .lipschitz import AscentConfig, LipschitzReport, analytic_bound, empirical_llc, spectral_norm
from .ensemble import (
    BaggedEnsemble,
    BaggingWeights,
    StackedEnsemble,
    bagged_lc,
    build_bagged,
    build_stacked,
    check_majorization,
    choose_bagging_weights,
    stacked_lc,
)
from .attacks import AttackConfig, fgsm, pgd, adversarial_accuracy
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
