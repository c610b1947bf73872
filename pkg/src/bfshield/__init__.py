"""Bilateral filtering as an adversarial-example defense.

Exact and lattice-accelerated differentiable bilateral filters, six
gradient-based white-box attacks, an adaptive filter-parameter predictor,
and BFNet-style adversarial training, on a small static-graph autodiff core.
"""

__version__ = "0.1.0"

from .adaptive import default_grid, defend, label_recovery, train_adaptive
from .attacks import AdversarialResult, AttackConfig, cw_l2, deepfool, fgsm, lbfgs_attack, mi_fgsm, pgd
from .bilateral import FilterParams, bilateral_filter, bilateral_filter_node, sobel_gradients
from .data import Dataset, load_cifar10, load_mnist, read_cifar, read_idx, read_ppm, write_ppm
from .errors import BfshieldError
from .estimators import AdaptiveFilterDefense, BilateralImageFilter, CNNClassifier
from .networks import Network, build_adaptive_net, build_cifar_cnn, build_mnist_cnn, wrap_bfnet
from .permutohedral import PermutohedralLattice, bilateral_lattice_filter, lattice_filter, lattice_filter_transpose
from .precision import precision_mode, set_precision, use_precision
from .training import EvalReport, TrainConfig, evaluate_attack, evaluate_recovery, train_adversarial, train_natural

__all__ = [
    "__version__",
    "AdaptiveFilterDefense",
    "AdversarialResult",
    "AttackConfig",
    "BfshieldError",
    "BilateralImageFilter",
    "CNNClassifier",
    "Dataset",
    "EvalReport",
    "FilterParams",
    "Network",
    "PermutohedralLattice",
    "TrainConfig",
    "bilateral_filter",
    "bilateral_filter_node",
    "bilateral_lattice_filter",
    "build_adaptive_net",
    "build_cifar_cnn",
    "build_mnist_cnn",
    "cw_l2",
    "deepfool",
    "default_grid",
    "defend",
    "evaluate_attack",
    "evaluate_recovery",
    "fgsm",
    "label_recovery",
    "lattice_filter",
    "lattice_filter_transpose",
    "lbfgs_attack",
    "load_cifar10",
    "load_mnist",
    "mi_fgsm",
    "pgd",
    "precision_mode",
    "read_cifar",
    "read_idx",
    "read_ppm",
    "sobel_gradients",
    "set_precision",
    "train_adaptive",
    "train_adversarial",
    "train_natural",
    "use_precision",
    "wrap_bfnet",
    "write_ppm",
]
