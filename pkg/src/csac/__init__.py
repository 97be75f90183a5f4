"""Federated domain generalisation: layer-wise fusion plus attention-weighted calibration."""

from .aggregation import (
    fuse,
    fuse_average,
    fuse_divergence_weighted,
    fuse_fedavg,
    fuse_similarity_weighted,
)
from .datasets import (
    Domain,
    DomainDataset,
    DomainSplit,
    build_rotated_mnist,
    generate_rotated_domains,
    leave_one_domain_out,
    synthetic_domains,
)
from .errors import ConfigError, CSACError, DataError, SchemaError, ShapeError
from .federation import TrainingConfig, run_csac, run_deepall, run_fedavg
from .losses import alignment_loss, attention_weights, calibration_loss, mmd, smoothed_ce
from .models import MnistCNN, ParameterTree, build_mnist_cnn, export_parameters, import_parameters

__version__ = "0.1.0"
