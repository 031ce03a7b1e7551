"""Federated learning simulator with uncertainty-driven element-level personalization."""

__version__ = "0.1.0"

from .aggregation import aggregate, average_params, default_weights
from .config import FederationConfig, parse_config
from .data import Dataset, PartitionPlan, load_cifar10, load_idx, partition_major_minor, synthesize
from .federation import (
    ClientState,
    FederationResult,
    LocalTraining,
    RoundRecord,
    client_update,
    run_federation,
    server_round_baseline,
    server_round_fedbps,
)
from .laplace import DiagGaussian, estimate_curvature, posterior_from_curvature
from .masking import Mask, layer_mask, merge, select_mask
from .nn import (
    Batch,
    NetworkSpec,
    build_network,
    evaluate,
    forward,
    lenet5,
    loss_and_grad,
    mlp,
    per_sample_grads,
    sgd_step,
)
from .params import ParamSet
