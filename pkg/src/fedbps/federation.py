"""Round-based simulation of FedBPS and the FedAvg / FedPer / LG-FedAvg baselines.

All four methods share one server path: average the client models, pick a
mask, and give each client ``merge(w_i, w_g, mask)``. They differ only in
how the mask is chosen:

* FedAvg: the all-zero mask (everything shared).
* FedPer: the classifier layers are personal.
* LG-FedAvg: the feature-extractor layers are personal.
* FedBPS: the ``p`` fraction of elements with the largest variance under the
  moment-matched global posterior are personal; recomputed every round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import laplace
from .aggregation import aggregate, average_params, default_weights
from .data import Dataset, partition_major_minor
from .errors import ConfigError, EmptyDatasetError
from .laplace import DiagCurvature, posterior_from_curvature
from .masking import Mask, empty_mask, layer_mask, mask_churn, merge, select_mask
from .nn import Batch, NetworkSpec, build_network, evaluate, loss_and_grad, sgd_step
from .params import CLASSIFIER, FEATURE_EXTRACTOR, ParamSet

log = logging.getLogger(__name__)

FEDAVG = "fedavg"
FEDPER = "fedper"
LGFEDAVG = "lgfedavg"
FEDBPS = "fedbps"
METHODS = (FEDAVG, FEDPER, LGFEDAVG, FEDBPS)
BASELINES = (FEDAVG, FEDPER, LGFEDAVG)

# tag whose layers stay local under each layer-level method
PERSONAL_TAG = {FEDPER: CLASSIFIER, LGFEDAVG: FEATURE_EXTRACTOR}


@dataclass(frozen=True)
class LocalTraining:
    """Hyperparameters of ClientUpdate."""

    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("local epochs must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class ClientState:
    id: int
    params: ParamSet
    train: Dataset
    test: Optional[Dataset]
    rng: np.random.Generator
    buffers: Optional[ParamSet] = None
    last_train_loss: float = float("nan")

    @property
    def sample_count(self) -> int:
        return len(self.train)


@dataclass
class RoundRecord:
    round: int
    client_ids: list[int]
    train_loss: list[float]
    test_acc: list[float]
    global_test_acc: list[float]
    mask_churn: float
    personalized_fraction: float

    @property
    def mean_test_acc(self) -> float:
        return float(np.mean(self.test_acc))

    @property
    def mean_global_test_acc(self) -> float:
        return float(np.mean(self.global_test_acc))


@dataclass
class FederationResult:
    history: list[RoundRecord]
    clients: list[ClientState]
    global_params: ParamSet
    mask: Optional[Mask] = None

    @property
    def final_accuracy(self) -> float:
        """Mean personalized test accuracy over clients after the last round."""
        return self.history[-1].mean_test_acc if self.history else float("nan")

    @property
    def final_global_accuracy(self) -> float:
        return self.history[-1].mean_global_test_acc if self.history else float("nan")


def local_train(state: ClientState, spec: NetworkSpec, settings: LocalTraining) -> ParamSet:
    """E epochs of shuffled mini-batch SGD on the client's shard, in place.

    Momentum buffers start from zero every call.
    """
    n = state.sample_count
    if n == 0:
        raise EmptyDatasetError(f"client {state.id} has no training data")
    params = state.params
    buffers = params.zeros_like()
    x, y = state.train.inputs, state.train.labels
    last_epoch_loss = 0.0
    for _ in range(settings.epochs):
        order = state.rng.permutation(n)
        total = 0.0
        for start in range(0, n, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            loss, grads = loss_and_grad(spec, params, Batch(x[idx], y[idx]))
            sgd_step(params, grads, buffers, settings.lr, settings.momentum, settings.weight_decay)
            total += loss * len(idx)
        last_epoch_loss = total / n
    state.buffers = buffers
    state.last_train_loss = last_epoch_loss
    return params


def client_update(state: ClientState, spec: NetworkSpec, settings: LocalTraining,
                  compute_curvature: bool = True,
                  curvature_batch_size: int = 256) -> tuple[ParamSet, Optional[DiagCurvature]]:
    """Local training followed by the diagonal Fisher on the full local shard."""
    params = local_train(state, spec, settings)
    curvature = None
    if compute_curvature:
        curvature = laplace.estimate_curvature(spec, params, state.train, curvature_batch_size)
    return params, curvature


def _client_weights(clients: Sequence[ClientState], weights) -> list[float]:
    if not clients:
        raise ConfigError("need at least one client")
    return list(weights) if weights is not None else default_weights([c.sample_count for c in clients])


def _finish_round(clients, spec, w_g: ParamSet, mask: Mask, prev_mask: Optional[Mask],
                  round_index: int) -> RoundRecord:
    for c in clients:
        c.params = merge(c.params, w_g, mask)
    test_acc, global_acc = [], []
    for c in clients:
        if c.test is not None and len(c.test):
            test_acc.append(evaluate(spec, c.params, c.test))
            global_acc.append(evaluate(spec, w_g, c.test))
        else:
            test_acc.append(float("nan"))
            global_acc.append(float("nan"))
    return RoundRecord(
        round=round_index,
        client_ids=[c.id for c in clients],
        train_loss=[c.last_train_loss for c in clients],
        test_acc=test_acc,
        global_test_acc=global_acc,
        mask_churn=mask_churn(prev_mask, mask),
        personalized_fraction=mask.count / mask.size if mask.size else 0.0,
    )


def server_round_fedbps(clients: Sequence[ClientState], spec: NetworkSpec, settings: LocalTraining,
                        p: float, damping: float = laplace.DEFAULT_DAMPING, weights=None,
                        prev_mask: Optional[Mask] = None, round_index: int = 1,
                        curvature_batch_size: int = 256) -> tuple[RoundRecord, ParamSet, Mask]:
    """One FedBPS round; returns the record, the global mean and the mask."""
    weights = _client_weights(clients, weights)
    posteriors = []
    for c in clients:
        params, curvature = client_update(c, spec, settings, True, curvature_batch_size)
        posteriors.append(posterior_from_curvature(params, curvature, damping))
    global_post = aggregate(posteriors, weights)
    mask = select_mask(global_post.sigma, p)
    record = _finish_round(clients, spec, global_post.mu, mask, prev_mask, round_index)
    return record, global_post.mu, mask


def baseline_mask(method: str, params: ParamSet) -> Mask:
    if method == FEDAVG:
        return empty_mask(params)
    if method in PERSONAL_TAG:
        return layer_mask(params, PERSONAL_TAG[method])
    raise ConfigError(f"{method!r} is not a baseline; expected one of {BASELINES}")


def server_round_baseline(clients: Sequence[ClientState], spec: NetworkSpec, settings: LocalTraining,
                          method: str, weights=None, prev_mask: Optional[Mask] = None,
                          round_index: int = 1) -> tuple[RoundRecord, ParamSet, Mask]:
    """One FedAvg / FedPer / LG-FedAvg round through the shared merge path."""
    weights = _client_weights(clients, weights)
    mask = baseline_mask(method, clients[0].params)
    for c in clients:
        client_update(c, spec, settings, compute_curvature=False)
    w_g = average_params([c.params for c in clients], weights)
    record = _finish_round(clients, spec, w_g, mask, prev_mask, round_index)
    return record, w_g, mask


def client_rng(shuffle_seed: int, client_id: int) -> np.random.Generator:
    """The shuffle stream a client uses; exposed so tests can replay it."""
    return np.random.default_rng([shuffle_seed, client_id])


def make_clients(spec: NetworkSpec, init: ParamSet, train: Dataset, test: Optional[Dataset],
                 train_shards: Sequence[np.ndarray], test_shards: Sequence[np.ndarray],
                 shuffle_seed: int) -> list[ClientState]:
    """Clients holding copies of one broadcast init and per-client shuffle streams."""
    clients = []
    for i, tr in enumerate(train_shards):
        te = None
        if test_shards is not None and len(test_shards[i]):
            te = (test if test is not None else train).subset(test_shards[i])
        clients.append(ClientState(
            id=i, params=init.copy(), train=train.subset(tr), test=te,
            rng=client_rng(shuffle_seed, i),
        ))
    return clients


def run_rounds(clients: list[ClientState], spec: NetworkSpec, settings: LocalTraining, method: str,
               rounds: int, p: float = 0.7, damping: float = laplace.DEFAULT_DAMPING,
               on_round: Optional[Callable[[RoundRecord], None]] = None,
               curvature_batch_size: int = 256) -> FederationResult:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if rounds < 0:
        raise ConfigError("rounds must be >= 0")
    weights = default_weights([c.sample_count for c in clients])
    history: list[RoundRecord] = []
    w_g = average_params([c.params for c in clients], weights)
    mask = None
    for t in range(1, rounds + 1):
        if method == FEDBPS:
            record, w_g, mask = server_round_fedbps(clients, spec, settings, p, damping, weights,
                                                    mask, t, curvature_batch_size)
        else:
            record, w_g, mask = server_round_baseline(clients, spec, settings, method, weights, mask, t)
        log.info("round %d/%d %s: personalized acc %.4f, global acc %.4f, churn %.4f",
                 t, rounds, method, record.mean_test_acc, record.mean_global_test_acc, record.mask_churn)
        history.append(record)
        if on_round is not None:
            on_round(record)
    return FederationResult(history, clients, w_g, mask)


def run_federation(config, datasets: tuple[Dataset, Optional[Dataset]],
                   on_round: Optional[Callable[[RoundRecord], None]] = None) -> FederationResult:
    """Partition, initialise and run ``config.rounds`` rounds of ``config.method``.

    ``config`` is a :class:`fedbps.config.FederationConfig` (validated on
    construction); ``datasets`` is ``(train, test)`` where ``test`` may be
    None, in which case test shards come from unused training samples.
    """
    config.validate()
    train, test = datasets
    spec = config.network_spec(train)
    plan = partition_major_minor(
        train, config.n_clients, config.n_major, config.iid_share, config.data_seed,
        test_dataset=test, train_per_client=config.train_per_client,
        test_per_client=config.test_per_client, mode=config.partition_mode,
    )
    init = build_network(spec, config.init_seed)
    clients = make_clients(spec, init, train, test, plan.train_indices, plan.test_indices,
                           config.shuffle_seed)
    return run_rounds(clients, spec, config.local_training(), config.method, config.rounds,
                      config.p, config.damping, on_round, config.fisher_batch_size)
