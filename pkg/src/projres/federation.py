"""FedSGD simulator.

Each round every client draws one mini-batch from its own partition, computes
the gradient of the trainable parameters at the current global parameters,
applies its defense and uploads the result. The server averages the uploads in
ascending client-id order and takes one gradient step. Everything the attacks
and the evaluation harness need is kept in a :class:`TrainingTrace`.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional

import numpy as np
from sklearn.base import BaseEstimator

from .defenses import DefenseConfig, apply_defense
from .exceptions import ValidationError
from .model import FedModel, GradientUpdate, Params

THREADS_ENV = "PROJRES_THREADS"


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 30
    batch_size: int = 4
    learning_rate: float = 0.1
    rounds: int = 50
    seed: int = 0
    defense: Optional[DefenseConfig] = None

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValidationError("num_clients must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")


def partition_data(dataset_or_ids, k: int, seed: int) -> List[np.ndarray]:
    """Shuffle sample ids and deal them into ``k`` disjoint, near-equal parts.

    Sizes differ by at most one; the first ``len % k`` parts get the extra id.
    Accepts a dataset, an int count, or an explicit id array.
    """
    if isinstance(dataset_or_ids, (int, np.integer)):
        ids = np.arange(int(dataset_or_ids))
    elif hasattr(dataset_or_ids, "sequences"):
        ids = np.arange(len(dataset_or_ids))
    else:
        ids = np.asarray(dataset_or_ids, dtype=np.int64)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > len(ids):
        raise ValidationError(f"cannot split {len(ids)} samples among {k} clients")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A27]))
    shuffled = ids[rng.permutation(len(ids))]
    return [np.sort(part) for part in np.array_split(shuffled, k)]


class BatchSampler:
    """Draws batches without replacement from one client's ids, reshuffling each epoch."""

    def __init__(self, ids, batch_size: int, seed):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.batch_size = min(batch_size, len(self.ids))
        self._rng = np.random.default_rng(np.random.SeedSequence(seed))
        self._order = self._rng.permutation(self.ids)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self._rng.permutation(self.ids)
            self._pos = 0
        out = self._order[self._pos: self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def client_round(model: FedModel, params: Params, dataset, batch_ids, defense=None,
                 round: int = 0, client: int = 0):
    """One client's local step: returns ``(loss, upload)`` with the defense applied."""
    seqs, labels = dataset.batch(batch_ids)
    loss, grad = model.loss_and_gradients(params, seqs, labels)
    grad.round, grad.client = round, client
    return loss, apply_defense(grad, defense, round, client)


def aggregate_and_step(params: Mapping[str, np.ndarray], updates, lr: float) -> Params:
    """``theta - lr / K * sum_k g_k``, summing in ascending client-id order.

    ``updates`` is a sequence of GradientUpdates or a ``{client: update}``
    mapping; a mapping is always summed in sorted key order, which makes the
    result independent of arrival order.
    """
    if isinstance(updates, Mapping):
        ordered = [updates[c] for c in sorted(updates)]
    else:
        ordered = sorted(updates, key=lambda u: u.client)
    if not ordered:
        raise ValidationError("no updates to aggregate")
    K = len(ordered)
    new = {}
    for name, theta in params.items():
        total = np.zeros_like(theta)
        for u in ordered:
            g = u.grads.get(name)
            if g is None or g.shape != theta.shape:
                raise ValidationError(f"update for client {u.client} has no matching {name!r}")
            total += g
        new[name] = theta - (lr / K) * total
    return new


@dataclass
class RoundRecord:
    """What happened in one round. ``params`` are the global parameters the clients used."""

    round: int
    params: Params
    updates: Dict[int, GradientUpdate]
    batches: Dict[int, np.ndarray]
    losses: Dict[int, float] = field(default_factory=dict)

    @property
    def mean_loss(self) -> float:
        return float(np.mean([self.losses[c] for c in sorted(self.losses)]))


@dataclass
class ObservedTrace:
    """The adversary's view: global parameters and post-defense uploads, no batch ids."""

    params: Dict[int, Params]
    updates: Dict[int, Dict[int, GradientUpdate]]

    @property
    def rounds(self) -> List[int]:
        return sorted(self.params)


@dataclass
class TrainingTrace:
    config: FederationConfig
    records: Dict[int, RoundRecord]
    partitions: List[np.ndarray]
    final_params: Params

    def __len__(self):
        return len(self.records)

    @property
    def rounds(self) -> List[int]:
        return sorted(self.records)

    def __getitem__(self, t: int) -> RoundRecord:
        return self.records[t]

    def params_at(self, t: int) -> Params:
        """Global parameters used in round ``t``; ``t == last + 1`` gives the final model."""
        if t in self.records:
            return self.records[t].params
        if self.records and t == max(self.records) + 1:
            return self.final_params
        raise KeyError(t)

    def adversary_view(self) -> ObservedTrace:
        return ObservedTrace({t: r.params for t, r in self.records.items()},
                             {t: dict(r.updates) for t, r in self.records.items()})

    def restrict(self, rounds=None, clients=None) -> "TrainingTrace":
        """Copy of the trace keeping only the given rounds and/or clients."""
        keep_r = set(self.records) if rounds is None else set(rounds)
        out = {}
        for t, r in self.records.items():
            if t not in keep_r:
                continue
            keep_c = set(r.updates) if clients is None else set(clients)
            out[t] = RoundRecord(t, r.params,
                                 {c: u for c, u in r.updates.items() if c in keep_c},
                                 {c: b for c, b in r.batches.items() if c in keep_c},
                                 {c: v for c, v in r.losses.items() if c in keep_c})
        return replace(self, records=out)


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_training(config: FederationConfig, dataset, model: FedModel, train_ids=None,
                 init_params: Optional[Params] = None) -> TrainingTrace:
    """Run ``config.rounds`` FedSGD rounds and record the full trace.

    ``train_ids`` restricts which dataset ids are partitioned among clients
    (the rest can serve as held-out non-members). Client steps in a round may
    run on a thread pool (``PROJRES_THREADS``); results do not depend on it.
    """
    ids = np.arange(len(dataset)) if train_ids is None else np.asarray(train_ids)
    partitions = partition_data(ids, config.num_clients, config.seed)
    samplers = [BatchSampler(part, config.batch_size, [config.seed, 0x5A3, k])
                for k, part in enumerate(partitions)]
    params = init_params if init_params is not None else model.init_params(config.seed)
    records: Dict[int, RoundRecord] = {}
    workers = _thread_count()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(config.rounds):
            batches = {k: s.next_batch() for k, s in enumerate(samplers)}

            def work(k, params=params, t=t):
                return client_round(model, params, dataset, batches[k], config.defense, t, k)

            clients = range(config.num_clients)
            results = list(pool.map(work, clients)) if pool else [work(k) for k in clients]
            updates = {k: results[k][1] for k in clients}
            losses = {k: results[k][0] for k in clients}
            records[t] = RoundRecord(t, params, updates, batches, losses)
            params = aggregate_and_step(params, updates, config.learning_rate)
    finally:
        if pool:
            pool.shutdown()
    return TrainingTrace(config, records, partitions, params)


class FedSGD(BaseEstimator):
    """Estimator wrapper around :func:`run_training`.

    ``fit(dataset, model)`` trains and stores the trace in ``trace_`` and the
    final global parameters in ``params_``.
    """

    def __init__(self, num_clients=30, batch_size=4, learning_rate=0.1, rounds=50, seed=0,
                 defense=None):
        self.num_clients = num_clients
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.rounds = rounds
        self.seed = seed
        self.defense = defense

    def to_config(self) -> FederationConfig:
        return FederationConfig(self.num_clients, self.batch_size, self.learning_rate,
                                self.rounds, self.seed, self.defense)

    def fit(self, dataset, model: FedModel, train_ids=None):
        self.trace_ = run_training(self.to_config(), dataset, model, train_ids)
        self.params_ = self.trace_.final_params
        return self
