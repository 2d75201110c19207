"""Membership inference scorers over a federated training trace.

Every attack is an estimator: ``fit(trace, model)`` stores what an
honest-but-curious server can see (global parameters and post-defense uploads,
never the batch ids), and ``score_samples(samples, round, client)`` returns one
score per candidate ``(token_sequence, label)``. Higher scores mean "more
likely a member of that client's batch in that round". The projection-residual
attack reports ``-residual`` under this convention.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import (DegenerateSpanWarning, InsufficientPopulationError, NeedsHistoryError,
                         ValidationError)
from .federation import ObservedTrace, TrainingTrace
from .linalg import DEFAULT_RANK_TOL, Subspace, as_matrix, cosine_similarity, project_onto, span
from .model import FedModel, GradientUpdate


@dataclass(frozen=True)
class AttackVerdict:
    score: float
    residual: float
    decision: bool
    threshold: float


def _weight_gradient(grad, module_id=None) -> np.ndarray:
    if isinstance(grad, GradientUpdate):
        per_module = grad.per_module
        if module_id is None:
            if len(per_module) != 1:
                raise ValidationError(f"module_id required, update has modules {sorted(per_module)}")
            module_id = next(iter(per_module))
        if module_id not in per_module:
            raise ValidationError(f"update has no trainable module {module_id!r}")
        return per_module[module_id]
    return as_matrix(grad, "grad", allow_empty=True)


def projres_residuals(subspace: Subspace, embeddings) -> np.ndarray:
    """Per-row l1 distance from ``embeddings`` to ``subspace``."""
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    return np.sum(np.abs(X - project_onto(subspace, X)), axis=1)


def projres_score(grad, module_id, embeddings, rank_tol: float = DEFAULT_RANK_TOL):
    """Mean l1 projection residual of a candidate's token rows onto ``Span(grad)``.

    ``grad`` is a GradientUpdate (``module_id`` selects the weight) or the
    ``n x m`` weight gradient itself. Returns ``(residual, degenerate)``;
    ``degenerate`` is True when the span is empty, in which case the residual
    is the mean l1 norm of the rows.
    """
    G = _weight_gradient(grad, module_id)
    S = span(G, rank_tol)
    return float(np.mean(projres_residuals(S, embeddings))), S.rank == 0


def projres_decide(r: float, tau: float) -> bool:
    """Member iff the residual is below the threshold."""
    if r < 0:
        raise ValidationError(f"residual must be >= 0, got {r}")
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    return bool(r < tau)


def _as_samples(samples) -> List[tuple]:
    out = []
    for s in samples:
        seq, label = s
        out.append((tuple(int(t) for t in seq), int(label)))
    return out


class MembershipAttack(BaseEstimator):
    """Base class. Subclasses implement :meth:`_score`."""

    kind = "base"

    def fit(self, trace, model: FedModel):
        if isinstance(trace, TrainingTrace):
            trace = trace.adversary_view()
        if not isinstance(trace, ObservedTrace):
            raise ValidationError("fit expects a TrainingTrace or ObservedTrace")
        self.trace_ = trace
        self.model_ = model
        self._cache: Dict[tuple, object] = {}
        return self

    def score_sample(self, sample, round: int, client: int) -> float:
        return float(self.score_samples([sample], round, client)[0])

    def score_samples(self, samples, round: int, client: int) -> np.ndarray:
        check_is_fitted(self, "trace_")
        return np.array([self._score(s, round, client) for s in _as_samples(samples)])

    # -- trace access, with history errors ------------------------------------

    def _params(self, t):
        try:
            return self.trace_.params[t]
        except KeyError:
            raise NeedsHistoryError(f"{self.kind}: global parameters for round {t} are not in the trace") from None

    def _upload(self, t, client) -> GradientUpdate:
        try:
            return self.trace_.updates[t][client]
        except KeyError:
            raise NeedsHistoryError(f"{self.kind}: no upload from client {client} in round {t}") from None

    def _loss(self, t, sample) -> float:
        key = ("loss", t, sample)
        if key not in self._cache:
            seq, label = sample
            self._cache[key] = float(self.model_.per_sample_losses(self._params(t), [list(seq)], [label])[0])
        return self._cache[key]

    def _sample_gradient(self, t, sample) -> np.ndarray:
        key = ("grad", t, sample)
        if key not in self._cache:
            seq, label = sample
            _, g = self.model_.loss_and_gradients(self._params(t), [list(seq)], [label])
            self._cache[key] = g.vector()
        return self._cache[key]

    def _score(self, sample, round, client) -> float:
        raise NotImplementedError


class ProjRes(MembershipAttack):
    """Projection-residual membership inference.

    The candidate's hidden rows at each attacked layer's input are recomputed
    at the round's global parameters and projected onto the span of the
    client's uploaded weight gradient for that layer. The residual is the mean
    per-token l1 norm of what is left; with several attacked layers the
    smallest residual wins.

    Parameters
    ----------
    module_ids : sequence of str or None
        Layers to attack; None attacks every trainable module.
    rank_tol : float
        Relative pivot tolerance for the span's numerical rank.
    tau : float
        Decision threshold: member iff residual < tau.
    """

    kind = "projres"

    def __init__(self, module_ids=None, rank_tol=DEFAULT_RANK_TOL, tau=1e-2):
        self.module_ids = module_ids
        self.rank_tol = rank_tol
        self.tau = tau

    def _module_ids(self) -> List[str]:
        if self.module_ids is None:
            return [m.module_id for m in self.model_.modules]
        return list(self.module_ids)

    def _span(self, t, client, mid) -> Subspace:
        key = ("span", t, client, mid)
        if key not in self._cache:
            self._cache[key] = span(_weight_gradient(self._upload(t, client), mid), self.rank_tol)
        return self._cache[key]

    def residual(self, sample, round: int, client: int) -> float:
        check_is_fitted(self, "trace_")
        (sample,) = _as_samples([sample])
        return self._residual(sample, round, client)

    def _residual(self, sample, t, client) -> float:
        ids = self._module_ids()
        seq, _ = sample
        inputs = self.model_.layer_inputs(self._params(t), [list(seq)], module_ids=ids)
        best = np.inf
        for mid in ids:
            S = self._span(t, client, mid)
            if S.rank == 0:
                warnings.warn(f"empty gradient span for {mid} (round {t}, client {client})",
                              DegenerateSpanWarning, stacklevel=3)
            best = min(best, float(np.mean(projres_residuals(S, inputs[mid].embeddings))))
        return best

    def residuals(self, samples, round: int, client: int) -> np.ndarray:
        check_is_fitted(self, "trace_")
        return np.array([self._residual(s, round, client) for s in _as_samples(samples)])

    def _score(self, sample, round, client) -> float:
        return -self._residual(sample, round, client)

    def predict(self, samples, round: int, client: int) -> np.ndarray:
        return np.array([projres_decide(r, self.tau) for r in self.residuals(samples, round, client)])

    def verdict(self, sample, round: int, client: int) -> AttackVerdict:
        r = self.residual(sample, round, client)
        return AttackVerdict(score=-r, residual=r, decision=projres_decide(r, self.tau), threshold=self.tau)


class FedLoss(MembershipAttack):
    """Negative loss of the candidate under the round's global model."""

    kind = "fedloss"

    def _score(self, sample, round, client):
        return -self._loss(round, sample)


class ScoreDiff(MembershipAttack):
    """Loss drop from the previous round's model to this round's."""

    kind = "score_diff"

    def _score(self, sample, round, client):
        if round < 1:
            raise NeedsHistoryError("score_diff needs the previous round")
        return self._loss(round - 1, sample) - self._loss(round, sample)


class ScoreRatio(MembershipAttack):
    """Ratio of the previous round's loss to this round's."""

    kind = "score_ratio"

    def __init__(self, eps=1e-12):
        self.eps = eps

    def _score(self, sample, round, client):
        if round < 1:
            raise NeedsHistoryError("score_ratio needs the previous round")
        return self._loss(round - 1, sample) / max(self._loss(round, sample), self.eps)


class Cosine(MembershipAttack):
    """Cosine similarity between the client's upload and the candidate's own gradient."""

    kind = "cosine"

    def _score(self, sample, round, client):
        return cosine_similarity(self._upload(round, client).vector(), self._sample_gradient(round, sample))


class GradientDiff(MembershipAttack):
    """Negative Euclidean distance between the client's upload and the candidate's gradient."""

    kind = "gradient_diff"

    def _score(self, sample, round, client):
        return -float(np.linalg.norm(self._upload(round, client).vector() - self._sample_gradient(round, sample)))


class FTA(MembershipAttack):
    """Training-dynamics score: negative least-squares slope of the candidate's loss over a window.

    The window is the ``window`` rounds ending at ``round`` (clipped at round
    0); every round in it must be in the trace and it must hold at least two.
    """

    kind = "fta"

    def __init__(self, window=5):
        self.window = window

    def _score(self, sample, round, client):
        rounds = list(range(max(0, round - self.window + 1), round + 1))
        if len(rounds) < 2:
            raise NeedsHistoryError(f"fta needs >= 2 rounds of history, window has {len(rounds)}")
        missing = [t for t in rounds if t not in self.trace_.params]
        if missing:
            raise NeedsHistoryError(f"fta needs rounds {missing} which are not in the trace")
        x = np.asarray(rounds, dtype=np.float64)
        y = np.array([self._loss(t, sample) for t in rounds])
        xc = x - x.mean()
        slope = float(xc @ (y - y.mean()) / (xc @ xc))
        return -slope


class FedMIA(MembershipAttack):
    """Z-score of the target client's gradient similarity against the other clients.

    The candidate's gradient is compared (cosine) with every upload of the
    round; the other clients' similarities model the non-member distribution.
    ``degenerate_`` counts scores that hit a zero spread and were set to 0.
    """

    kind = "fedmia"

    def __init__(self, min_clients=3):
        self.min_clients = min_clients

    def fit(self, trace, model):
        super().fit(trace, model)
        self.degenerate_ = 0
        return self

    def _score(self, sample, round, client):
        uploads = self.trace_.updates.get(round)
        if uploads is None:
            raise NeedsHistoryError(f"fedmia: round {round} is not in the trace")
        if client not in uploads:
            raise NeedsHistoryError(f"fedmia: no upload from client {client} in round {round}")
        if len(uploads) < self.min_clients:
            raise InsufficientPopulationError(
                f"fedmia needs uploads from >= {self.min_clients} clients, round {round} has {len(uploads)}")
        g = self._sample_gradient(round, sample)
        sims = {k: cosine_similarity(u.vector(), g) for k, u in uploads.items()}
        ref = np.array([sims[k] for k in sorted(sims) if k != client])
        sd = ref.std()
        if sd == 0.0:
            self.degenerate_ += 1
            return 0.0
        return float((sims[client] - ref.mean()) / sd)


ATTACKS = {cls.kind: cls for cls in (ProjRes, FedLoss, ScoreDiff, ScoreRatio, Cosine,
                                      GradientDiff, FTA, FedMIA)}


def make_attack(kind: str, **params) -> MembershipAttack:
    try:
        cls = ATTACKS[kind]
    except KeyError:
        raise ValidationError(f"unknown attack {kind!r}; expected one of {sorted(ATTACKS)}") from None
    return cls(**params)


# -- evaluation harness -------------------------------------------------------


@dataclass
class EvaluationPairs:
    """Per repetition: the attacked client, one member id from its batch, one non-member id."""

    round: int
    clients: np.ndarray
    member_ids: np.ndarray
    nonmember_ids: np.ndarray

    def __len__(self):
        return len(self.clients)


@dataclass
class EvaluationResult:
    attack: str
    params: dict
    pairs: EvaluationPairs
    member_scores: np.ndarray
    nonmember_scores: np.ndarray


def draw_evaluation_pairs(trace: TrainingTrace, round: int, nonmember_pool=None,
                          repetitions: int = 100, seed: int = 0, client: Optional[int] = None,
                          nonmember_source: str = "holdout") -> EvaluationPairs:
    """Sample member/non-member pairs from the ground truth recorded in the trace.

    Each repetition picks a client (or uses ``client``), a member from that
    client's batch in ``round``, and a non-member outside that client's whole
    partition: from ``nonmember_pool`` (``"holdout"``) or from the other
    clients' partitions (``"other_clients"``).
    """
    if round not in trace.records:
        raise ValidationError(f"round {round} is not in the trace")
    rec = trace.records[round]
    if repetitions < 1:
        raise ValidationError("repetitions must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, round, 0xE7A1]))
    available = sorted(rec.batches)
    if client is not None and client not in rec.batches:
        raise ValidationError(f"client {client} has no batch in round {round}")
    if nonmember_source not in ("holdout", "other_clients"):
        raise ValidationError(f"unknown nonmember_source {nonmember_source!r}")
    clients, members, nonmembers = [], [], []
    for _ in range(repetitions):
        k = client if client is not None else available[int(rng.integers(len(available)))]
        batch = rec.batches[k]
        if len(batch) == 0:
            raise ValidationError(f"client {k} has an empty batch in round {round}")
        own = set(trace.partitions[k].tolist())
        if nonmember_source == "holdout":
            pool = np.asarray([] if nonmember_pool is None else nonmember_pool, dtype=np.int64)
        else:
            pool = np.concatenate([p for j, p in enumerate(trace.partitions) if j != k])
        pool = np.array([i for i in pool.tolist() if i not in own], dtype=np.int64)
        if pool.size == 0:
            raise ValidationError("no non-member candidates available")
        clients.append(k)
        members.append(int(batch[int(rng.integers(len(batch)))]))
        nonmembers.append(int(pool[int(rng.integers(pool.size))]))
    return EvaluationPairs(round, np.array(clients), np.array(members), np.array(nonmembers))


def evaluate_attack(attack: MembershipAttack, dataset, pairs: EvaluationPairs) -> EvaluationResult:
    """Score every pair with a fitted attack; returns member and non-member score lists."""
    check_is_fitted(attack, "trace_")
    ms, ns = [], []
    for k, mi, ni in zip(pairs.clients, pairs.member_ids, pairs.nonmember_ids):
        ms.append(attack.score_sample(dataset.sample(mi), pairs.round, int(k)))
        ns.append(attack.score_sample(dataset.sample(ni), pairs.round, int(k)))
    return EvaluationResult(attack.kind, attack.get_params(), pairs, np.array(ms), np.array(ns))
