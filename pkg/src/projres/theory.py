"""Recoverability regimes of the gradient span and an empirical boundary scan.

For a linear layer with input batch ``X`` (``p x n``) and output width ``m``,
the weight gradient ``X.T @ dY`` spans exactly the rows of ``X`` when
``p <= min(n - 1, m)``. Past that point either the span fills the whole space
(``m >= n``) or it is too narrow to hold every row (``m < n``).
"""
from __future__ import annotations

import csv
import enum
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .linalg import numerical_rank, span
from .metrics import roc_and_auc

MEMBER_TOL = 1e-8


class Regime(str, enum.Enum):
    RECOVERABLE = "Recoverable"
    FULL_RANK_DEGENERATE = "FullRankDegenerate"
    CAPACITY_LIMITED = "CapacityLimited"


@dataclass(frozen=True)
class BoundaryCase:
    n: int
    m: int
    p: int
    expected_regime: Regime


def p_max(n: int, m: int) -> int:
    """Largest batch row count whose rows are all recoverable from the span."""
    return min(n - 1, m)


def classify_regime(n: int, m: int, p: int) -> Regime:
    for name, v in (("n", n), ("m", m), ("p", p)):
        if int(v) != v or v < 1:
            raise ValidationError(f"{name} must be a positive integer, got {v!r}")
    if p <= p_max(n, m):
        return Regime.RECOVERABLE
    return Regime.FULL_RANK_DEGENERATE if m >= n else Regime.CAPACITY_LIMITED


@dataclass(frozen=True)
class ScanRow:
    n: int
    m: int
    p: int
    mean_residual: float
    max_residual: float
    auc: float

    @property
    def recovered(self) -> bool:
        return self.max_residual < MEMBER_TOL and self.auc == 1.0


def _trial(n, m, p, seed, trial):
    rng = np.random.default_rng(np.random.SeedSequence([seed, n, m, p, trial, 0x5CA9]))
    X = rng.standard_normal((p, n))
    dY = rng.standard_normal((p, m))
    fresh = rng.standard_normal((p, n))
    S = span(X.T @ dY)
    q = S.basis

    def resid(R):
        return np.sum(np.abs(R - (R @ q) @ q.T), axis=1)

    return resid(X), resid(fresh)


def empirical_boundary_scan(n: int, m: int, p_values: Iterable[int], trials: int = 50,
                            seed: int = 0, workers: int = 1) -> List[ScanRow]:
    """Measure recovery of Gaussian batches on each side of the boundary.

    Each trial draws a generic batch ``X`` and output gradient ``dY``, builds
    the span of ``X.T @ dY`` and computes the l1 residual of every batch row
    (members) and of as many fresh rows (non-members). Per ``p`` the rows of
    all trials are pooled into the mean and max member residual and an AUC
    with score ``-residual``.
    """
    p_values = [int(p) for p in p_values]
    if not p_values:
        raise ValidationError("p_values is empty")
    if n < 2 or m < 1 or min(p_values) < 1:
        raise ValidationError("need n >= 2, m >= 1 and every p >= 1")
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    jobs = [(p, t) for p in p_values for t in range(trials)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(lambda j: _trial(n, m, j[0], seed, j[1]), jobs))
    else:
        out = [_trial(n, m, p, seed, t) for p, t in jobs]
    rows = []
    for i, p in enumerate(p_values):
        chunk = out[i * trials:(i + 1) * trials]
        mem = np.concatenate([c[0] for c in chunk])
        non = np.concatenate([c[1] for c in chunk])
        auc = roc_and_auc(-mem, -non).auc
        rows.append(ScanRow(n, m, p, float(mem.mean()), float(mem.max()), auc))
    return rows


def sharp_p_max(rows: Sequence[ScanRow]) -> int:
    """Largest scanned ``p`` such that it and every smaller scanned ``p`` were recovered.

    A ``p`` counts as recovered when every member residual is below
    ``MEMBER_TOL`` and members are perfectly separated from non-members. The
    second condition matters once the span fills the whole space: then
    members have zero residual but so does everything else. Returns 0 when
    the smallest ``p`` already fails.
    """
    best = 0
    for row in sorted(rows, key=lambda r: r.p):
        if not row.recovered:
            break
        best = row.p
    return best


def scan_to_csv(rows: Sequence[ScanRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "m", "p", "mean_residual", "auc"])
    for r in rows:
        w.writerow([r.n, r.m, r.p, repr(r.mean_residual), repr(r.auc)])
    return buf.getvalue()


def upsampling_preserves_rank(n: int, p: int, factor: int = 4, seed: int = 0,
                              rank_tol: Optional[float] = None) -> bool:
    """Check rank(X W_up^T) == rank(X) for a seeded generic ``X`` and ``W_up``.

    The up-projection maps ``n`` to ``factor * n`` dimensions; it cannot add
    rank, so recoverability is still decided by the original ``n``.
    """
    if factor < 2:
        raise ValidationError("factor must be >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, n, p, 0x0B5A]))
    X = rng.standard_normal((p, n))
    w_up = rng.standard_normal((factor * n, n))
    kw = {} if rank_tol is None else {"rank_tol": rank_tol}
    return numerical_rank(X @ w_up.T, **kw) == numerical_rank(X, **kw)
