import csv
import io

import pytest
from hypothesis import given
from hypothesis import strategies as st

from projres.exceptions import ValidationError
from projres.theory import (BoundaryCase, Regime, classify_regime, empirical_boundary_scan, p_max,
                            scan_to_csv, sharp_p_max, upsampling_preserves_rank)

CASES = [
    BoundaryCase(64, 32, 16, Regime.RECOVERABLE),
    BoundaryCase(64, 32, 32, Regime.RECOVERABLE),
    BoundaryCase(64, 32, 33, Regime.CAPACITY_LIMITED),
    BoundaryCase(64, 64, 63, Regime.RECOVERABLE),
    BoundaryCase(64, 64, 64, Regime.FULL_RANK_DEGENERATE),
    BoundaryCase(64, 128, 100, Regime.FULL_RANK_DEGENERATE),
    BoundaryCase(2, 1, 1, Regime.RECOVERABLE),
    BoundaryCase(16, 32, 20, Regime.FULL_RANK_DEGENERATE),
    BoundaryCase(64, 8, 20, Regime.CAPACITY_LIMITED),
]


@pytest.mark.parametrize("case", CASES, ids=lambda c: f"{c.n}-{c.m}-{c.p}")
def test_classify_examples(case):
    assert classify_regime(case.n, case.m, case.p) is case.expected_regime


@given(st.integers(2, 500), st.integers(1, 500), st.integers(1, 1000))
def test_classify_matches_p_max(n, m, p):
    r = classify_regime(n, m, p)
    assert (r is Regime.RECOVERABLE) == (p <= min(n - 1, m))
    if r is not Regime.RECOVERABLE:
        assert (r is Regime.FULL_RANK_DEGENERATE) == (m >= n)


def test_classify_invalid():
    for args in [(0, 1, 1), (4, 0, 1), (4, 2, 0), (4, 2, 1.5)]:
        with pytest.raises(ValidationError):
            classify_regime(*args)


@pytest.mark.parametrize("n,m", [(32, 16), (64, 32), (64, 64)])
def test_scan_is_sharp(n, m):
    rows = empirical_boundary_scan(n, m, range(1, n + 1), trials=30, seed=0, workers=4)
    assert sharp_p_max(rows) == p_max(n, m)


def test_scan_regimes_past_boundary():
    rows = {r.p: r for r in empirical_boundary_scan(32, 32, [31, 32, 40], trials=20)}
    assert rows[31].recovered
    # the span is all of R^n: members recovered but indistinguishable
    assert rows[32].max_residual < 1e-8 and rows[32].auc < 0.7 and not rows[32].recovered
    rows = {r.p: r for r in empirical_boundary_scan(32, 8, [8, 9], trials=20)}
    assert rows[8].recovered and not rows[9].recovered


def test_scan_deterministic_across_workers():
    a = empirical_boundary_scan(16, 8, range(1, 17), trials=5, seed=3, workers=1)
    b = empirical_boundary_scan(16, 8, range(1, 17), trials=5, seed=3, workers=3)
    assert a == b


def test_scan_csv():
    rows = empirical_boundary_scan(8, 4, [1, 2], trials=2)
    parsed = list(csv.reader(io.StringIO(scan_to_csv(rows))))
    assert parsed[0] == ["n", "m", "p", "mean_residual", "auc"]
    assert [int(r[2]) for r in parsed[1:]] == [1, 2]


def test_scan_invalid():
    with pytest.raises(ValidationError):
        empirical_boundary_scan(8, 4, [])
    with pytest.raises(ValidationError):
        empirical_boundary_scan(8, 4, [0])


def test_sharp_p_max_prefix_only():
    rows = empirical_boundary_scan(16, 4, [1, 2, 3, 4, 5, 6], trials=10)
    assert sharp_p_max(rows) == 4


@pytest.mark.parametrize("seed", range(30))
def test_upsampling_preserves_rank(seed):
    assert upsampling_preserves_rank(16, 1 + seed % 24, factor=4, seed=seed)
