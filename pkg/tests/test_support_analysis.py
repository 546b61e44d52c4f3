import itertools
from fractions import Fraction

import numpy as np
import pytest

from src.structure.support_analysis import (
    RATE_HEADER,
    SupportMatrix,
    generic_rank,
    random_support,
    restrict_columns,
    satisfies_ss_source,
    satisfies_ss_source_pairwise,
    source_intersection,
    ss_all_rate_exhaustive,
    ss_holds_batch,
    ss_rate_monte_carlo,
    ss_rate_table,
    ss_report,
    ss_source_fraction_exhaustive,
    ss_source_probability_analytic,
    wilson_interval,
)
from src.utils.errors import ValidationError


def _all_masks(m, n):
    for bits in itertools.product((0, 1), repeat=m * n):
        yield SupportMatrix(np.array(bits, dtype=bool).reshape(m, n))


def test_identity_support_satisfies_every_source():
    report = ss_report(SupportMatrix.identity(3))
    assert report.all_hold
    assert report.fraction == 1.0
    assert [c.intersection for c in report.per_source] == [(0,), (1,), (2,)]


def test_full_support_fails_every_source():
    report = ss_report(SupportMatrix.full(3, 3))
    assert not report.all_hold
    assert report.fraction == 0.0


def test_witness_rows_and_intersection():
    # rows: {0}, {0,1}, {1,2}, {2}
    S = SupportMatrix.from_row_sets([{0}, {0, 1}, {1, 2}, {2}], n=3)
    assert source_intersection(S, 1) == frozenset({1})
    report = ss_report(S)
    assert report.all_hold
    assert report.per_source[1].witness_rows == (1, 2)


def test_empty_column_fails():
    S = SupportMatrix(np.array([[1, 0], [1, 0]], dtype=bool))
    assert not satisfies_ss_source(S, 1)
    assert source_intersection(S, 1) == frozenset({0, 1})
    assert ss_report(S).fraction == 0.5


def test_source_index_out_of_range():
    with pytest.raises(ValidationError):
        satisfies_ss_source(SupportMatrix.identity(2), 2)


@pytest.mark.parametrize("m,n", [(2, 2), (3, 2), (2, 3)])
def test_pairwise_characterisation_matches_intersection(m, n):
    for S in _all_masks(m, n):
        for k in range(n):
            assert satisfies_ss_source(S, k) == satisfies_ss_source_pairwise(S, k)


def test_batch_matches_scalar_report():
    rng = np.random.default_rng(0)
    masks = rng.random((200, 5, 3)) < 0.5
    batch = ss_holds_batch(masks)
    for t in range(masks.shape[0]):
        expected = [c.holds for c in ss_report(SupportMatrix(masks[t])).per_source]
        assert batch[t].tolist() == expected


def test_support_matrix_is_read_only_and_hashable():
    S = SupportMatrix(np.eye(2))
    with pytest.raises(ValueError):
        S.mask[0, 0] = False
    assert S == SupportMatrix.identity(2)
    assert len({S, SupportMatrix.identity(2)}) == 1


def test_support_matrix_json():
    S = SupportMatrix.from_row_sets([{0, 2}, {1}], n=3)
    assert S.to_dict() == {"m": 2, "n": 3, "rows": [[1, 0, 1], [0, 1, 0]]}
    assert SupportMatrix.from_json(S.to_json()) == S


@pytest.mark.parametrize("text", ["{", "[1, 2]", '{"m": 2, "n": 2, "rows": [[1, 0]]}', '{"m": 1, "n": 2, "rows": [[1, 2]]}'])
def test_support_matrix_bad_json(text):
    with pytest.raises(ValidationError):
        SupportMatrix.from_json(text)


def test_restrict_columns():
    S = SupportMatrix(np.array([[1, 1, 0], [0, 1, 1]], dtype=bool))
    R = restrict_columns(S, [0, 2])
    assert R.mask.tolist() == [[True, False], [False, True]]
    with pytest.raises(ValidationError):
        restrict_columns(S, [])


def test_random_support_validation_and_determinism():
    assert random_support(4, 3, 0.5, seed=1) == random_support(4, 3, 0.5, seed=1)
    assert random_support(4, 3, 0.0, seed=1).cardinality() == 0
    with pytest.raises(ValidationError):
        random_support(4, 3, 1.5, seed=1)


def test_generic_rank():
    assert generic_rank(SupportMatrix.identity(3)) == 3
    assert generic_rank(SupportMatrix(np.array([[1, 1], [0, 0], [0, 0]], dtype=bool))) == 1
    assert generic_rank(SupportMatrix(np.zeros((2, 2), dtype=bool))) == 0


def test_exhaustive_all_rate_golden(golden):
    for key, value in golden("ss_all_rate_exhaustive.json").items():
        m, n = (int(v) for v in key.split("x"))
        assert ss_all_rate_exhaustive(m, n) == Fraction(value)


def test_source_probability_golden(golden):
    for key, value in golden("ss_source_probability.json").items():
        m, n = (int(v) for v in key.split("x"))
        assert ss_source_probability_analytic(m, n) == Fraction(value)
        assert ss_source_fraction_exhaustive(m, n) == Fraction(value)


@pytest.mark.parametrize("m,n", [(m, n) for m in range(1, 7) for n in range(1, 5) if m * n <= 12])
def test_analytic_matches_enumeration(m, n):
    assert ss_source_probability_analytic(m, n) == ss_source_fraction_exhaustive(m, n)


@pytest.mark.slow
@pytest.mark.parametrize("m,n", [(m, n) for m in range(1, 21) for n in range(1, 21) if 12 < m * n <= 20])
def test_analytic_matches_enumeration_full_grid(m, n):
    assert ss_source_probability_analytic(m, n) == ss_source_fraction_exhaustive(m, n)


def test_exhaustive_size_limit():
    with pytest.raises(ValidationError):
        ss_all_rate_exhaustive(5, 5)


def test_monte_carlo_matches_exhaustive_rate():
    est = ss_rate_monte_carlo(3, 2, p=0.5, trials=20000, seed=0)
    assert est.ci_low <= est.rate <= est.ci_high
    assert abs(est.rate - 9 / 32) < 0.02


def test_monte_carlo_worker_count_does_not_change_result():
    a = ss_rate_monte_carlo(6, 3, trials=1500, seed=7, workers=1, block_size=256)
    b = ss_rate_monte_carlo(6, 3, trials=1500, seed=7, workers=2, block_size=256)
    assert a == b


def test_monte_carlo_edge_densities():
    assert ss_rate_monte_carlo(4, 2, p=0.0, trials=100).rate == 0.0
    assert ss_rate_monte_carlo(4, 2, p=1.0, trials=100).rate == 0.0
    assert ss_rate_monte_carlo(1, 1, p=1.0, trials=100).rate == 1.0


@pytest.mark.parametrize("kwargs", [{"trials": 0}, {"p": -0.1}, {"variant": "median"}, {"seed": -1}])
def test_monte_carlo_validation(kwargs):
    with pytest.raises(ValidationError):
        ss_rate_monte_carlo(3, 2, **kwargs)


def test_per_source_monte_carlo_matches_analytic():
    est = ss_rate_monte_carlo(10, 10, trials=20000, seed=1, variant="per_source")
    analytic = float(ss_source_probability_analytic(10, 10))
    assert abs(est.rate - analytic) <= max(est.ci_high - est.ci_low, 0.01)


def test_undercompleteness_raises_rate():
    rows = ss_rate_table([1, 2, 4], [10], trials=10000, seed=0)
    assert list(rows[0]) == RATE_HEADER
    rate = {r["ratio"]: r["rate"] for r in rows}
    assert rate[1.0] < 0.05
    assert rate[2.0] - rate[1.0] >= 0.3
    assert rate[4.0] >= 0.95


@pytest.mark.parametrize("n", [5, 10, 20])
def test_per_source_exceeds_all_sources_in_bijective_setting(n):
    per = ss_rate_monte_carlo(n, n, trials=4000, seed=2, variant="per_source")
    every = ss_rate_monte_carlo(n, n, trials=4000, seed=2, variant="all")
    assert per.rate > every.rate


def test_wilson_interval():
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi
    assert wilson_interval(0, 0) == (0.0, 1.0)
    lo, hi = wilson_interval(0, 100)
    assert lo < 1e-12 and 0.0 < hi < 0.05
