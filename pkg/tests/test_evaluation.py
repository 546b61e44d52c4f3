import itertools
import json

import numpy as np
import pytest

from src.metrics.evaluation import (
    SUMMARY_HEADER,
    block_assignment,
    componentwise_align,
    correlation_matrix,
    evaluate_blocks,
    mcc,
    optimal_assignment,
    subspace_score,
)
from src.utils.errors import ValidationError


@pytest.fixture
def sources():
    return np.random.default_rng(0).uniform(-2.0, 2.0, size=(2000, 3))


def test_mcc_recovers_permuted_monotone_transforms(sources):
    est = np.column_stack([np.exp(sources[:, 2]), sources[:, 0] ** 3, 2.0 * sources[:, 1] - 1.0])
    report = mcc(sources, est)
    assert report.permutation == (1, 2, 0)
    assert report.mcc == pytest.approx(1.0, abs=0.02)
    assert len(report.per_pair) == 3


def test_mcc_is_low_for_unrelated_estimates(sources):
    noise = np.random.default_rng(1).standard_normal((2000, 3))
    assert mcc(sources, noise).mcc <= 0.15


def test_correlation_matrix_of_permuted_sources(sources):
    C = correlation_matrix(sources, -sources[:, [2, 0, 1]])
    on = np.zeros_like(C, dtype=bool)
    on[[0, 1, 2], [1, 2, 0]] = True
    assert np.all(C[on] >= 0.99)
    assert np.all(C[~on] <= 0.15)


def test_correlation_matrix_accepts_extra_estimate_columns(sources):
    est = np.column_stack([sources[:, 1], np.ones(2000), sources[:, 0], sources[:, 2] ** 3])
    C = correlation_matrix(sources, est)
    assert C.shape == (3, 4)
    assert np.all(C[:, 1] == 0.0)
    assert mcc(sources, est).permutation == (2, 0, 3)


def test_optimal_assignment_matches_brute_force():
    rng = np.random.default_rng(2)
    for n in range(1, 7):
        C = rng.uniform(size=(n, n))
        perm = optimal_assignment(C)
        best = max(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        assert sum(C[i, perm[i]] for i in range(n)) == pytest.approx(best)
        assert sorted(perm) == list(range(n))


def test_optimal_assignment_rectangular():
    C = np.array([[0.1, 0.9, 0.2, 0.0], [0.8, 0.85, 0.1, 0.3]])
    assert optimal_assignment(C) == (1, 0)
    with pytest.raises(ValidationError):
        optimal_assignment(C.T)


def test_componentwise_align_edge_cases():
    t = np.linspace(-1.0, 1.0, 50)
    assert componentwise_align(t, np.full(50, 3.0)).correlation == 0.0
    with pytest.raises(ValidationError):
        componentwise_align(t, t, regressor="forest")
    with pytest.raises(ValidationError):
        componentwise_align(t[:5], t[:5])
    with pytest.raises(ValidationError):
        componentwise_align(t, t[:40])
    bad = t.copy()
    bad[3] = np.inf
    with pytest.raises(ValidationError):
        componentwise_align(bad, t)


def test_mlp_alignment_handles_monotone_maps():
    s = np.random.default_rng(3).uniform(-2.0, 2.0, 500)
    assert componentwise_align(s, np.exp(s), regressor="mlp").correlation > 0.9


def test_subspace_score_under_linear_block_map():
    rng = np.random.default_rng(4)
    T = rng.standard_normal((800, 2))
    E = T @ np.array([[1.0, 0.5], [-0.3, 2.0]])
    fwd, bwd = subspace_score(T, E)
    assert fwd >= 0.95 and bwd >= 0.95
    unrelated = rng.standard_normal((800, 2))
    fwd, bwd = subspace_score(T, unrelated)
    assert fwd < 0.2 and bwd < 0.2


def test_subspace_score_validation():
    rng = np.random.default_rng(5)
    with pytest.raises(ValidationError):
        subspace_score(rng.standard_normal((15, 2)), rng.standard_normal((15, 2)))
    T = rng.standard_normal((100, 2))
    E = np.column_stack([T[:, 0], np.zeros(100)])
    with pytest.raises(ValidationError):
        subspace_score(T, E)


def test_evaluate_blocks_matches_groups():
    rng = np.random.default_rng(6)
    T = rng.standard_normal((1000, 3))
    E = np.column_stack([2.0 * T[:, 2], T[:, 0] + 0.5 * T[:, 1], T[:, 1] - 0.5 * T[:, 0]])
    report = evaluate_blocks(T, E, groups=[(0, 1), (2,)])
    assert report.permutation == (1, 2, 0)
    assert [s.est_indices for s in report.subspace_scores] == [(1, 2), (0,)]
    assert all(s.r2_forward >= 0.95 and s.r2_backward >= 0.95 for s in report.subspace_scores)
    assert report.block_permutation == (0, 1)
    doc = json.loads(report.to_json())
    assert doc["subspace_scores"][0]["block"] == [0, 1]


def test_block_assignment_rejects_size_mismatch():
    rng = np.random.default_rng(7)
    T = rng.standard_normal((100, 3))
    with pytest.raises(ValidationError):
        block_assignment(T, T, [(0, 1), (2,)], [(0,), (1,), (2,)])


def test_summary_row_matches_header(sources):
    report = mcc(sources, sources)
    row = report.summary_row("UCSS", 3, "MCP")
    assert list(row) == SUMMARY_HEADER
    assert row["mcc"] == pytest.approx(1.0)
