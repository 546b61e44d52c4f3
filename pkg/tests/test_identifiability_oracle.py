import json

import numpy as np
import pytest

from src.structure.identifiability_oracle import (
    SCAN_HEADER,
    exhaustive_lemma_scan,
    has_permutation_pattern,
    is_generalized_permutation,
    lemma_check,
    linear_recovery_demo,
    off_dp_mass,
    permutation_masks,
    propagate_support,
    random_ss_matrix,
    rotation,
)
from src.structure.support_analysis import SupportMatrix, ss_report
from src.utils.errors import ValidationError

# 세 source 모두 SS 를 만족하는 5×3 희소 혼합
SPARSE_A = np.array(
    [
        [1.5, 0.0, 0.0],
        [0.0, -2.0, 0.0],
        [0.0, 0.0, 1.2],
        [1.0, 0.8, 0.0],
        [0.0, 0.9, -1.1],
    ]
)


def test_permutation_patterns():
    masks = permutation_masks(3)
    assert masks.shape == (6, 3, 3)
    assert all(is_generalized_permutation(p) for p in masks)
    assert has_permutation_pattern(np.eye(2))
    assert has_permutation_pattern(np.ones((2, 2)))
    assert not has_permutation_pattern(np.array([[1, 1], [0, 0]]))
    assert not is_generalized_permutation(np.ones((2, 2)))
    with pytest.raises(ValidationError):
        has_permutation_pattern(np.ones((2, 3)))


def test_propagate_support():
    F = SupportMatrix(np.array([[1, 0], [1, 1], [0, 1]], dtype=bool))
    swap = np.array([[0, 1], [1, 0]], dtype=bool)
    assert propagate_support(F, swap).mask.tolist() == [[False, True], [True, True], [True, False]]
    upper = np.array([[1, 1], [0, 1]], dtype=bool)
    assert propagate_support(F, upper).mask.sum() == 5
    with pytest.raises(ValidationError):
        propagate_support(F, np.eye(3, dtype=bool))


def test_lemma_holds_under_structural_sparsity():
    F = SupportMatrix(np.array([[1, 0], [1, 1], [0, 1]], dtype=bool))
    report = lemma_check(F)
    assert report.ss_holds
    assert report.all_permutation_scalings
    assert report.counterexample is None
    assert len(report.admissible) == 2
    doc = json.loads(report.to_json())
    assert doc["admissible_count"] == 2


def test_lemma_fails_for_full_support():
    report = lemma_check(SupportMatrix.full(2, 2))
    assert not report.ss_holds
    assert not report.all_permutation_scalings
    assert not is_generalized_permutation(report.counterexample)


def test_lemma_size_limit():
    with pytest.raises(ValidationError):
        lemma_check(np.ones((7, 2), dtype=bool))
    with pytest.raises(ValidationError):
        lemma_check(np.ones((5, 5), dtype=bool))


def test_scan_small_grid_has_no_violations():
    rows = exhaustive_lemma_scan(2, [2, 3], workers=1)
    assert [r.m for r in rows] == [2, 3]
    first = rows[0]
    assert (first.total, first.rank_deficient, first.ss_hold) == (16, 9, 2)
    assert all(r.violations == [] for r in rows)
    assert list(first.to_row()) == SCAN_HEADER


def test_scan_is_worker_invariant():
    a = exhaustive_lemma_scan(2, [3], workers=1)[0]
    b = exhaustive_lemma_scan(2, [3], workers=2)[0]
    assert a.to_row() == b.to_row()


@pytest.mark.slow
def test_scan_full_grid_has_no_violations():
    for n in (1, 2, 3):
        rows = exhaustive_lemma_scan(n, range(n, 6), workers=2)
        assert all(r.violations == [] for r in rows)


def test_scan_validation():
    with pytest.raises(ValidationError):
        exhaustive_lemma_scan(4, [4])
    with pytest.raises(ValidationError):
        exhaustive_lemma_scan(2, [6])


def test_rotation_is_orthogonal():
    R = rotation([0.3, -1.2, 2.0], 3)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_off_dp_mass():
    assert off_dp_mass(np.array([[0.0, -2.0], [3.0, 0.0]])) == 0.0
    assert off_dp_mass(np.ones((2, 2))) == pytest.approx(0.5)
    assert off_dp_mass(np.zeros((2, 2))) == 0.0


def test_linear_demo_removes_rotation():
    assert ss_report(SupportMatrix(SPARSE_A != 0)).all_hold
    report = linear_recovery_demo(SPARSE_A, sample_count=None, seed=0)
    assert report.off_dp_mass < 0.05
    assert report.best_lambda in (0.1, 0.5, 1.0)
    assert len(report.per_lambda) == 3
    assert report.A_hat.shape == (5, 3)


def test_linear_demo_validation():
    with pytest.raises(ValidationError):
        linear_recovery_demo(np.ones((2, 3)))
    with pytest.raises(ValidationError):
        linear_recovery_demo(np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]))


def test_random_ss_matrix():
    A = random_ss_matrix(6, 3, seed=1)
    assert A.shape == (6, 3)
    assert np.linalg.matrix_rank(A) == 3
    assert ss_report(SupportMatrix(A != 0)).all_hold
