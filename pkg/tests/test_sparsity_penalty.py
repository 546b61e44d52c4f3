import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.model import autodiff as ad
from src.model.sparsity_penalty import (
    PenaltyConfig,
    jacobian_penalty,
    jacobian_penalty_var,
    penalty_derivative,
    penalty_value,
)
from src.utils.errors import ValidationError


def test_mcp_values_and_plateau():
    cfg = PenaltyConfig("MCP", lam=1.0, gamma=2.0)
    assert penalty_value(cfg, 0.0) == 0.0
    assert penalty_value(cfg, 1.0) == pytest.approx(0.75)
    assert penalty_value(cfg, -1.0) == pytest.approx(0.75)
    assert penalty_value(cfg, 2.0) == pytest.approx(1.0)
    assert penalty_value(cfg, 10.0) == pytest.approx(1.0)
    assert penalty_derivative(cfg, 3.0) == 0.0


def test_scad_values_and_continuity():
    cfg = PenaltyConfig("SCAD", lam=1.0, gamma=3.7)
    assert penalty_value(cfg, 0.5) == pytest.approx(0.5)
    assert penalty_value(cfg, 2.0) == pytest.approx(9.8 / 5.4)
    assert penalty_value(cfg, 5.0) == pytest.approx(2.35)
    assert penalty_value(cfg, 3.7) == pytest.approx(2.35)
    assert penalty_value(cfg, 1.0) == pytest.approx(1.0)


def test_l1_is_scaled_absolute_value():
    cfg = PenaltyConfig("L1", lam=0.3)
    t = np.array([-2.0, 0.0, 0.5])
    assert_allclose(penalty_value(cfg, t), [0.6, 0.0, 0.15])
    assert_allclose(penalty_derivative(cfg, t), [-0.3, 0.0, 0.3])


@pytest.mark.parametrize("kind", ["L1", "SCAD", "MCP"])
def test_derivative_matches_finite_difference(kind):
    cfg = PenaltyConfig(kind, lam=0.5)
    # 구간 경계(λ, γλ)를 피한 점들
    t = np.array([-3.1, -0.77, -0.2, 0.13, 0.61, 0.9, 1.4, 4.2])
    h = 1e-6
    fd = (penalty_value(cfg, t + h) - penalty_value(cfg, t - h)) / (2 * h)
    assert_allclose(penalty_derivative(cfg, t), fd, atol=1e-6)


@pytest.mark.parametrize("kind", ["SCAD", "MCP"])
def test_nonconvex_penalties_never_exceed_l1(kind):
    t = np.linspace(-5, 5, 201)
    cfg = PenaltyConfig(kind, lam=0.7)
    l1 = PenaltyConfig("L1", lam=0.7)
    assert np.all(penalty_value(cfg, t) <= penalty_value(l1, t) + 1e-12)


def test_jacobian_penalty_is_mean_over_entries():
    cfg = PenaltyConfig("L1", lam=1.0)
    J = np.array([[1.0, -1.0], [0.0, 2.0]])
    assert jacobian_penalty(cfg, J) == pytest.approx(1.0)
    assert jacobian_penalty(cfg, np.zeros((0, 3))) == 0.0
    with pytest.raises(ValidationError):
        jacobian_penalty(cfg, [[np.nan]])


def test_zero_lambda_gives_zero_penalty():
    for kind in ("L1", "SCAD", "MCP"):
        assert jacobian_penalty(PenaltyConfig(kind, lam=0.0), np.ones((3, 3))) == 0.0


@pytest.mark.parametrize("kind", ["L1", "SCAD", "MCP"])
def test_tape_penalty_matches_numpy_and_gradient(kind):
    cfg = PenaltyConfig(kind, lam=0.5)
    J0 = np.array([[0.3, -0.8], [1.7, 0.05]])
    tape = ad.Tape()
    J = tape.variable(J0)
    out = jacobian_penalty_var(cfg, J)
    assert float(out.value) == pytest.approx(jacobian_penalty(cfg, J0))
    result = ad.gradient_check(lambda x: jacobian_penalty_var(cfg, x), J0)
    assert result.max_rel_error <= 1e-4


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "ridge"},
        {"kind": "MCP", "lam": -0.1},
        {"kind": "MCP", "gamma": 1.0},
        {"kind": "SCAD", "gamma": 2.0},
        {"kind": "L1", "lam": float("nan")},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        PenaltyConfig(**kwargs)


def test_config_dict_forms():
    cfg = PenaltyConfig.from_dict({"kind": "mcp", "lambda": 0.1})
    assert cfg.kind == "MCP"
    assert cfg.lam == 0.1 and cfg.gamma == 2.0
    assert PenaltyConfig.from_dict({"kind": "SCAD", "lam": 0.2}).gamma == 3.7
    assert PenaltyConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.with_lambda(0.5).lam == 0.5
