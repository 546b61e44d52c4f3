"""
디코더 Jacobian 희소성 penalty (L1 / SCAD / MCP).

- 스칼라/배열 모두 numpy 로 원소별 계산
- jacobian_penalty 는 원소 평균 (배치·차원 크기와 무관하게 λ 비교 가능)
- jacobian_penalty_var 는 autodiff tape 위에서 같은 값을 만들고 gradient 를 흘린다
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.model import autodiff as ad
from src.utils.errors import ValidationError

PENALTY_KINDS = ("L1", "SCAD", "MCP")
DEFAULT_GAMMA = {"MCP": 2.0, "SCAD": 3.7, "L1": 0.0}


@dataclass(frozen=True)
class PenaltyConfig:
    kind: str = "MCP"
    lam: float = 0.01
    # MCP: γ, SCAD: a, L1: 미사용
    gamma: float | None = None

    def __post_init__(self):
        kind = str(self.kind).upper()
        object.__setattr__(self, "kind", kind)
        if kind not in PENALTY_KINDS:
            raise ValidationError(f"[Penalty] 알 수 없는 penalty 종류: {self.kind}")
        if self.gamma is None:
            object.__setattr__(self, "gamma", DEFAULT_GAMMA[kind])
        lam = float(self.lam)
        gamma = float(self.gamma)
        if not np.isfinite(lam) or lam < 0:
            raise ValidationError(f"[Penalty] λ 는 0 이상이어야 합니다: {self.lam}")
        if kind == "MCP" and not gamma > 1.0:
            raise ValidationError(f"[Penalty] MCP γ 는 1 보다 커야 합니다: {gamma}")
        if kind == "SCAD" and not gamma > 2.0:
            raise ValidationError(f"[Penalty] SCAD a 는 2 보다 커야 합니다: {gamma}")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PenaltyConfig":
        d = d or {}
        return cls(
            kind=d.get("kind", "MCP"),
            lam=d.get("lambda", d.get("lam", 0.01)),
            gamma=d.get("gamma"),
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam, "gamma": self.gamma}

    def with_lambda(self, lam: float) -> "PenaltyConfig":
        return PenaltyConfig(kind=self.kind, lam=lam, gamma=self.gamma)


def penalty_value(cfg: PenaltyConfig, t):
    """원소별 penalty 값 (입력이 스칼라면 float)"""
    arr = np.asarray(t, dtype=np.float64)
    a = np.abs(arr)
    lam, g = cfg.lam, cfg.gamma
    if cfg.kind == "L1":
        out = lam * a
    elif cfg.kind == "MCP":
        out = np.where(a <= g * lam, lam * a - a * a / (2.0 * g), 0.5 * g * lam * lam)
    else:
        inner = lam * a
        mid = (2.0 * g * lam * a - a * a - lam * lam) / (2.0 * (g - 1.0))
        outer = 0.5 * lam * lam * (g + 1.0)
        out = np.where(a <= lam, inner, np.where(a <= g * lam, mid, outer))
    return float(out) if out.ndim == 0 else out


def penalty_derivative(cfg: PenaltyConfig, t):
    """penalty_value 의 도함수 (0 에서는 0)"""
    arr = np.asarray(t, dtype=np.float64)
    a = np.abs(arr)
    sgn = np.sign(arr)
    lam, g = cfg.lam, cfg.gamma
    if cfg.kind == "L1":
        out = lam * sgn
    elif cfg.kind == "MCP":
        out = np.where(a <= g * lam, sgn * (lam - a / g), 0.0)
    else:
        mid = sgn * (g * lam - a) / (g - 1.0)
        out = np.where(a <= lam, lam * sgn, np.where(a <= g * lam, mid, 0.0))
    return float(out) if out.ndim == 0 else out


def jacobian_penalty(cfg: PenaltyConfig, J) -> float:
    arr = np.asarray(J, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    if not np.all(np.isfinite(arr)):
        raise ValidationError("[Penalty] Jacobian 에 비유한 원소가 있습니다")
    return float(np.mean(penalty_value(cfg, arr)))


def penalty_var(cfg: PenaltyConfig, x: ad.Var) -> ad.Var:
    return ad.elementwise(
        x,
        lambda v: np.asarray(penalty_value(cfg, v)),
        lambda v: np.asarray(penalty_derivative(cfg, v)),
        kind=f"penalty_{cfg.kind.lower()}",
    )


def jacobian_penalty_var(cfg: PenaltyConfig, J: ad.Var) -> ad.Var:
    """tape 위 jacobian_penalty"""
    if not np.all(np.isfinite(J.value)):
        raise ValidationError("[Penalty] Jacobian 에 비유한 원소가 있습니다")
    return ad.mean(penalty_var(cfg, J))
