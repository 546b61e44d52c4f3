"""
식별 지표.

- MCC: 성분별 비선형 정렬(3차 B-spline 최소제곱, 분위수 knot) 후 |Pearson| 행렬 → Hungarian 매칭 평균
- subspace_score: 블록 단위 양방향 R² (선형 / 작은 MLP 회귀 중 큰 값, holdout 기준)
- block_assignment: 블록 간 Hungarian 매칭
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.optimize import linear_sum_assignment
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPRegressor
from sklearn.preprocessing import StandardScaler

from src.utils.errors import ValidationError
from src.utils.logger import logger

MIN_SAMPLES = 10
SUMMARY_HEADER = ["run", "seed", "model", "mcc"]
_DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class AlignResult:
    fitted: np.ndarray
    correlation: float


@dataclass(frozen=True)
class BlockScore:
    block: tuple[int, ...]
    est_indices: tuple[int, ...]
    r2_forward: float
    r2_backward: float

    def to_dict(self) -> dict:
        return {
            "block": list(self.block),
            "est_indices": list(self.est_indices),
            "r2_forward": self.r2_forward,
            "r2_backward": self.r2_backward,
        }


@dataclass
class EvalReport:
    mcc: float
    permutation: tuple[int, ...]
    per_pair: tuple[float, ...]
    correlation: np.ndarray
    subspace_scores: list[BlockScore] | None = None
    block_permutation: tuple[int, ...] | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mcc": self.mcc,
            "permutation": list(self.permutation),
            "per_pair": list(self.per_pair),
            "correlation": self.correlation.tolist(),
            "subspace_scores": None if self.subspace_scores is None else [b.to_dict() for b in self.subspace_scores],
            "block_permutation": None if self.block_permutation is None else list(self.block_permutation),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, default=str)

    def summary_row(self, run: str, seed: int, model: str) -> dict:
        return {"run": run, "seed": int(seed), "model": model, "mcc": self.mcc}


def _column(a, what: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64).reshape(-1)
    if arr.size < MIN_SAMPLES:
        raise ValidationError(f"[Eval] {what} 표본 수는 {MIN_SAMPLES} 이상이어야 합니다: {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"[Eval] {what} 에 비유한 값이 있습니다")
    return arr


def spline_basis(col: np.ndarray, knots: int = 5) -> np.ndarray:
    """분위수 내부 knot 의 3차 B-spline design matrix (N × (knots+4))"""
    lo, hi = float(col.min()), float(col.max())
    interior = np.quantile(col, np.linspace(0.0, 1.0, knots + 2)[1:-1])
    interior = np.unique(interior[(interior > lo) & (interior < hi)])
    t = np.concatenate([[lo] * 4, interior, [hi] * 4])
    return BSpline.design_matrix(col, t, 3).toarray()


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.std(), b.std()
    if sa < _DEGENERATE_STD or sb < _DEGENERATE_STD:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def _mlp_fit(est: np.ndarray, true: np.ndarray, seed: int = 0) -> np.ndarray:
    reg = MLPRegressor(hidden_layer_sizes=(16,), max_iter=500, random_state=seed)
    scaler = StandardScaler()
    X = scaler.fit_transform(est.reshape(-1, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        reg.fit(X, true)
    return reg.predict(X)


def componentwise_align(true_col, est_col, knots: int = 5, regressor: str = "spline") -> AlignResult:
    """est → true 1차원 회귀 후 fitted 와 true 의 상관"""
    t = _column(true_col, "true")
    e = _column(est_col, "est")
    if t.size != e.size:
        raise ValidationError(f"[Eval] 길이 불일치: {t.size} != {e.size}")
    if t.std() < _DEGENERATE_STD or e.std() < _DEGENERATE_STD:
        logger.warning("[Eval] 상수 열 → 상관 0 으로 처리")
        return AlignResult(fitted=np.full_like(t, t.mean()), correlation=0.0)
    if regressor == "spline":
        B = spline_basis(e, knots)
        coef, *_ = np.linalg.lstsq(B, t, rcond=None)
        fitted = B @ coef
    elif regressor == "mlp":
        fitted = _mlp_fit(e, t)
    else:
        raise ValidationError(f"[Eval] 알 수 없는 regressor: {regressor}")
    return AlignResult(fitted=fitted, correlation=_pearson(fitted, t))


def _as_matrix(a, what: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValidationError(f"[Eval] {what} 는 2차원이어야 합니다: shape={arr.shape}")
    if arr.shape[0] < MIN_SAMPLES:
        raise ValidationError(f"[Eval] {what} 표본 수는 {MIN_SAMPLES} 이상: {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"[Eval] {what} 에 비유한 값이 있습니다")
    return arr


def correlation_matrix(true, est, knots: int = 5, regressor: str = "spline") -> np.ndarray:
    """(i, j) = |align(true_i, est_j).correlation|"""
    T = _as_matrix(true, "true")
    E = _as_matrix(est, "est")
    if T.shape[0] != E.shape[0]:
        raise ValidationError(f"[Eval] 표본 수 불일치: {T.shape[0]} != {E.shape[0]}")
    n, n_hat = T.shape[1], E.shape[1]
    C = np.zeros((n, n_hat))
    for j in range(n_hat):
        e = E[:, j]
        if e.std() < _DEGENERATE_STD:
            logger.warning(f"[Eval] 추정 열 {j} 가 상수 → 상관 0")
            continue
        if regressor == "spline":
            # 같은 basis 로 모든 true 열을 한 번에 회귀
            B = spline_basis(e, knots)
            coef, *_ = np.linalg.lstsq(B, T, rcond=None)
            fitted = B @ coef
            for i in range(n):
                C[i, j] = abs(_pearson(fitted[:, i], T[:, i]))
        else:
            for i in range(n):
                C[i, j] = abs(componentwise_align(T[:, i], e, knots, regressor).correlation)
    return C


def optimal_assignment(cost) -> tuple[int, ...]:
    """true i 에 매칭된 est 인덱스 (총 상관 최대)"""
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] > C.shape[1]:
        raise ValidationError(f"[Eval] n <= n̂ 인 2차원 행렬이어야 합니다: shape={C.shape}")
    rows, cols = linear_sum_assignment(C, maximize=True)
    perm = np.empty(C.shape[0], dtype=np.int64)
    perm[rows] = cols
    return tuple(int(c) for c in perm)


def mcc(true, est, knots: int = 5, regressor: str = "spline") -> EvalReport:
    C = correlation_matrix(true, est, knots, regressor)
    perm = optimal_assignment(C)
    per_pair = tuple(float(C[i, j]) for i, j in enumerate(perm))
    value = float(np.mean(per_pair))
    return EvalReport(mcc=value, permutation=perm, per_pair=per_pair, correlation=C)


def _r2(X_tr, y_tr, X_te, y_te, hidden: int, seed: int) -> float:
    xs, ys = StandardScaler().fit(X_tr), StandardScaler().fit(y_tr)
    Xa, Xb = xs.transform(X_tr), xs.transform(X_te)
    ya, yb = ys.transform(y_tr), ys.transform(y_te)
    lin = r2_score(yb, LinearRegression().fit(Xa, ya).predict(Xb), multioutput="variance_weighted")
    mlp = MLPRegressor(hidden_layer_sizes=(hidden, hidden), max_iter=400, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        mlp.fit(Xa, ya if ya.shape[1] > 1 else ya.ravel())
    pred = mlp.predict(Xb).reshape(yb.shape)
    nonlin = r2_score(yb, pred, multioutput="variance_weighted")
    return float(max(0.0, lin, nonlin))


def subspace_score(true_block, est_block, hidden: int = 32, seed: int = 0) -> tuple[float, float]:
    """(R² est→true, R² true→est), holdout 25% 에서 평가"""
    T = _as_matrix(true_block, "true_block")
    E = _as_matrix(est_block, "est_block")
    if T.shape[0] != E.shape[0]:
        raise ValidationError(f"[Eval] 표본 수 불일치: {T.shape[0]} != {E.shape[0]}")
    d = max(T.shape[1], E.shape[1])
    if T.shape[0] < 10 * d:
        raise ValidationError(f"[Eval] subspace_score 는 N >= 10·d 필요: N={T.shape[0]}, d={d}")
    if np.any(T.std(axis=0) < _DEGENERATE_STD) or np.any(E.std(axis=0) < _DEGENERATE_STD):
        raise ValidationError("[Eval] 상수 열이 있는 블록")
    T_tr, T_te, E_tr, E_te = train_test_split(T, E, test_size=0.25, random_state=seed)
    fwd = _r2(E_tr, T_tr, E_te, T_te, hidden, seed)
    bwd = _r2(T_tr, E_tr, T_te, E_te, hidden, seed)
    return fwd, bwd


@dataclass(frozen=True)
class BlockAssignment:
    permutation: tuple[int, ...]
    scores: np.ndarray


def block_assignment(true, est, true_groups, est_groups, hidden: int = 32, seed: int = 0) -> BlockAssignment:
    """true 블록 a 에 매칭된 est 블록. 점수 = 양방향 R² 평균"""
    tg = [tuple(g) for g in true_groups]
    eg = [tuple(g) for g in est_groups]
    if sorted(len(g) for g in tg) != sorted(len(g) for g in eg):
        raise ValidationError(f"[Eval] 블록 크기 구성이 다릅니다: {[len(g) for g in tg]} vs {[len(g) for g in eg]}")
    T = _as_matrix(true, "true")
    E = _as_matrix(est, "est")
    S = np.full((len(tg), len(eg)), -1.0)
    for a, ga in enumerate(tg):
        for b, gb in enumerate(eg):
            if len(ga) != len(gb):
                continue
            fwd, bwd = subspace_score(T[:, list(ga)], E[:, list(gb)], hidden, seed)
            S[a, b] = 0.5 * (fwd + bwd)
    return BlockAssignment(permutation=optimal_assignment(S), scores=S)


def evaluate_blocks(true, est, groups, hidden: int = 32, seed: int = 0, knots: int = 5) -> EvalReport:
    """
    Grouped 데이터 평가.
    - 좌표 단위 MCC 매칭으로 est 좌표를 true 블록에 배정
    - 블록별 subspace_score, 블록 간 block_assignment
    """
    report = mcc(true, est, knots)
    T = _as_matrix(true, "true")
    E = _as_matrix(est, "est")
    groups = [tuple(int(i) for i in g) for g in groups]
    est_groups = [tuple(report.permutation[i] for i in g) for g in groups]
    scores = []
    for g, h in zip(groups, est_groups):
        fwd, bwd = subspace_score(T[:, list(g)], E[:, list(h)], hidden, seed)
        scores.append(BlockScore(block=g, est_indices=h, r2_forward=fwd, r2_backward=bwd))
    assignment = block_assignment(T, E, groups, est_groups, hidden, seed)
    report.subspace_scores = scores
    report.block_permutation = assignment.permutation
    return report
