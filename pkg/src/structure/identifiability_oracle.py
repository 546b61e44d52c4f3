"""
작은 인스턴스에서 support 수준 식별성 논증을 전수 검사한다.

- propagate_support: F̂ = ∪_{(i,j)∈F} {i} × T_{j,:}  (bool 행렬곱)
- admissible T: 순열 패턴(행렬식 비영 증거)을 포함하고 |F̂| <= |F|
- lemma: SS 가 성립하면 admissible T 는 전부 generalized permutation 이어야 한다
- linear_recovery_demo: 선형 혼합에서 희소성 penalty 최소화로 회전 불확정성 제거
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize

from src.engine.parallel_runner import run_tasks
from src.model.sparsity_penalty import PenaltyConfig, jacobian_penalty
from src.structure.support_analysis import SupportMatrix, ss_holds_batch, ss_report
from src.utils.errors import ValidationError
from src.utils.logger import logger

LEMMA_MAX_N = 4
LEMMA_MAX_M = 6
SCAN_MAX_N = 3
SCAN_MAX_M = 5
SCAN_HEADER = ["n", "m", "total", "rank_deficient", "ss_hold", "violations"]
SCAN_CHUNK = 1024
_COND_LIMIT = 1e8


def _mask(x) -> np.ndarray:
    return x.mask if isinstance(x, SupportMatrix) else np.asarray(x, dtype=bool)


def permutation_masks(n: int) -> np.ndarray:
    """(n!, n, n) 순열 행렬 패턴"""
    perms = list(itertools.permutations(range(n)))
    out = np.zeros((len(perms), n, n), dtype=bool)
    for k, p in enumerate(perms):
        out[k, np.arange(n), p] = True
    return out


def _has_permutation_batch(T: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """T: (B, n, n) → (B,) 어떤 순열 패턴 P 에 대해 P ⊆ T"""
    covered = (T[:, None, :, :] | ~perms[None]).all(axis=(2, 3))
    return covered.any(axis=1)


def _is_generalized_permutation_batch(T: np.ndarray) -> np.ndarray:
    return (T.sum(axis=2) == 1).all(axis=1) & (T.sum(axis=1) == 1).all(axis=1)


def has_permutation_pattern(T) -> bool:
    t = _mask(T)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValidationError(f"[Oracle] T 는 n×n 이어야 합니다: shape={t.shape}")
    return bool(_has_permutation_batch(t[None], permutation_masks(t.shape[0]))[0])


def is_generalized_permutation(T) -> bool:
    """행/열마다 정확히 하나의 True"""
    t = _mask(T)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValidationError(f"[Oracle] T 는 n×n 이어야 합니다: shape={t.shape}")
    return bool(_is_generalized_permutation_batch(t[None])[0])


def propagate_support(F, T) -> SupportMatrix:
    f, t = _mask(F), _mask(T)
    if t.ndim != 2 or t.shape[0] != t.shape[1] or f.ndim != 2 or f.shape[1] != t.shape[0]:
        raise ValidationError(f"[Oracle] 차원 불일치: F={f.shape}, T={t.shape}")
    return SupportMatrix((f.astype(np.int64) @ t.astype(np.int64)) > 0)


def all_t_masks(n: int) -> np.ndarray:
    cells = n * n
    ints = np.arange(1 << cells, dtype=np.int64)
    return ((ints[:, None] >> np.arange(cells)) & 1).astype(bool).reshape(-1, n, n)


def _check_lemma_size(m: int, n: int) -> None:
    if n > LEMMA_MAX_N or m > LEMMA_MAX_M:
        raise ValidationError(f"[Oracle] 열거 한도 초과: n={n} (<= {LEMMA_MAX_N}), m={m} (<= {LEMMA_MAX_M})")


def admissible_T_supports(F) -> list[SupportMatrix]:
    f = _mask(F)
    m, n = f.shape
    _check_lemma_size(m, n)
    Ts = all_t_masks(n)
    fhat = np.einsum("ij,tjk->tik", f.astype(np.int32), Ts.astype(np.int32)) > 0
    small = fhat.sum(axis=(1, 2)) <= int(f.sum())
    ok = small & _has_permutation_batch(Ts, permutation_masks(n))
    return [SupportMatrix(T) for T in Ts[ok]]


@dataclass
class LemmaReport:
    F: SupportMatrix
    admissible: list[SupportMatrix]
    all_permutation_scalings: bool
    counterexample: SupportMatrix | None
    ss_holds: bool

    def to_dict(self) -> dict:
        return {
            "F": self.F.to_dict(),
            "ss_holds": self.ss_holds,
            "all_permutation_scalings": self.all_permutation_scalings,
            "admissible_count": len(self.admissible),
            "admissible": [T.mask.astype(int).tolist() for T in self.admissible],
            "counterexample": None if self.counterexample is None else self.counterexample.mask.astype(int).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)


def lemma_check(F) -> LemmaReport:
    S = F if isinstance(F, SupportMatrix) else SupportMatrix(F)
    admissible = admissible_T_supports(S)
    counter = next((T for T in admissible if not is_generalized_permutation(T)), None)
    return LemmaReport(
        F=S,
        admissible=admissible,
        all_permutation_scalings=counter is None,
        counterexample=counter,
        ss_holds=ss_report(S).all_hold,
    )


@dataclass
class ScanRow:
    n: int
    m: int
    total: int
    rank_deficient: int
    ss_hold: int
    violations: list[list[list[int]]]
    lemma_without_ss: int = 0

    def to_row(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "total": self.total,
            "rank_deficient": self.rank_deficient,
            "ss_hold": self.ss_hold,
            "violations": len(self.violations),
        }


def _scan_chunk(task: tuple) -> tuple[int, int, int, int, list]:
    """F mask 정수 구간 [start, stop) 검사"""
    m, n, start, stop, seed = task
    cells = m * n
    ints = np.arange(start, stop, dtype=np.int64)
    F = ((ints[:, None] >> np.arange(cells)) & 1).astype(bool).reshape(-1, m, n)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(start)]))
    values = rng.standard_normal(F.shape) * F
    full_rank = np.linalg.matrix_rank(values) == n
    F = F[full_rank]
    rank_deficient = int((~full_rank).sum())
    if F.shape[0] == 0:
        return int(ints.size), rank_deficient, 0, 0, []

    ss = ss_holds_batch(F).all(axis=1)
    Ts = all_t_masks(n)
    perms = permutation_masks(n)
    candidate = _has_permutation_batch(Ts, perms)
    Ts = Ts[candidate]
    gp = _is_generalized_permutation_batch(Ts)
    fhat = np.einsum("bij,tjk->btik", F.astype(np.int32), Ts.astype(np.int32)) > 0
    admissible = fhat.sum(axis=(2, 3)) <= F.sum(axis=(1, 2))[:, None]
    lemma_ok = ~(admissible & ~gp[None]).any(axis=1)
    violating = F[ss & ~lemma_ok]
    return (
        int(ints.size),
        rank_deficient,
        int(ss.sum()),
        int((lemma_ok & ~ss).sum()),
        [v.astype(int).tolist() for v in violating],
    )


def exhaustive_lemma_scan(n: int, m_values, workers: int | None = 1, seed: int = 0) -> list[ScanRow]:
    """
    generic rank n 인 모든 m×n F 에 대해 SS ⇒ lemma 성립 여부.
    violation 은 F mask 그대로 보고한다
    """
    m_values = sorted({int(m) for m in m_values})
    if n < 1 or n > SCAN_MAX_N:
        raise ValidationError(f"[Oracle] scan n 은 1..{SCAN_MAX_N}: {n}")
    rows = []
    for m in m_values:
        if m < 1 or m > SCAN_MAX_M:
            raise ValidationError(f"[Oracle] scan m 은 1..{SCAN_MAX_M}: {m}")
        total = 1 << (m * n)
        tasks = [(m, n, s, min(s + SCAN_CHUNK, total), seed) for s in range(0, total, SCAN_CHUNK)]
        parts = run_tasks(_scan_chunk, tasks, workers)
        row = ScanRow(
            n=n,
            m=m,
            total=sum(p[0] for p in parts),
            rank_deficient=sum(p[1] for p in parts),
            ss_hold=sum(p[2] for p in parts),
            lemma_without_ss=sum(p[3] for p in parts),
            violations=[v for p in parts for v in p[4]],
        )
        log = logger.warning if row.violations else logger.info
        log(
            f"[Oracle] scan n={n}, m={m}: total={row.total}, rank_deficient={row.rank_deficient}, "
            f"ss_hold={row.ss_hold}, violations={len(row.violations)}"
        )
        rows.append(row)
    return rows


# ----------------------------------------------------------------------
# 선형 복원 데모
# ----------------------------------------------------------------------

def _givens_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def rotation(angles, n: int) -> np.ndarray:
    R = np.eye(n)
    for theta, (i, j) in zip(np.atleast_1d(angles), _givens_pairs(n)):
        G = np.eye(n)
        c, s = np.cos(theta), np.sin(theta)
        G[i, i] = G[j, j] = c
        G[i, j], G[j, i] = -s, s
        R = R @ G
    return R


def off_dp_mass(M: np.ndarray) -> float:
    """최적 순열 밖 |M| 질량 비율"""
    absM = np.abs(M)
    total = absM.sum()
    if total == 0:
        return 0.0
    rows, cols = linear_sum_assignment(absM, maximize=True)
    return float((total - absM[rows, cols].sum()) / total)


@dataclass(frozen=True)
class LinearRecoveryReport:
    off_dp_mass: float
    best_lambda: float
    per_lambda: tuple[tuple[float, float], ...]
    A_hat: np.ndarray

    def to_dict(self) -> dict:
        return {
            "off_dp_mass": self.off_dp_mass,
            "best_lambda": self.best_lambda,
            "per_lambda": [{"lambda": l, "off_dp_mass": v} for l, v in self.per_lambda],
            "A_hat": self.A_hat.tolist(),
        }


def _whitening_basis(A: np.ndarray, sample_count: int | None, rng: np.random.Generator) -> np.ndarray:
    """x = A s 의 공분산 상위 n 고유쌍으로 W (m×n), W Wᵀ ≈ Cov(x)"""
    n = A.shape[1]
    if sample_count is None:
        cov = A @ A.T
    else:
        s = rng.standard_normal((sample_count, n))
        cov = np.cov(s @ A.T, rowvar=False).reshape(A.shape[0], A.shape[0])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n]
    vals = np.clip(vals[order], 0.0, None)
    return vecs[:, order] * np.sqrt(vals)


def _best_rotation(W: np.ndarray, cfg: PenaltyConfig, rng: np.random.Generator, restarts: int) -> np.ndarray:
    n = W.shape[1]
    k = len(_givens_pairs(n))
    if k == 0:
        return W.copy()

    def objective(angles):
        return jacobian_penalty(cfg, W @ rotation(angles, n))

    starts = [np.zeros(k)]
    if k <= 3:
        # 작은 n: 각도 격자에서 좋은 시작점 선택
        grid = np.linspace(-np.pi, np.pi, 24, endpoint=False)
        points = np.array(list(itertools.product(grid, repeat=k)))
        values = np.array([objective(p) for p in points])
        starts += [points[i] for i in np.argsort(values, kind="stable")[:restarts]]
    else:
        starts += [rng.uniform(-np.pi, np.pi, size=k) for _ in range(restarts)]
    best, best_val = starts[0], objective(starts[0])
    for x0 in starts:
        res = minimize(objective, x0, method="Powell", options={"xtol": 1e-10, "ftol": 1e-12, "maxiter": 4000})
        if res.fun < best_val:
            best, best_val = res.x, float(res.fun)
    return W @ rotation(best, n)


def linear_recovery_demo(
    A,
    penalty: PenaltyConfig | None = None,
    seed: int = 0,
    lambdas=(0.1, 0.5, 1.0),
    sample_count: int | None = 5000,
    restarts: int = 5,
) -> LinearRecoveryReport:
    """
    x = A s (s ~ N(0, I)) 에서 백색화 후 회전만 남은 불확정성을 penalty 최소화로 제거.
    λ 마다 Â 를 구하고 Â⁺A 의 off-DP 질량이 가장 작은 λ 를 보고한다.
    sample_count=None 이면 모집단 공분산 A Aᵀ 사용
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < A.shape[1]:
        raise ValidationError(f"[Oracle] A 는 m×n (m >= n) 이어야 합니다: shape={A.shape}")
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > _COND_LIMIT:
        raise ValidationError(f"[Oracle] A 가 ill-conditioned 입니다 (cond={sv[0] / max(sv[-1], 1e-300):.3g})")
    base = penalty or PenaltyConfig("MCP", 0.1)
    rng = np.random.default_rng(seed)
    W = _whitening_basis(A, sample_count, rng)

    per_lambda = []
    best = (np.inf, None, None)
    for lam in lambdas:
        cfg = base.with_lambda(lam)
        A_hat = _best_rotation(W, cfg, np.random.default_rng(np.random.SeedSequence([seed, len(per_lambda)])), restarts)
        mass = off_dp_mass(np.linalg.pinv(A_hat) @ A)
        per_lambda.append((float(lam), mass))
        logger.info(f"[Oracle] linear recovery {cfg.kind} λ={lam}: off-DP={mass:.4f}")
        if mass < best[0]:
            best = (mass, float(lam), A_hat)
    return LinearRecoveryReport(off_dp_mass=float(best[0]), best_lambda=best[1], per_lambda=tuple(per_lambda), A_hat=best[2])


def random_ss_matrix(m: int, n: int, seed: int = 0, density: float = 0.5, max_draws: int = 10000) -> np.ndarray:
    """SS 를 만족하고 full column rank 인 희소 Gaussian 행렬"""
    rng = np.random.default_rng(seed)
    for _ in range(max_draws):
        mask = rng.random((m, n)) < density
        if not ss_report(SupportMatrix(mask)).all_hold:
            continue
        A = rng.standard_normal((m, n)) * mask
        if np.linalg.matrix_rank(A) == n:
            return A
    raise ValidationError(f"[Oracle] SS 를 만족하는 행렬을 찾지 못했습니다: m={m}, n={n}")
