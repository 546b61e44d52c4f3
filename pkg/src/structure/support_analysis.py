"""
Jacobian support 행렬 조합론.

- Structural Sparsity(SS) 판정: source k 마다 "k 를 포함하는 행들의 교집합 == {k}"
- 무작위 support Monte Carlo / 전수 열거 / 해석적 확률
- 인덱스는 0-based (행 i = 관측변수, 열 j = source)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from src.engine.parallel_runner import run_tasks
from src.utils.errors import ValidationError
from src.utils.logger import logger

EXHAUSTIVE_MAX_CELLS = 20
TRIAL_BLOCK = 512
RATE_HEADER = ["m", "n", "ratio", "p", "trials", "rate", "ci_low", "ci_high"]


@dataclass(frozen=True, eq=False)
class SupportMatrix:
    """m×n boolean support. mask[i, j] 가 True 이면 (i, j) ∈ F"""

    mask: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.mask)
        if arr.ndim != 2:
            raise ValidationError(f"support mask 는 2차원이어야 합니다: ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"support 크기는 m>=1, n>=1 이어야 합니다: shape={arr.shape}")
        arr = arr.astype(bool, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "mask", arr)

    @property
    def m(self) -> int:
        return int(self.mask.shape[0])

    @property
    def n(self) -> int:
        return int(self.mask.shape[1])

    def row(self, i: int) -> frozenset[int]:
        """F_{i,:}"""
        return frozenset(int(j) for j in np.flatnonzero(self.mask[i]))

    def col(self, j: int) -> frozenset[int]:
        """F_{:,j}"""
        return frozenset(int(i) for i in np.flatnonzero(self.mask[:, j]))

    def cardinality(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, SupportMatrix):
            return NotImplemented
        return self.mask.shape == other.mask.shape and bool(np.array_equal(self.mask, other.mask))

    def __hash__(self) -> int:
        return hash((self.mask.shape, self.mask.tobytes()))

    @classmethod
    def from_row_sets(cls, rows: Sequence[Iterable[int]], n: int) -> "SupportMatrix":
        mask = np.zeros((len(rows), n), dtype=bool)
        for i, cols in enumerate(rows):
            for j in cols:
                mask[i, j] = True
        return cls(mask)

    @classmethod
    def identity(cls, n: int) -> "SupportMatrix":
        return cls(np.eye(n, dtype=bool))

    @classmethod
    def full(cls, m: int, n: int) -> "SupportMatrix":
        return cls(np.ones((m, n), dtype=bool))

    def to_dict(self) -> dict:
        return {"m": self.m, "n": self.n, "rows": self.mask.astype(int).tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "SupportMatrix":
        try:
            rows = np.asarray(data["rows"], dtype=int)
            m, n = int(data["m"]), int(data["n"])
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"support JSON 형식 오류: {e}") from e
        if rows.shape != (m, n):
            raise ValidationError(f"support JSON 크기 불일치: header=({m},{n}), rows={rows.shape}")
        if not np.isin(rows, (0, 1)).all():
            raise ValidationError("support JSON rows 는 0/1 만 허용")
        return cls(rows.astype(bool))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SupportMatrix":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError(f"support JSON 파싱 실패: {e}") from e
        if not isinstance(data, dict):
            raise ValidationError("support JSON 최상위는 객체여야 합니다")
        return cls.from_dict(data)


@dataclass(frozen=True)
class SourceCheck:
    source: int
    holds: bool
    # 최대 C_k: k 를 포함하는 모든 행 (교집합을 최소로 만드는 선택)
    witness_rows: tuple[int, ...]
    intersection: tuple[int, ...]


@dataclass(frozen=True)
class SsReport:
    per_source: tuple[SourceCheck, ...]
    all_hold: bool
    fraction: float

    def to_dict(self) -> dict:
        return {
            "all_hold": self.all_hold,
            "fraction": self.fraction,
            "per_source": [
                {
                    "source": c.source,
                    "holds": c.holds,
                    "witness_rows": list(c.witness_rows),
                    "intersection": list(c.intersection),
                }
                for c in self.per_source
            ],
        }


@dataclass(frozen=True)
class RateEstimate:
    rate: float
    trials: int
    ci_low: float
    ci_high: float
    seed: int
    variant: str = "all"

    def to_row(self, m: int, n: int, p: float) -> dict:
        return {
            "m": m,
            "n": n,
            "ratio": m / n,
            "p": p,
            "trials": self.trials,
            "rate": self.rate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def _check_source_index(S: SupportMatrix, k: int) -> None:
    if not (0 <= int(k) < S.n):
        raise ValidationError(f"source index 범위 밖: k={k}, n={S.n}")


def source_intersection(S: SupportMatrix, k: int) -> frozenset[int]:
    """
    ∩_{i : k ∈ F_{i,:}} F_{i,:}
    열 k 가 비어 있으면(정의 불가) 전체 열 집합을 돌려준다.
    """
    _check_source_index(S, k)
    rows = S.mask[S.mask[:, k]]
    if rows.shape[0] == 0:
        return frozenset(range(S.n))
    return frozenset(int(j) for j in np.flatnonzero(rows.all(axis=0)))


def satisfies_ss_source(S: SupportMatrix, k: int) -> bool:
    _check_source_index(S, k)
    if not S.mask[:, k].any():
        return False
    return source_intersection(S, k) == frozenset({int(k)})


def satisfies_ss_source_pairwise(S: SupportMatrix, k: int) -> bool:
    """열 k 가 비어있지 않고, 모든 j≠k 에 대해 mask[i,k] ∧ ¬mask[i,j] 인 행이 존재"""
    _check_source_index(S, k)
    col_k = S.mask[:, k]
    if not col_k.any():
        return False
    for j in range(S.n):
        if j == k:
            continue
        if not (col_k & ~S.mask[:, j]).any():
            return False
    return True


def ss_report(S: SupportMatrix) -> SsReport:
    checks = []
    for k in range(S.n):
        inter = source_intersection(S, k)
        holds = bool(S.mask[:, k].any()) and inter == frozenset({k})
        checks.append(
            SourceCheck(
                source=k,
                holds=holds,
                witness_rows=tuple(sorted(S.col(k))),
                intersection=tuple(sorted(inter)),
            )
        )
    n_hold = sum(1 for c in checks if c.holds)
    return SsReport(per_source=tuple(checks), all_hold=(n_hold == S.n), fraction=n_hold / S.n)


def restrict_columns(S: SupportMatrix, cols: Sequence[int]) -> SupportMatrix:
    """열 부분집합으로 제한한 support (부분 sparsity 검증용)"""
    cols = list(cols)
    if not cols:
        raise ValidationError("restrict_columns: 빈 열 집합")
    return SupportMatrix(S.mask[:, cols])


def ss_holds_batch(masks: np.ndarray) -> np.ndarray:
    """
    (T, m, n) bool → (T, n) bool. source 별 SS 판정 벡터화.
    witness[t, k, j] = Σ_i A[i,k]·(1-A[i,j]) > 0
    """
    a = masks.astype(np.float32)
    w = np.matmul(np.swapaxes(a, 1, 2), 1.0 - a) > 0.5
    n = masks.shape[2]
    idx = np.arange(n)
    w[:, idx, idx] = True
    col_nonzero = masks.any(axis=1)
    return w.all(axis=2) & col_nonzero


def random_support(m: int, n: int, p: float, seed: int) -> SupportMatrix:
    if not (0.0 <= float(p) <= 1.0):
        raise ValidationError(f"density p 는 [0,1] 이어야 합니다: p={p}")
    if m < 1 or n < 1:
        raise ValidationError(f"support 크기 오류: m={m}, n={n}")
    rng = np.random.default_rng(seed)
    return SupportMatrix(rng.random((m, n)) < p)


def wilson_interval(successes: float, total: float, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval. total 은 실수(유효 표본수)도 허용"""
    if total <= 0:
        return 0.0, 1.0
    z = float(norm.ppf(0.5 + confidence / 2.0))
    phat = successes / total
    denom = 1.0 + z * z / total
    center = (phat + z * z / (2.0 * total)) / denom
    half = z * math.sqrt(phat * (1.0 - phat) / total + z * z / (4.0 * total * total)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _mc_block(task: tuple) -> tuple[int, np.ndarray]:
    m, n, p, seed, block, size = task
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(block)]))
    masks = rng.random((size, m, n)) < p
    holds = ss_holds_batch(masks)
    return int(holds.all(axis=1).sum()), holds.mean(axis=1)


def ss_rate_monte_carlo(
    m: int,
    n: int,
    p: float = 0.5,
    trials: int = 10000,
    seed: int = 0,
    variant: str = "all",
    workers: int | None = 1,
    block_size: int = TRIAL_BLOCK,
) -> RateEstimate:
    """
    무작위 support 에서 SS 성립 비율.
    - variant="all": 모든 source 가 성립하는 행렬 비율
    - variant="per_source": 행렬별 성립 source 비율의 평균
    trial 블록 b 는 SeedSequence([seed, b]) 로 생성 → worker 수와 무관하게 동일 결과
    """
    if trials < 1:
        raise ValidationError(f"trials 는 1 이상이어야 합니다: {trials}")
    if not (0.0 <= float(p) <= 1.0):
        raise ValidationError(f"density p 는 [0,1] 이어야 합니다: p={p}")
    if variant not in ("all", "per_source"):
        raise ValidationError(f"알 수 없는 variant: {variant}")
    if seed < 0:
        raise ValidationError(f"seed 는 0 이상이어야 합니다: {seed}")

    tasks = []
    remaining, block = int(trials), 0
    while remaining > 0:
        size = min(block_size, remaining)
        tasks.append((m, n, float(p), int(seed), block, size))
        remaining -= size
        block += 1
    results = run_tasks(_mc_block, tasks, workers)

    if variant == "all":
        hits = sum(r[0] for r in results)
        rate = hits / trials
        lo, hi = wilson_interval(hits, trials)
    else:
        fractions = np.concatenate([r[1] for r in results])
        rate = float(fractions.mean())
        # 같은 행렬 안의 source 사건은 상관 → design effect 로 유효 표본수 보정
        total = trials * n
        bern_var = rate * (1.0 - rate)
        if bern_var > 0 and trials > 1:
            deff = float(fractions.var(ddof=1)) * n / bern_var
            deff = max(1.0, deff)
        else:
            deff = 1.0
        n_eff = total / deff
        lo, hi = wilson_interval(rate * n_eff, n_eff)
    lo, hi = min(lo, rate), max(hi, rate)
    return RateEstimate(rate=float(rate), trials=int(trials), ci_low=float(lo), ci_high=float(hi), seed=int(seed), variant=variant)


def _enumerate_counts(m: int, n: int, chunk: int = 1 << 15) -> tuple[int, int]:
    cells = m * n
    total = 1 << cells
    shifts = np.arange(cells, dtype=np.int64)
    all_count = 0
    source_count = 0
    for start in range(0, total, chunk):
        ints = np.arange(start, min(start + chunk, total), dtype=np.int64)
        bits = ((ints[:, None] >> shifts) & 1).astype(bool).reshape(-1, m, n)
        holds = ss_holds_batch(bits)
        all_count += int(holds.all(axis=1).sum())
        source_count += int(holds.sum())
    return all_count, source_count


def _check_exhaustive_size(m: int, n: int, max_cells: int) -> None:
    if m < 1 or n < 1:
        raise ValidationError(f"support 크기 오류: m={m}, n={n}")
    if m * n > max_cells:
        raise ValidationError(f"전수 열거 한도 초과: m·n={m * n} > {max_cells}")


def ss_all_rate_exhaustive(m: int, n: int, max_cells: int = EXHAUSTIVE_MAX_CELLS) -> Fraction:
    """p=1/2 에서 all_hold 인 mask 의 정확한 비율 (2^{mn} 전수 열거)"""
    _check_exhaustive_size(m, n, max_cells)
    all_count, _ = _enumerate_counts(m, n)
    return Fraction(all_count, 1 << (m * n))


def ss_source_fraction_exhaustive(m: int, n: int, max_cells: int = EXHAUSTIVE_MAX_CELLS) -> Fraction:
    """고정 source 하나가 SS 를 만족할 정확한 확률 (대칭이므로 전체 source 평균)"""
    _check_exhaustive_size(m, n, max_cells)
    _, source_count = _enumerate_counts(m, n)
    return Fraction(source_count, n * (1 << (m * n)))


def ss_source_probability_analytic(m: int, n: int) -> Fraction:
    """
    Σ_{s=0}^{n-1} C(n-1,s)·(−1)^s·(1/2 + 2^{−(s+1)})^m
    ("열 j 에 witness 행이 없음" 사건들의 포함-배제)
    n=1 이면 witness 조건이 없고 열이 비어있지 않아야 하므로 1 − 2^{−m}.
    """
    if m < 1 or n < 1:
        raise ValidationError(f"support 크기 오류: m={m}, n={n}")
    if n == 1:
        return 1 - Fraction(1, 2 ** m)
    total = Fraction(0)
    half = Fraction(1, 2)
    for s in range(n):
        total += math.comb(n - 1, s) * (-1) ** s * (half + Fraction(1, 2 ** (s + 1))) ** m
    return total


def generic_rank(S: SupportMatrix, seed: int = 0) -> int:
    """support 위에 표준정규 값을 놓은 실수 행렬의 rank (w.h.p. generic rank)"""
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(S.mask.shape) * S.mask
    if not S.mask.any():
        return 0
    return int(np.linalg.matrix_rank(values))


def ss_rate_table(
    ratios: Sequence[int],
    n_values: Sequence[int],
    p: float = 0.5,
    trials: int = 10000,
    seed: int = 0,
    variant: str = "all",
    workers: int | None = 1,
) -> list[dict]:
    """(m/n, n) 격자별 RateEstimate 를 CSV 행으로"""
    rows = []
    for n in n_values:
        for ratio in ratios:
            m = int(round(ratio * n))
            est = ss_rate_monte_carlo(m, n, p, trials, seed, variant=variant, workers=workers)
            logger.info(
                f"[Support] m={m}, n={n}, variant={variant}: rate={est.rate:.4f} "
                f"[{est.ci_low:.4f}, {est.ci_high:.4f}]"
            )
            rows.append(est.to_row(m, n, p))
    return rows
