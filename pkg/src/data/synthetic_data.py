"""
정답(ground-truth) 데이터 생성.

- source: 독립 Gaussian s_I + 보조변수 u 에 의존하는 s_D (도메인별 Gaussian, Grouped 는 블록 상관)
- mixing: 관측변수 i 마다 F_{i,:} 좌표만 읽는 masked feed-forward 맵 → Jacobian support 가 구성상 보장
- audit: support/rank/variability 가정 검사
- CSV(+ meta.json) 입출력
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from src.engine.json_file import write_json_atomic
from src.structure.support_analysis import (
    SupportMatrix,
    generic_rank,
    restrict_columns,
    ss_report,
)
from src.utils.errors import AuditError, DatasetFormatError, ValidationError
from src.utils.logger import logger

MODES = ("UCSS", "Mixed", "Grouped", "Base")
GENERATOR_NAME = "ica-lab/masked-mlp"
# SeedSequence([seed, stream]) 의 stream 번호 (0 은 make_gen_spec)
SEED_STREAM_MIXING = 1
SEED_STREAM_DOMAINS = 2
SEED_STREAM_INDEPENDENT = 3
VARIANCE_RANGE = (0.5, 3.0)
RANK_TOL = 1e-8
_MAX_SUPPORT_DRAWS = 10000


@dataclass
class DomainParams:
    """도메인 u 의 s_D 분포 N(mean, cov)"""

    label: int
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        k = self.mean.size
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(k, k)

    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.cov) if self.mean.size else np.zeros((0, 0))

    def to_dict(self) -> dict:
        return {"label": int(self.label), "mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainParams":
        return cls(label=int(d["label"]), mean=d["mean"], cov=d["cov"])


@dataclass
class MixingConfig:
    width: int = 16
    depth: int = 2
    activation: str = "tanh"
    tau: float = 1e-4
    retries: int = 20
    probe_count: int = 10
    fd_step: float = 1e-4

    @classmethod
    def from_dict(cls, d: dict | None) -> "MixingConfig":
        d = d or {}
        base = cls()
        return cls(
            width=int(d.get("width", base.width)),
            depth=int(d.get("depth", base.depth)),
            activation=str(d.get("activation", base.activation)),
            tau=float(d.get("tau", base.tau)),
            retries=int(d.get("retries", base.retries)),
            probe_count=int(d.get("probe_count", base.probe_count)),
            fd_step=float(d.get("fd_step", base.fd_step)),
        )

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "depth": self.depth,
            "activation": self.activation,
            "tau": self.tau,
            "retries": self.retries,
            "probe_count": self.probe_count,
            "fd_step": self.fd_step,
        }


def required_domains(mode: str, n_D: int) -> int:
    if mode == "Grouped":
        return 2 * n_D + 1
    if mode == "Mixed":
        return n_D + 1
    return 1


@dataclass
class GenSpec:
    n_I: int
    n_D: int
    support: SupportMatrix
    domains: list[DomainParams]
    sample_count: int
    seed: int
    mode: str = "UCSS"
    independent_variances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # s_D 인덱스(전체 source 기준, 0-based)의 연속 블록 분할
    groups: list[tuple[int, ...]] | None = None
    mixing: MixingConfig = field(default_factory=MixingConfig)
    noise_std: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"[Gen] 알 수 없는 mode: {self.mode}")
        if self.n_I < 0 or self.n_D < 0 or self.n < 1:
            raise ValidationError(f"[Gen] source 수 오류: n_I={self.n_I}, n_D={self.n_D}")
        if self.support.n != self.n:
            raise ValidationError(f"[Gen] support 열 수({self.support.n}) != n({self.n})")
        if self.support.m < self.n:
            raise ValidationError(f"[Gen] m >= n 이어야 합니다: m={self.support.m}, n={self.n}")
        if self.sample_count < 1:
            raise ValidationError(f"[Gen] sample_count 는 1 이상: {self.sample_count}")
        if self.noise_std < 0:
            raise ValidationError(f"[Gen] noise_std 는 0 이상: {self.noise_std}")
        self.independent_variances = np.asarray(self.independent_variances, dtype=np.float64).reshape(-1)
        if self.independent_variances.size != self.n_I:
            raise ValidationError(
                f"[Gen] independent_variances 길이({self.independent_variances.size}) != n_I({self.n_I})"
            )
        if np.any(self.independent_variances <= 0):
            raise ValidationError("[Gen] independent_variances 는 양수여야 합니다")
        if not self.domains:
            raise ValidationError("[Gen] 도메인이 최소 1개 필요합니다")
        need = required_domains(self.mode, self.n_D)
        if len(self.domains) < need:
            raise ValidationError(f"[Gen] {self.mode} mode 는 도메인 {need}개 이상 필요: {len(self.domains)}")
        for idx, d in enumerate(self.domains):
            if d.label != idx:
                raise ValidationError(f"[Gen] 도메인 label 은 0..K-1 순서여야 합니다: {d.label}")
            if d.mean.size != self.n_D:
                raise ValidationError(f"[Gen] 도메인 {idx} mean 차원 != n_D")
        if self.groups is not None:
            self.groups = [tuple(int(i) for i in g) for g in self.groups]
            flat = [i for g in self.groups for i in g]
            if flat != list(range(self.n_I, self.n)):
                raise ValidationError(f"[Gen] groups 는 s_D 인덱스의 연속 분할이어야 합니다: {self.groups}")
            if any(len(g) == 0 for g in self.groups):
                raise ValidationError("[Gen] 빈 group")

    @property
    def n(self) -> int:
        return self.n_I + self.n_D

    @property
    def m(self) -> int:
        return self.support.m

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_I": self.n_I,
            "n_D": self.n_D,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "support": self.support.to_dict(),
            "domains": [d.to_dict() for d in self.domains],
            "independent_variances": self.independent_variances.tolist(),
            "groups": [list(g) for g in self.groups] if self.groups is not None else None,
            "mixing": self.mixing.to_dict(),
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        try:
            return cls(
                n_I=int(d["n_I"]),
                n_D=int(d["n_D"]),
                support=SupportMatrix.from_dict(d["support"]),
                domains=[DomainParams.from_dict(x) for x in d["domains"]],
                sample_count=int(d["sample_count"]),
                seed=int(d["seed"]),
                mode=str(d.get("mode", "UCSS")),
                independent_variances=d.get("independent_variances", []),
                groups=d.get("groups"),
                mixing=MixingConfig.from_dict(d.get("mixing")),
                noise_std=float(d.get("noise_std", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"[Gen] GenSpec 형식 오류: {e}") from e


@dataclass
class Dataset:
    sources: np.ndarray
    u: np.ndarray
    x: np.ndarray
    spec: GenSpec

    def __post_init__(self):
        count = self.sources.shape[0]
        if self.sources.shape != (count, self.spec.n) or self.x.shape != (count, self.spec.m) or self.u.shape != (count,):
            raise ValidationError(
                f"[Gen] Dataset shape 불일치: s={self.sources.shape}, u={self.u.shape}, x={self.x.shape}"
            )
        if count and (self.u.min() < 0 or self.u.max() >= len(self.spec.domains)):
            raise ValidationError("[Gen] u label 이 도메인 범위를 벗어났습니다")

    @property
    def sample_count(self) -> int:
        return int(self.sources.shape[0])

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.sources, other.sources)
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.x, other.x)
            and self.spec.to_dict() == other.spec.to_dict()
        )


# ------------------------------------------------------------------
# sources
# ------------------------------------------------------------------

def draw_variances(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(VARIANCE_RANGE[0], VARIANCE_RANGE[1], size=n)


def stream_seed(seed: int, stream: int) -> int:
    """spec seed 에서 용도별(mixing, s_I, ...) 독립 seed 파생"""
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1)[0])


def sample_independent_sources(n: int, count: int, seed: int, variances: np.ndarray | None = None) -> np.ndarray:
    """좌표별 N(0, σ²), σ² ~ U[0.5, 3] (variances 가 주어지면 그 값 사용). n=0 이면 (count, 0)"""
    if n < 0 or count < 1:
        raise ValidationError(f"[Gen] n >= 0, count >= 1 이어야 합니다: n={n}, count={count}")
    rng = np.random.default_rng(seed)
    var = draw_variances(n, rng) if variances is None else np.asarray(variances, dtype=np.float64)
    if var.shape != (n,):
        raise ValidationError(f"[Gen] variances 길이 != n: {var.shape}")
    return rng.standard_normal((count, n)) * np.sqrt(var)


def _random_block_correlation(size: int, rng: np.random.Generator) -> np.ndarray:
    if size == 1:
        return np.ones((1, 1))
    w = rng.standard_normal((size, size))
    s = w @ w.T + size * np.eye(size)
    d = np.sqrt(np.diag(s))
    return s / np.outer(d, d)


def make_domains(
    n_D: int,
    count: int,
    rng: np.random.Generator,
    mean_scale: float = 1.0,
    local_groups: list[tuple[int, ...]] | None = None,
) -> list[DomainParams]:
    """
    도메인 u_0..u_{K-1} 의 s_D 분포.
    - u_0 평균 0, 나머지는 U[−mean_scale, mean_scale]
    - 분산 U[0.5, 3]; local_groups 가 있으면 블록 내부 상관 (블록 간 독립)
    """
    domains = []
    for label in range(count):
        var = draw_variances(n_D, rng)
        if local_groups:
            corr = np.zeros((n_D, n_D))
            for g in local_groups:
                idx = np.asarray(g)
                corr[np.ix_(idx, idx)] = _random_block_correlation(len(g), rng)
        else:
            corr = np.eye(n_D)
        sd = np.sqrt(var)
        cov = corr * np.outer(sd, sd)
        if label == 0 or mean_scale == 0:
            mean = np.zeros(n_D)
        else:
            mean = rng.uniform(-mean_scale, mean_scale, size=n_D)
        domains.append(DomainParams(label=label, mean=mean, cov=cov))
    return domains


def sample_dependent_sources(spec: GenSpec, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(s_D 블록, u label). label 은 도메인 위 균등"""
    if count < 1:
        raise ValidationError(f"[Gen] count 는 1 이상: {count}")
    need = required_domains(spec.mode, spec.n_D)
    if len(spec.domains) < need:
        raise ValidationError(f"[Gen] {spec.mode} mode 는 도메인 {need}개 이상 필요")
    rng = np.random.default_rng(seed)
    u = rng.integers(0, len(spec.domains), size=count)
    s_D = np.zeros((count, spec.n_D))
    if spec.n_D == 0:
        return s_D, u
    z = rng.standard_normal((count, spec.n_D))
    for d in spec.domains:
        sel = u == d.label
        if not sel.any():
            continue
        chol = np.linalg.cholesky(d.cov)
        s_D[sel] = d.mean + z[sel] @ chol.T
    return s_D, u


# ------------------------------------------------------------------
# mixing
# ------------------------------------------------------------------

@dataclass
class MixingNetwork:
    """
    x_i = A_i·s + v_i·h_i(s)
    h_i: 입력 가중치가 F_{i,:} 로 mask 된 tanh MLP (관측변수별 독립 파라미터)
    """

    support: SupportMatrix
    A: np.ndarray
    W_in: np.ndarray | None
    b_in: np.ndarray | None
    W_hidden: list[np.ndarray] = field(default_factory=list)
    b_hidden: list[np.ndarray] = field(default_factory=list)
    v: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.support.m

    @property
    def n(self) -> int:
        return self.support.n

    @property
    def depth(self) -> int:
        return 0 if self.W_in is None else 1 + len(self.W_hidden)

    @classmethod
    def random(cls, support: SupportMatrix, width: int, depth: int, rng: np.random.Generator) -> "MixingNetwork":
        """support 로 mask 된 무작위 가중치 (검증 없음)"""
        if width < 1 or depth < 0:
            raise ValidationError(f"[Gen] width>=1, depth>=0 이어야 합니다: width={width}, depth={depth}")
        mask = support.mask.astype(np.float64)
        m, n = mask.shape
        A = rng.standard_normal((m, n)) * mask
        if depth == 0:
            return cls(support=support, A=A, W_in=None, b_in=None, v=None)
        W_in = rng.standard_normal((m, n, width)) * mask[:, :, None]
        b_in = rng.uniform(-0.5, 0.5, size=(m, width))
        W_hidden, b_hidden = [], []
        for _ in range(depth - 1):
            W_hidden.append(rng.standard_normal((m, width, width)) / np.sqrt(width))
            b_hidden.append(rng.uniform(-0.5, 0.5, size=(m, width)))
        v = rng.standard_normal((m, width)) / np.sqrt(width)
        return cls(support=support, A=A, W_in=W_in, b_in=b_in, W_hidden=W_hidden, b_hidden=b_hidden, v=v)

    def _hidden(self, s: np.ndarray) -> list[np.ndarray]:
        hs = [np.tanh(np.einsum("bn,mnw->bmw", s, self.W_in) + self.b_in)]
        for W, b in zip(self.W_hidden, self.b_hidden):
            hs.append(np.tanh(np.einsum("bmw,mwv->bmv", hs[-1], W) + b))
        return hs

    def forward(self, s: np.ndarray) -> np.ndarray:
        x = s @ self.A.T
        if self.W_in is not None:
            h = self._hidden(s)[-1]
            x = x + np.einsum("bmw,mw->bm", h, self.v)
        return x

    def jacobian(self, s: np.ndarray) -> np.ndarray:
        """해석적 J_f: (B, n) → (B, m, n)"""
        s = np.atleast_2d(s)
        J = np.broadcast_to(self.A, (s.shape[0],) + self.A.shape).copy()
        if self.W_in is None:
            return J
        hs = self._hidden(s)
        # dh: (B, m, width, n)
        dh = (1.0 - hs[0] ** 2)[..., None] * np.transpose(self.W_in, (0, 2, 1))[None]
        for W, h in zip(self.W_hidden, hs[1:]):
            dh = (1.0 - h ** 2)[..., None] * np.einsum("mwv,bmwn->bmvn", W, dh)
        return J + np.einsum("mw,bmwn->bmn", self.v, dh)

    def to_dict(self) -> dict:
        return {
            "support": self.support.to_dict(),
            "A": self.A.tolist(),
            "W_in": None if self.W_in is None else self.W_in.tolist(),
            "b_in": None if self.b_in is None else self.b_in.tolist(),
            "W_hidden": [w.tolist() for w in self.W_hidden],
            "b_hidden": [b.tolist() for b in self.b_hidden],
            "v": None if self.v is None else self.v.tolist(),
        }


def _probe_points(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((max(1, count), n)) * np.sqrt(VARIANCE_RANGE[1])


def mix(net: MixingNetwork, sources: np.ndarray) -> np.ndarray:
    s = np.asarray(sources, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != net.n:
        raise ValidationError(f"[Gen] source 차원 불일치: shape={s.shape}, n={net.n}")
    return net.forward(s)


def verify_support(net: MixingNetwork, probe_points: np.ndarray, tau: float = 1e-4, fd_step: float = 1e-4) -> SupportMatrix:
    """중앙차분 |∂x_i/∂s_j| 의 probe 최대값 > τ 인 위치"""
    P = np.atleast_2d(np.asarray(probe_points, dtype=np.float64))
    if P.shape[0] < 1 or P.shape[1] != net.n:
        raise ValidationError(f"[Gen] probe point shape 오류: {P.shape}")
    active = np.zeros((net.m, net.n), dtype=bool)
    for j in range(net.n):
        h = fd_step * np.maximum(1.0, np.abs(P[:, j]))
        plus = P.copy()
        minus = P.copy()
        plus[:, j] += h
        minus[:, j] -= h
        d = (mix(net, plus) - mix(net, minus)) / (2.0 * h[:, None])
        active[:, j] = np.abs(d).max(axis=0) > tau
    return SupportMatrix(active)


def verify_full_column_rank(net: MixingNetwork, probe_points: np.ndarray) -> bool:
    P = np.atleast_2d(np.asarray(probe_points, dtype=np.float64))
    for J in net.jacobian(P):
        if np.linalg.matrix_rank(J) < net.n:
            return False
    return True


def build_structured_mixing(
    support: SupportMatrix,
    width: int = 16,
    depth: int = 2,
    seed: int = 0,
    tau: float = 1e-4,
    retries: int = 20,
    probe_count: int = 10,
    fd_step: float = 1e-4,
) -> MixingNetwork:
    """support/rank 검증을 통과할 때까지 가중치 재추출 (최대 retries 회)"""
    empty_rows = np.flatnonzero(~support.mask.any(axis=1))
    if empty_rows.size:
        raise ValidationError(f"[Gen] 부모가 없는 관측변수(빈 행): {empty_rows.tolist()}")
    if generic_rank(support, seed=seed) < support.n:
        raise ValidationError(f"[Gen] support 의 generic rank 가 n={support.n} 보다 작습니다")
    for attempt in range(max(1, retries)):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        net = MixingNetwork.random(support, width, depth, rng)
        probes = _probe_points(support.n, probe_count, rng)
        empirical = verify_support(net, probes, tau, fd_step)
        if empirical == support and verify_full_column_rank(net, probes):
            if attempt:
                logger.info(f"[Gen] mixing 검증 통과 (재시도 {attempt}회)")
            return net
    raise AuditError("mixing_support", f"{retries}회 재시도 후에도 support/rank 검증 실패")


# ------------------------------------------------------------------
# audits
# ------------------------------------------------------------------

@dataclass(frozen=True)
class VariabilityReport:
    order: int
    rank: int
    required: int
    holds: bool
    matrix: np.ndarray

    def to_dict(self) -> dict:
        return {"order": self.order, "rank": self.rank, "required": self.required, "holds": self.holds}


def variability_audit(spec: GenSpec, probe_point: np.ndarray, order: int = 1) -> VariabilityReport:
    """
    도메인별 log-density 차이의 미분 벡터 rank.
    - order=1: ∂_s[log p(s|u_k) − log p(s|u_0)], 요구 rank n_D (도메인 n_D+1 개 이상)
    - order=2: [1계 ; 대각 2계] 를 쌓은 2n_D 벡터, 요구 rank 2n_D (도메인 2n_D+1 개 이상)
    Gaussian: ∂ log p = −P_u(s−μ_u), ∂²_ii log p = −(P_u)_ii
    """
    if order not in (1, 2):
        raise ValidationError(f"[Gen] order 는 1 또는 2: {order}")
    n_D = spec.n_D
    required = n_D if order == 1 else 2 * n_D
    need = required + 1
    if len(spec.domains) < need:
        raise ValidationError(f"[Gen] variability order={order} 는 도메인 {need}개 이상 필요: {len(spec.domains)}")
    s = np.asarray(probe_point, dtype=np.float64).reshape(-1)
    if s.size == spec.n:
        s = s[spec.n_I:]
    if s.size != n_D:
        raise ValidationError(f"[Gen] probe 차원 오류: {s.size}")
    if n_D == 0:
        return VariabilityReport(order=order, rank=0, required=0, holds=True, matrix=np.zeros((0, 0)))

    def first(d: DomainParams) -> np.ndarray:
        return -d.precision() @ (s - d.mean)

    def second(d: DomainParams) -> np.ndarray:
        return -np.diag(d.precision())

    base = spec.domains[0]
    rows = []
    for d in spec.domains[1:]:
        w = first(d) - first(base)
        if order == 2:
            w = np.concatenate([w, second(d) - second(base)])
        rows.append(w)
    mat = np.vstack(rows)
    rank = int(np.linalg.matrix_rank(mat, tol=RANK_TOL)) if np.any(mat) else 0
    return VariabilityReport(order=order, rank=rank, required=required, holds=rank >= required, matrix=mat)


@dataclass(frozen=True)
class AuditReport:
    mode: str
    structural_sparsity: bool | None
    support_match: bool
    full_column_rank: bool
    variability: VariabilityReport | None

    @property
    def passed(self) -> bool:
        ok = self.support_match and self.full_column_rank
        if self.structural_sparsity is not None:
            ok = ok and self.structural_sparsity
        if self.variability is not None:
            ok = ok and self.variability.holds
        return ok

    def failures(self) -> list[str]:
        out = []
        if self.structural_sparsity is False:
            out.append("structural_sparsity")
        if not self.support_match:
            out.append("mixing_support")
        if not self.full_column_rank:
            out.append("full_column_rank")
        if self.variability is not None and not self.variability.holds:
            out.append(f"variability_order{self.variability.order}")
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "passed": self.passed,
            "structural_sparsity": self.structural_sparsity,
            "support_match": self.support_match,
            "full_column_rank": self.full_column_rank,
            "variability": None if self.variability is None else self.variability.to_dict(),
        }


def audit_assumptions(spec: GenSpec, net: MixingNetwork, seed: int = 0, strict: bool = True) -> AuditReport:
    """
    mode 별 가정 검사.
    - UCSS: 전체 SS / Mixed·Grouped: 앞 n_I 열 SS + variability (order 1 / 2) / Base: SS 검사 안 함
    strict=True 면 실패 시 AuditError
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    probes = _probe_points(spec.n, spec.mixing.probe_count, rng)
    if spec.mode == "UCSS":
        ss = ss_report(spec.support).all_hold
    elif spec.mode in ("Mixed", "Grouped") and spec.n_I > 0:
        ss = ss_report(restrict_columns(spec.support, range(spec.n_I))).all_hold
    else:
        ss = None
    support_ok = verify_support(net, probes, spec.mixing.tau, spec.mixing.fd_step) == spec.support
    rank_ok = verify_full_column_rank(net, probes)
    variability = None
    if spec.mode in ("Mixed", "Grouped") and spec.n_D > 0:
        order = 2 if spec.mode == "Grouped" else 1
        probe = rng.standard_normal(spec.n)
        variability = variability_audit(spec, probe, order=order)
    report = AuditReport(
        mode=spec.mode,
        structural_sparsity=ss,
        support_match=support_ok,
        full_column_rank=rank_ok,
        variability=variability,
    )
    if strict and not report.passed:
        failed = report.failures()
        raise AuditError(failed[0], f"mode={spec.mode}, 실패 항목={failed}")
    return report


# ------------------------------------------------------------------
# spec 구성 / 생성
# ------------------------------------------------------------------

def _draw_support(m: int, n: int, density: float, rng: np.random.Generator, check_cols: int) -> np.ndarray:
    """앞 check_cols 열이 SS 를 만족하고 generic rank n, 빈 행 없는 mask"""
    for _ in range(_MAX_SUPPORT_DRAWS):
        mask = rng.random((m, n)) < density
        if check_cols < n:
            mask[:, check_cols:] = True
        S = SupportMatrix(mask)
        if not mask.any(axis=1).all():
            continue
        if check_cols and not ss_report(restrict_columns(S, range(check_cols))).all_hold:
            continue
        if generic_rank(S, seed=int(rng.integers(2**31))) < n:
            continue
        return mask
    raise ValidationError(f"[Gen] 조건을 만족하는 support 를 찾지 못했습니다: m={m}, n={n}, p={density}")


def make_gen_spec(
    mode: str,
    n: int,
    m: int,
    sample_count: int = 2000,
    seed: int = 0,
    density: float = 0.5,
    group_size: int = 2,
    mean_scale: float = 1.0,
    noise_std: float = 0.0,
    mixing: MixingConfig | dict | None = None,
    domain_count: int | None = None,
) -> GenSpec:
    """
    실험 설정별 GenSpec.
    - UCSS: 무작위 SS support, 독립 source
    - Mixed: s_I = 앞 n//2, s_D 열은 all-ones, 도메인 2n_D+1
    - Grouped: Mixed 배치 + s_D 를 group_size 블록으로 분할 (블록 상관)
    - Base: all-ones support, 단일 도메인
    """
    if mode not in MODES:
        raise ValidationError(f"[Gen] 알 수 없는 mode: {mode}")
    if n < 1 or m < n:
        raise ValidationError(f"[Gen] 1 <= n <= m 이어야 합니다: n={n}, m={m}")
    if mode in ("Mixed", "Grouped") and n < 2:
        raise ValidationError(f"[Gen] {mode} mode 는 n >= 2 필요")
    mix_cfg = mixing if isinstance(mixing, MixingConfig) else MixingConfig.from_dict(mixing)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))

    if mode in ("UCSS", "Base"):
        n_I, n_D = n, 0
    else:
        n_I = n // 2
        n_D = n - n_I

    if mode == "Base":
        mask = np.ones((m, n), dtype=bool)
    else:
        mask = _draw_support(m, n, density, rng, check_cols=n_I)

    groups = None
    local_groups = None
    if mode == "Grouped":
        size = max(1, int(group_size))
        local_groups = [tuple(range(i, min(i + size, n_D))) for i in range(0, n_D, size)]
        groups = [tuple(n_I + j for j in g) for g in local_groups]

    if mode in ("Mixed", "Grouped"):
        count = domain_count or (2 * n_D + 1)
    else:
        count = 1
    domains = make_domains(n_D, count, rng, mean_scale=mean_scale, local_groups=local_groups)

    spec = GenSpec(
        n_I=n_I,
        n_D=n_D,
        support=SupportMatrix(mask),
        domains=domains,
        sample_count=int(sample_count),
        seed=int(seed),
        mode=mode,
        independent_variances=draw_variances(n_I, rng),
        groups=groups,
        mixing=mix_cfg,
        noise_std=float(noise_std),
    )
    logger.info(f"[Gen] GenSpec 생성: mode={mode}, n={n} (n_I={n_I}, n_D={n_D}), m={m}, |F|={spec.support.cardinality()}")
    return spec


def generate_dataset(spec: GenSpec) -> tuple[Dataset, MixingNetwork]:
    mc = spec.mixing
    net = build_structured_mixing(
        spec.support,
        width=mc.width,
        depth=mc.depth,
        seed=stream_seed(spec.seed, SEED_STREAM_MIXING),
        tau=mc.tau,
        retries=mc.retries,
        probe_count=mc.probe_count,
        fd_step=mc.fd_step,
    )
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, SEED_STREAM_DOMAINS]))
    count = spec.sample_count
    s_I = sample_independent_sources(
        spec.n_I, count, seed=stream_seed(spec.seed, SEED_STREAM_INDEPENDENT), variances=spec.independent_variances
    )
    s_D, u = sample_dependent_sources(spec, count, seed=int(rng.integers(2**63 - 1)))
    sources = np.concatenate([s_I, s_D], axis=1)
    x = mix(net, sources)
    if spec.noise_std > 0:
        x = x + spec.noise_std * rng.standard_normal(x.shape)
    logger.info(f"[Gen] dataset 생성: samples={count}, domains={len(spec.domains)}, depth={net.depth}")
    return Dataset(sources=sources, u=u.astype(np.int64), x=x, spec=spec), net


# ------------------------------------------------------------------
# 파일 입출력
# ------------------------------------------------------------------

def meta_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".meta.json")


def dataset_columns(n: int, m: int) -> list[str]:
    return [f"s_{j + 1}" for j in range(n)] + ["u"] + [f"x_{i + 1}" for i in range(m)]


def export_dataset(dataset: Dataset, path: str | Path, extra: dict | None = None) -> Path:
    """CSV(17 유효숫자) + <stem>.meta.json. tmp 에 쓴 뒤 replace"""
    spec = dataset.spec
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = dataset_columns(spec.n, spec.m)
    frame = pd.DataFrame(dataset.sources, columns=cols[: spec.n])
    frame["u"] = dataset.u.astype(np.int64)
    for i in range(spec.m):
        frame[cols[spec.n + 1 + i]] = dataset.x[:, i]
    tmp = path.with_suffix(path.suffix + ".tmp")
    frame.to_csv(tmp, index=False, float_format="%.17g")
    tmp.replace(path)

    meta = {"spec": spec.to_dict(), "seed": spec.seed, "generator_name": GENERATOR_NAME}
    meta.update(extra or {})
    write_json_atomic(meta_path(path), meta, indent=2)
    return path


def import_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    mpath = meta_path(path)
    try:
        with open(mpath, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except FileNotFoundError as e:
        raise DatasetFormatError(f"[Gen] meta 파일이 없습니다: {mpath}") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"[Gen] meta 파싱 실패: {mpath}: {e}") from e
    if not isinstance(meta, dict) or "spec" not in meta:
        raise DatasetFormatError(f"[Gen] meta 에 spec 이 없습니다: {mpath}")
    spec = GenSpec.from_dict(meta["spec"])

    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DatasetFormatError(f"[Gen] CSV 파싱 실패: {path}: {e}") from e

    cols = dataset_columns(spec.n, spec.m)
    if list(frame.columns) != cols:
        raise DatasetFormatError(f"[Gen] CSV 헤더가 meta 와 다릅니다: {list(frame.columns)[:6]}...")
    if len(frame) != spec.sample_count:
        raise DatasetFormatError(f"[Gen] 행 수 불일치: csv={len(frame)}, meta={spec.sample_count}")
    if frame.isna().any().any():
        raise DatasetFormatError(f"[Gen] 비어 있거나 잘린 값이 있습니다: {path}")
    try:
        values = frame.to_numpy(dtype=np.float64)
    except ValueError as e:
        raise DatasetFormatError(f"[Gen] 숫자가 아닌 값: {e}") from e
    u_raw = values[:, spec.n]
    if not np.all(u_raw == np.round(u_raw)):
        raise DatasetFormatError("[Gen] u 열은 정수여야 합니다")
    try:
        return Dataset(
            sources=values[:, : spec.n].copy(),
            u=u_raw.astype(np.int64),
            x=values[:, spec.n + 1 :].copy(),
            spec=spec,
        )
    except ValidationError as e:
        raise DatasetFormatError(f"[Gen] dataset 검증 실패: {e}") from e
