"""
추정기 f̂: m 차원 affine coupling flow + 조건부 latent prior p(ŝ|u).

- 방향: forward = latent z → 관측 x (디코더), inverse = x → z (인코더)
- coupling: 조건 좌표는 통과, 나머지는 x_T = z_T·exp(s) + t
  s = clamp·tanh(s_raw/clamp), volume-preserving 이면 s 에서 평균을 빼 합이 0
- subnet 마지막 층 0 초기화 → 생성 직후 모델은 항등 사상
- 모든 연산은 autodiff tape 위에서 수행 (numpy 평가는 상수 tape)
- decoder Jacobian 은 tangent 를 forward 와 함께 tape 연산으로 전파해서 만든다
  → penalty 의 파라미터 gradient 가 고계 미분 없이 흐른다
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from src.engine.checkpoint_store import CheckpointStore
from src.model import autodiff as ad
from src.utils.errors import CheckpointFormatError, DomainError, ValidationError
from src.utils.logger import logger

LOG_2PI = math.log(2.0 * math.pi)
ROLES = ("invariant", "dependent", "noise")
CHECKPOINT_FORMAT = "ica-lab-flow"
CHECKPOINT_VERSION = 1

_checkpoints = CheckpointStore(fmt=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION)


@dataclass
class FlowConfig:
    layers: int = 10
    width: int = 32
    hidden_layers: int = 1
    volume_preserving: bool = True
    scale_clamp: float = 2.0

    def __post_init__(self):
        if self.layers < 1 or self.width < 1 or self.hidden_layers < 1:
            raise ValidationError(
                f"[Flow] layers/width/hidden_layers 는 1 이상: {self.layers}/{self.width}/{self.hidden_layers}"
            )
        if self.scale_clamp <= 0:
            raise ValidationError(f"[Flow] scale_clamp 는 양수: {self.scale_clamp}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "FlowConfig":
        d = d or {}
        base = cls()
        return cls(
            layers=int(d.get("layers", base.layers)),
            width=int(d.get("width", base.width)),
            hidden_layers=int(d.get("hidden_layers", base.hidden_layers)),
            volume_preserving=bool(d.get("volume_preserving", base.volume_preserving)),
            scale_clamp=float(d.get("scale_clamp", base.scale_clamp)),
        )

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "width": self.width,
            "hidden_layers": self.hidden_layers,
            "volume_preserving": self.volume_preserving,
            "scale_clamp": self.scale_clamp,
        }


@dataclass
class CouplingLayer:
    """조건 좌표(cond)/변환 좌표(trans) 분할과 파라미터 이름 prefix"""

    index: int
    cond: np.ndarray
    trans: np.ndarray

    @property
    def prefix(self) -> str:
        return f"L{self.index}"

    @property
    def order_inverse(self) -> np.ndarray:
        return np.argsort(np.concatenate([self.cond, self.trans]), kind="stable")

    @property
    def is_identity(self) -> bool:
        return self.trans.size == 0

    def mask(self, m: int) -> np.ndarray:
        """True = 변환 좌표"""
        out = np.zeros(m, dtype=bool)
        out[self.trans] = True
        return out


def _as_batch(a, m: int, what: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != m:
        raise ValidationError(f"[Flow] {what} 차원 불일치: shape={arr.shape}, m={m}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"[Flow] {what} 에 비유한 값이 있습니다")
    return arr


class FlowModel:
    def __init__(self, m: int, n: int, config: FlowConfig, layers: list[CouplingLayer], params: dict[str, np.ndarray]):
        if not (1 <= n <= m):
            raise ValidationError(f"[Flow] 1 <= n <= m 이어야 합니다: n={n}, m={m}")
        self.m = int(m)
        self.n = int(n)
        self.config = config
        self.layers = layers
        self.params = params

    @classmethod
    def create(cls, m: int, n: int, config: FlowConfig | None = None, seed: int = 0) -> "FlowModel":
        """마스크는 무작위 절반과 그 여집합을 번갈아 사용. 좌표 순서는 바꾸지 않는다"""
        config = config or FlowConfig()
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
        layers: list[CouplingLayer] = []
        params: dict[str, np.ndarray] = {}
        for l in range(config.layers):
            if l % 2 == 0:
                perm = rng.permutation(m)
                cond = np.sort(perm[: m // 2])
                trans = np.sort(perm[m // 2:])
            else:
                cond, trans = layers[-1].trans, layers[-1].cond
            layer = CouplingLayer(index=l, cond=cond.astype(np.int64), trans=trans.astype(np.int64))
            layers.append(layer)
            if layer.is_identity:
                continue
            fan_in = max(1, cond.size)
            params[f"L{l}.W0"] = rng.standard_normal((cond.size, config.width)) / math.sqrt(fan_in)
            params[f"L{l}.b0"] = np.zeros(config.width)
            for h in range(1, config.hidden_layers):
                params[f"L{l}.W{h}"] = rng.standard_normal((config.width, config.width)) / math.sqrt(config.width)
                params[f"L{l}.b{h}"] = np.zeros(config.width)
            k = trans.size
            params[f"L{l}.Wout"] = np.zeros((config.width, 2 * k))
            params[f"L{l}.bout"] = np.zeros(2 * k)
        return cls(m, n, config, layers, params)

    # ------------------------------------------------------------------
    # tape 연산
    # ------------------------------------------------------------------

    def bind(self, tape: ad.Tape, trainable: bool = True) -> dict[str, ad.Var]:
        make = tape.variable if trainable else tape.constant
        return {name: make(value) for name, value in self.params.items()}

    def _subnet(self, P: dict[str, ad.Var], layer: CouplingLayer, zc: ad.Var, dzc: ad.Var | None):
        pre = layer.prefix
        W0 = P[f"{pre}.W0"]
        h = ad.tanh(ad.affine(zc, W0, P[f"{pre}.b0"]))
        dh = None if dzc is None else (1.0 - ad.square(h)) * ad.matmul(dzc, W0)
        for k in range(1, self.config.hidden_layers):
            W = P[f"{pre}.W{k}"]
            h = ad.tanh(ad.affine(h, W, P[f"{pre}.b{k}"]))
            if dh is not None:
                dh = (1.0 - ad.square(h)) * ad.matmul(dh, W)
        Wout = P[f"{pre}.Wout"]
        out = ad.affine(h, Wout, P[f"{pre}.bout"])
        dout = None if dh is None else ad.matmul(dh, Wout)
        return out, dout

    def _scales(self, layer: CouplingLayer, out: ad.Var, dout: ad.Var | None):
        k = layer.trans.size
        clamp = self.config.scale_clamp
        s_idx = np.arange(k)
        t_idx = np.arange(k, 2 * k)
        c = clamp * ad.tanh(ad.take(out, s_idx, axis=1) * (1.0 / clamp))
        t = ad.take(out, t_idx, axis=1)
        ds = dt = None
        if dout is not None:
            ds = (1.0 - ad.square(c * (1.0 / clamp))) * ad.take(dout, s_idx, axis=1)
            dt = ad.take(dout, t_idx, axis=1)
        if self.config.volume_preserving:
            c = c - ad.mean(c, axis=1, keepdims=True)
            if ds is not None:
                ds = ds - ad.mean(ds, axis=1, keepdims=True)
        return c, t, ds, dt

    def layer_forward(self, P, layer: CouplingLayer, z: ad.Var, dz: ad.Var | None = None):
        """(x, log_det, dx). log_det 는 volume-preserving 이면 None(=0)"""
        if layer.is_identity:
            return z, None, dz
        zc = ad.take(z, layer.cond, axis=1)
        zt = ad.take(z, layer.trans, axis=1)
        dzc = None if dz is None else ad.take(dz, layer.cond, axis=1)
        out, dout = self._subnet(P, layer, zc, dzc)
        s, t, ds, dt = self._scales(layer, out, dout)
        es = ad.exp(s)
        xt = zt * es + t
        x = ad.take(ad.concat([zc, xt], axis=1), layer.order_inverse, axis=1)
        dx = None
        if dz is not None:
            dzt = ad.take(dz, layer.trans, axis=1)
            dxt = dzt * es + zt * es * ds + dt
            dx = ad.take(ad.concat([dzc, dxt], axis=1), layer.order_inverse, axis=1)
        log_det = None if self.config.volume_preserving else ad.sum_(s, axis=1)
        return x, log_det, dx

    def layer_inverse(self, P, layer: CouplingLayer, x: ad.Var):
        if layer.is_identity:
            return x, None
        xc = ad.take(x, layer.cond, axis=1)
        xt = ad.take(x, layer.trans, axis=1)
        out, _ = self._subnet(P, layer, xc, None)
        s, t, _, _ = self._scales(layer, out, None)
        zt = (xt - t) * ad.exp(-s)
        z = ad.take(ad.concat([xc, zt], axis=1), layer.order_inverse, axis=1)
        log_det = None if self.config.volume_preserving else -ad.sum_(s, axis=1)
        return z, log_det

    def forward_var(self, P, z: ad.Var, dz: ad.Var | None = None):
        log_det = None
        for layer in self.layers:
            z, ld, dz = self.layer_forward(P, layer, z, dz)
            if ld is not None:
                log_det = ld if log_det is None else log_det + ld
        return z, log_det, dz

    def inverse_var(self, P, x: ad.Var):
        log_det = None
        for layer in reversed(self.layers):
            x, ld = self.layer_inverse(P, layer, x)
            if ld is not None:
                log_det = ld if log_det is None else log_det + ld
        return x, log_det

    def copy(self) -> "FlowModel":
        return FlowModel(self.m, self.n, self.config, self.layers, {k: v.copy() for k, v in self.params.items()})

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class ConditionalPrior:
    """
    latent 좌표별 역할.
    - dependent: 도메인 u 별 학습 평균/log 분산
    - invariant / noise: N(0, 1) 고정
    """

    roles: tuple[str, ...]
    num_domains: int
    params: dict[str, np.ndarray]

    def __post_init__(self):
        self.roles = tuple(self.roles)
        bad = [r for r in self.roles if r not in ROLES]
        if bad:
            raise ValidationError(f"[Flow] 알 수 없는 prior role: {bad}")
        if self.num_domains < 1:
            raise ValidationError(f"[Flow] num_domains 는 1 이상: {self.num_domains}")

    @classmethod
    def create(cls, roles: Sequence[str], num_domains: int = 1) -> "ConditionalPrior":
        d = sum(1 for r in roles if r == "dependent")
        params = {}
        if d:
            params = {
                "prior.mu": np.zeros((num_domains, d)),
                "prior.logvar": np.zeros((num_domains, d)),
            }
        return cls(roles=tuple(roles), num_domains=num_domains, params=params)

    @classmethod
    def standard(cls, m: int, n: int) -> "ConditionalPrior":
        return cls.create(["invariant"] * n + ["noise"] * (m - n), 1)

    @classmethod
    def for_spec(cls, spec, m: int | None = None) -> "ConditionalPrior":
        """GenSpec 의 s_I / s_D 배치를 latent 앞 n 좌표에 대응시키고 나머지는 noise"""
        m = spec.m if m is None else m
        roles = ["invariant"] * spec.n_I + ["dependent"] * spec.n_D + ["noise"] * (m - spec.n)
        return cls.create(roles, len(spec.domains))

    @property
    def m(self) -> int:
        return len(self.roles)

    @property
    def dependent_idx(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == "dependent"], dtype=np.int64)

    @property
    def fixed_idx(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r != "dependent"], dtype=np.int64)

    def bind(self, tape: ad.Tape, trainable: bool = True) -> dict[str, ad.Var]:
        make = tape.variable if trainable else tape.constant
        return {name: make(value) for name, value in self.params.items()}

    def _check_labels(self, u, count: int) -> np.ndarray:
        labels = np.zeros(count, dtype=np.int64) if u is None else np.asarray(u, dtype=np.int64).reshape(-1)
        if labels.size == 1 and count > 1:
            labels = np.full(count, int(labels[0]), dtype=np.int64)
        if labels.size != count:
            raise ValidationError(f"[Flow] u 길이({labels.size}) != 표본 수({count})")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_domains):
            raise ValidationError(f"[Flow] u label 이 prior 도메인 수({self.num_domains}) 범위 밖입니다")
        return labels

    def log_prob_var(self, Q: dict[str, ad.Var], z: ad.Var, u) -> ad.Var:
        count, m = z.shape
        if m != self.m:
            raise ValidationError(f"[Flow] prior 차원({self.m}) != latent 차원({m})")
        labels = self._check_labels(u, count)
        const = -0.5 * LOG_2PI * m
        fixed = self.fixed_idx
        total = None
        if fixed.size:
            zf = ad.take(z, fixed, axis=1)
            total = ad.sum_(-0.5 * ad.square(zf), axis=1)
        dep = self.dependent_idx
        if dep.size:
            zd = ad.take(z, dep, axis=1)
            mu = ad.take(Q["prior.mu"], labels, axis=0)
            lv = ad.take(Q["prior.logvar"], labels, axis=0)
            term = ad.sum_(-0.5 * ad.square(zd - mu) * ad.exp(-lv) - 0.5 * lv, axis=1)
            total = term if total is None else total + term
        return total + const

    def sample(self, u, count: int, rng: np.random.Generator) -> np.ndarray:
        labels = self._check_labels(u, count)
        z = rng.standard_normal((count, self.m))
        dep = self.dependent_idx
        if dep.size:
            mu = self.params["prior.mu"][labels]
            sd = np.exp(0.5 * self.params["prior.logvar"][labels])
            z[:, dep] = mu + sd * z[:, dep]
        return z

    def copy(self) -> "ConditionalPrior":
        return ConditionalPrior(self.roles, self.num_domains, {k: v.copy() for k, v in self.params.items()})


# ----------------------------------------------------------------------
# numpy 진입점
# ----------------------------------------------------------------------

def forward(model: FlowModel, z) -> tuple[np.ndarray, np.ndarray]:
    Z = _as_batch(z, model.m, "z")
    tape = ad.Tape()
    x, log_det, _ = model.forward_var(model.bind(tape, trainable=False), tape.constant(Z))
    ld = np.zeros(Z.shape[0]) if log_det is None else log_det.value.copy()
    return x.value.copy(), ld


def inverse(model: FlowModel, x) -> tuple[np.ndarray, np.ndarray]:
    X = _as_batch(x, model.m, "x")
    tape = ad.Tape()
    z, log_det = model.inverse_var(model.bind(tape, trainable=False), tape.constant(X))
    ld = np.zeros(X.shape[0]) if log_det is None else log_det.value.copy()
    return z.value.copy(), ld


def log_likelihood_var(model: FlowModel, prior: ConditionalPrior, P, Q, x: ad.Var, u) -> ad.Var:
    """표본별 log p(x|u) = log p_prior(inverse(x)|u) + log|det J_inverse|"""
    z, log_det = model.inverse_var(P, x)
    lp = prior.log_prob_var(Q, z, u)
    return lp if log_det is None else lp + log_det


def log_likelihood(model: FlowModel, prior: ConditionalPrior, x, u=None):
    """1차원 x 면 float, 배치면 표본별 배열"""
    if prior.m != model.m:
        raise ValidationError(f"[Flow] prior 차원({prior.m}) != model 차원({model.m})")
    single = np.asarray(x).ndim == 1
    X = _as_batch(x, model.m, "x")
    tape = ad.Tape()
    ll = log_likelihood_var(model, prior, model.bind(tape, False), prior.bind(tape, False), tape.constant(X), u)
    out = ll.value.copy()
    return float(out[0]) if single else out


def tangent_batch(z: ad.Var, n: int, tape: ad.Tape) -> tuple[ad.Var, ad.Var, int]:
    """
    점 P 개를 source 방향 n 개만큼 반복하고 단위 tangent e_j 를 붙인다.
    행 순서: j 우선 (행 j·P + b = 점 b, 방향 j)
    """
    P = z.shape[0]
    m = z.shape[1]
    rep = np.tile(np.arange(P), n)
    tangents = np.zeros((n * P, m))
    for j in range(n):
        tangents[j * P:(j + 1) * P, j] = 1.0
    return ad.take(z, rep, axis=0), tape.constant(tangents), P


def decoder_jacobian_var(model: FlowModel, P, z: ad.Var, n: int) -> ad.Var:
    """(n·P, m) tangent 출력. 행 j·P + b 는 점 b 에서 J_forward[:, j]"""
    tape = z.tape
    zt, dz, _ = tangent_batch(z, n, tape)
    _, _, dx = model.forward_var(P, zt, dz)
    return dx


def mean_abs_jacobian_var(model: FlowModel, P, z: ad.Var, n: int) -> ad.Var:
    """점 평균 |J| (n × m, 전치된 배치 평균 Jacobian)"""
    count = z.shape[0]
    dx = decoder_jacobian_var(model, P, z, n)
    avg = np.zeros((n, n * count))
    for j in range(n):
        avg[j, j * count:(j + 1) * count] = 1.0 / count
    return ad.matmul(z.tape.constant(avg), ad.abs_(dx))


def decoder_jacobian(model: FlowModel, z, n: int | None = None) -> np.ndarray:
    """J_forward(z) 의 앞 n 열 (m × n). z 가 배치면 (B, m, n)"""
    n = model.n if n is None else int(n)
    if not (1 <= n <= model.m):
        raise ValidationError(f"[Flow] n 범위 오류: {n}")
    single = np.asarray(z).ndim == 1
    Z = _as_batch(z, model.m, "z")
    tape = ad.Tape()
    dx = decoder_jacobian_var(model, model.bind(tape, False), tape.constant(Z), n).value
    B = Z.shape[0]
    J = dx.reshape(n, B, model.m).transpose(1, 2, 0)
    if not np.all(np.isfinite(J)):
        raise DomainError("[Flow] decoder Jacobian 에 비유한 값")
    return J[0] if single else J


def sample(model: FlowModel, prior: ConditionalPrior, u, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = prior.sample(u, count, rng)
    x, _ = forward(model, z)
    return x


def select_sources(model: FlowModel, x, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """
    inverse(x) 의 표준편차 상위 n 좌표를 source 추정치로 선택.
    동률이면 낮은 인덱스 우선. 반환 (indices, ŝ)
    """
    n = model.n if n is None else int(n)
    z, _ = inverse(model, x)
    sd = z.std(axis=0)
    idx = np.argsort(-sd, kind="stable")[:n]
    return idx, z[:, idx]


# ----------------------------------------------------------------------
# checkpoint
# ----------------------------------------------------------------------

def _encode_params(params: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in params.items()}


def _decode_params(raw: dict) -> dict[str, np.ndarray]:
    out = {}
    for k, v in raw.items():
        arr = np.asarray(v["data"], dtype=np.float64)
        out[k] = arr.reshape(tuple(v["shape"]))
    return out


def save_checkpoint(model: FlowModel, prior: ConditionalPrior, path: str | Path, extra: dict | None = None) -> Path:
    payload = {
        "topology": {
            "m": model.m,
            "n": model.n,
            "config": model.config.to_dict(),
            "layers": [{"cond": l.cond.tolist(), "trans": l.trans.tolist()} for l in model.layers],
        },
        "params": _encode_params(model.params),
        "prior": {
            "roles": list(prior.roles),
            "num_domains": prior.num_domains,
            "params": _encode_params(prior.params),
        },
        "extra": extra or {},
    }
    path = _checkpoints.save(path, payload)
    logger.info(f"[Flow] checkpoint 저장: {path} (params={model.parameter_count()})")
    return path


def load_checkpoint(path: str | Path) -> tuple[FlowModel, ConditionalPrior, dict]:
    doc = _checkpoints.load(path)
    try:
        topo = doc["topology"]
        config = FlowConfig.from_dict(topo["config"])
        layers = [
            CouplingLayer(index=i, cond=np.asarray(l["cond"], dtype=np.int64), trans=np.asarray(l["trans"], dtype=np.int64))
            for i, l in enumerate(topo["layers"])
        ]
        model = FlowModel(int(topo["m"]), int(topo["n"]), config, layers, _decode_params(doc["params"]))
        pr = doc["prior"]
        prior = ConditionalPrior(tuple(pr["roles"]), int(pr["num_domains"]), _decode_params(pr["params"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"[Flow] checkpoint 내용 오류: {e}") from e
    if len(layers) != config.layers or prior.m != model.m:
        raise CheckpointFormatError("[Flow] checkpoint topology 불일치")
    for name, shape in expected_param_shapes(model).items():
        got = model.params.get(name)
        if got is None or got.shape != shape:
            raise CheckpointFormatError(f"[Flow] checkpoint 파라미터 누락/shape 불일치: {name}")
    return model, prior, doc.get("extra") or {}


def expected_param_shapes(model: FlowModel) -> dict[str, tuple]:
    cfg = model.config
    shapes: dict[str, tuple] = {}
    for layer in model.layers:
        if layer.is_identity:
            continue
        pre = layer.prefix
        shapes[f"{pre}.W0"] = (layer.cond.size, cfg.width)
        shapes[f"{pre}.b0"] = (cfg.width,)
        for h in range(1, cfg.hidden_layers):
            shapes[f"{pre}.W{h}"] = (cfg.width, cfg.width)
            shapes[f"{pre}.b{h}"] = (cfg.width,)
        shapes[f"{pre}.Wout"] = (cfg.width, 2 * layer.trans.size)
        shapes[f"{pre}.bout"] = (2 * layer.trans.size,)
    return shapes
