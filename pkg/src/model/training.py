"""
정규화 최대우도 학습.

loss = −mean log p(x|u) + jacobian_penalty(mean_b |J_f̂(z_b)|)
- Jacobian 은 배치 앞쪽 penalty_points 개 점에서만 계산 (배치는 이미 셔플됨)
- λ = 0 이면 Jacobian 경로 자체를 건너뛴다
- Adam, epoch 별 셔플은 seed 로 고정 → 같은 입력이면 history 가 비트 단위로 같다
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from src.data.synthetic_data import Dataset
from src.model import autodiff as ad
from src.model.flow_estimator import (
    ConditionalPrior,
    FlowConfig,
    FlowModel,
    mean_abs_jacobian_var,
    save_checkpoint,
)
from src.model.sparsity_penalty import PenaltyConfig, jacobian_penalty_var
from src.utils.errors import DivergenceError, DomainError, ValidationError
from src.utils.logger import get_log_dir, get_run_logger, log_run_event

HISTORY_HEADER = ["epoch", "nll", "penalty", "loss"]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 200
    epochs: int = 60
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    volume_preserving: bool = True
    penalty_points: int = 32
    warmup_epochs: int = 0
    lambda_sweep: tuple[float, ...] = (0.001, 0.01, 0.1)
    flow: FlowConfig = field(default_factory=FlowConfig)
    dump_dir: str | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"[Train] learning_rate 는 양수: {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1 or self.penalty_points < 1:
            raise ValidationError(
                f"[Train] batch_size/epochs/penalty_points 는 1 이상: {self.batch_size}/{self.epochs}/{self.penalty_points}"
            )
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValidationError("[Train] optimizer moment 설정 오류")
        if self.warmup_epochs < 0:
            raise ValidationError(f"[Train] warmup_epochs 는 0 이상: {self.warmup_epochs}")
        self.lambda_sweep = tuple(float(v) for v in self.lambda_sweep)
        if self.flow.volume_preserving != self.volume_preserving:
            self.flow = FlowConfig(**{**self.flow.to_dict(), "volume_preserving": self.volume_preserving})

    @classmethod
    def from_dict(cls, d: dict | None, flow: dict | None = None) -> "TrainConfig":
        """settings.yaml 의 train 섹션 (+ flow 섹션)"""
        d = d or {}
        flow_cfg = FlowConfig.from_dict(flow if flow is not None else d.get("flow"))
        base = cls.__dataclass_fields__
        return cls(
            learning_rate=float(d.get("learning_rate", base["learning_rate"].default)),
            batch_size=int(d.get("batch_size", base["batch_size"].default)),
            epochs=int(d.get("epochs", base["epochs"].default)),
            penalty=PenaltyConfig.from_dict(d.get("penalty")),
            seed=int(d.get("seed", 0)),
            beta1=float(d.get("beta1", 0.9)),
            beta2=float(d.get("beta2", 0.999)),
            eps=float(d.get("eps", 1e-8)),
            volume_preserving=bool(d.get("volume_preserving", flow_cfg.volume_preserving)),
            penalty_points=int(d.get("penalty_points", 32)),
            warmup_epochs=int(d.get("warmup_epochs", 0)),
            lambda_sweep=tuple(d.get("lambda_sweep", (0.001, 0.01, 0.1))),
            flow=flow_cfg,
            dump_dir=d.get("dump_dir"),
        )

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "penalty": self.penalty.to_dict(),
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "volume_preserving": self.volume_preserving,
            "penalty_points": self.penalty_points,
            "warmup_epochs": self.warmup_epochs,
            "lambda_sweep": list(self.lambda_sweep),
            "flow": self.flow.to_dict(),
            "dump_dir": self.dump_dir,
        }

    def with_penalty(self, penalty: PenaltyConfig) -> "TrainConfig":
        d = self.to_dict()
        out = TrainConfig.from_dict(d, flow=d["flow"])
        out.penalty = penalty
        return out

    def lambda_at(self, epoch: int) -> float:
        """선형 warm-up: epoch(0-based) 가 warmup_epochs 에 도달하면 λ 전체"""
        if self.warmup_epochs <= 0:
            return self.penalty.lam
        return self.penalty.lam * min(1.0, (epoch + 1) / self.warmup_epochs)


@dataclass
class TrainHistory:
    nll: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)

    def append(self, nll: float, penalty: float, loss: float) -> None:
        self.nll.append(float(nll))
        self.penalty.append(float(penalty))
        self.loss.append(float(loss))

    def to_rows(self) -> list[dict]:
        return [
            {"epoch": i + 1, "nll": a, "penalty": b, "loss": c}
            for i, (a, b, c) in enumerate(zip(self.nll, self.penalty, self.loss))
        ]


class TrainResult(NamedTuple):
    model: FlowModel
    history: TrainHistory
    prior: ConditionalPrior


@dataclass(frozen=True)
class LossParts:
    nll: float
    penalty: float
    loss: float


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _loss_var(model: FlowModel, prior: ConditionalPrior, P, Q, X: ad.Var, u, penalty: PenaltyConfig, points: int):
    z, log_det = model.inverse_var(P, X)
    ll = prior.log_prob_var(Q, z, u)
    if log_det is not None:
        ll = ll + log_det
    nll = -ad.mean(ll)
    if penalty.lam <= 0:
        return nll, nll, None
    count = min(points, X.shape[0])
    z_sub = ad.take(z, np.arange(count), axis=0)
    pen = jacobian_penalty_var(penalty, mean_abs_jacobian_var(model, P, z_sub, model.n))
    return nll + pen, nll, pen


def loss_and_gradients(
    model: FlowModel,
    prior: ConditionalPrior,
    x: np.ndarray,
    u,
    penalty: PenaltyConfig,
    penalty_points: int = 32,
) -> tuple[LossParts, dict[str, np.ndarray]]:
    """파라미터 이름 → gradient (model + prior)"""
    X = np.asarray(x, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError(f"[Train] 빈 배치 또는 shape 오류: {X.shape}")
    tape = ad.Tape()
    P = model.bind(tape)
    Q = prior.bind(tape)
    total, nll, pen = _loss_var(model, prior, P, Q, tape.constant(X), u, penalty, penalty_points)
    names = list(P) + list(Q)
    wrt = [P[k] for k in P] + [Q[k] for k in Q]
    grads = tape.gradient(total, wrt=wrt)
    parts = LossParts(
        nll=float(nll.value),
        penalty=0.0 if pen is None else float(pen.value),
        loss=float(total.value),
    )
    return parts, dict(zip(names, grads))


def loss(model: FlowModel, prior: ConditionalPrior, batch: tuple[np.ndarray, np.ndarray], penalty: PenaltyConfig,
         penalty_points: int = 32) -> float:
    x, u = batch
    X = np.asarray(x, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError(f"[Train] 빈 배치 또는 shape 오류: {X.shape}")
    tape = ad.Tape()
    total, _, _ = _loss_var(
        model, prior, model.bind(tape, False), prior.bind(tape, False), tape.constant(X), u, penalty, penalty_points
    )
    value = float(total.value)
    if not math.isfinite(value):
        raise DivergenceError("[Train] loss 가 유한하지 않습니다")
    return value


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    for name, g in grads.items():
        if name not in params or np.shape(g) != params[name].shape:
            raise ValidationError(f"[Train] gradient shape 불일치: {name}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"[Train] 비유한 gradient: {name}")
    t = state.t + 1
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        m_prev = state.m.get(name, np.zeros_like(g))
        v_prev = state.v.get(name, np.zeros_like(g))
        m_t = beta1 * m_prev + (1.0 - beta1) * g
        v_t = beta2 * v_prev + (1.0 - beta2) * g * g
        m_hat = m_t / (1.0 - beta1 ** t)
        v_hat = v_t / (1.0 - beta2 ** t)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m_t, v_t
    return new_params, AdamState(t=t, m=new_m, v=new_v)


def _dump_state(config: TrainConfig, model: FlowModel, prior: ConditionalPrior, epoch: int, reason: str) -> str:
    dump_dir = Path(config.dump_dir) if config.dump_dir else Path(get_log_dir()) / "dumps"
    path = dump_dir / f"divergence_seed{config.seed}_epoch{epoch}.json"
    try:
        save_checkpoint(model, prior, path, extra={"epoch": epoch, "reason": reason, "train": config.to_dict()})
    except Exception:
        return ""
    return str(path)


def fit(
    config: TrainConfig,
    dataset: Dataset,
    model: FlowModel | None = None,
    prior: ConditionalPrior | None = None,
) -> TrainResult:
    spec = dataset.spec
    log = get_run_logger("train", "fit")
    if model is None:
        model = FlowModel.create(spec.m, spec.n, config.flow, seed=config.seed)
    if prior is None:
        prior = ConditionalPrior.for_spec(spec, model.m)
    if dataset.x.shape[1] != model.m:
        raise ValidationError(f"[Train] dataset m({dataset.x.shape[1]}) != model m({model.m})")

    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 3]))
    state = AdamState()
    history = TrainHistory()
    count = dataset.sample_count
    log.info(
        f"[Train] 시작: samples={count}, m={model.m}, n={model.n}, epochs={config.epochs}, "
        f"penalty={config.penalty.kind} λ={config.penalty.lam}, params={model.parameter_count()}"
    )
    for epoch in range(config.epochs):
        penalty = config.penalty.with_lambda(config.lambda_at(epoch))
        order = rng.permutation(count)
        sums = np.zeros(3)
        for start in range(0, count, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                parts, grads = loss_and_gradients(
                    model, prior, dataset.x[idx], dataset.u[idx], penalty, config.penalty_points
                )
                if not math.isfinite(parts.loss):
                    raise DivergenceError("비유한 loss")
                params = {**model.params, **prior.params}
                params, state = optimizer_step(params, grads, state, config.learning_rate,
                                               config.beta1, config.beta2, config.eps)
            except (DivergenceError, DomainError) as e:
                dump = _dump_state(config, model, prior, epoch + 1, str(e))
                log.error(f"[Train] 발산: epoch={epoch + 1}, {e}")
                raise DivergenceError(f"[Train] 학습 발산: {e}", epoch=epoch + 1, dump_path=dump) from e
            model.params = {k: params[k] for k in model.params}
            prior.params = {k: params[k] for k in prior.params}
            sums += len(idx) * np.array([parts.nll, parts.penalty, parts.loss])
        nll, pen, total = sums / count
        history.append(nll, pen, total)
        log_run_event("train", {"epoch": epoch + 1, "nll": nll, "penalty": pen, "loss": total, "seed": config.seed})
        if epoch == 0 or (epoch + 1) % 10 == 0 or epoch + 1 == config.epochs:
            log.info(f"[Train] epoch {epoch + 1}/{config.epochs}: nll={nll:.4f}, penalty={pen:.5f}, loss={total:.4f}")
    return TrainResult(model=model, history=history, prior=prior)


def history_to_csv(history: TrainHistory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(history.to_rows(), columns=HISTORY_HEADER)
    tmp = path.with_suffix(path.suffix + ".tmp")
    frame.to_csv(tmp, index=False, float_format="%.17g")
    tmp.replace(path)
    return path
