"""
실험 1회(trial) = 생성 → 가정 audit → 학습(λ sweep) → 평가.

- trial 마다 run_id 와 단계 trace 를 남기고, 성공/실패와 무관하게 run history 에 저장
- 여러 trial 은 parallel_runner 로 분배 (worker 에서는 이력 저장 없이 결과만 반환)
"""

from __future__ import annotations

import traceback
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from uuid import uuid4

import numpy as np

from src.config.config_manager import config_hash, get_path
from src.data.synthetic_data import Dataset, GenSpec, audit_assumptions, generate_dataset, make_gen_spec
from src.engine.parallel_runner import resolve_workers, run_tasks
from src.engine.run_history_store import RunHistoryStore
from src.metrics.evaluation import EvalReport, evaluate_blocks, mcc
from src.model.flow_estimator import select_sources
from src.model.sparsity_penalty import PenaltyConfig
from src.model.training import TrainConfig, TrainResult, fit
from src.utils.errors import IcaLabError
from src.utils.logger import get_run_logger


@dataclass(frozen=True)
class TrialTask:
    mode: str
    n: int
    m: int
    seed: int
    penalty_kind: str | None = None


def evaluate_model(result: TrainResult, dataset: Dataset, knots: int = 5, hidden: int = 32) -> EvalReport:
    """SD 상위 n 좌표를 source 추정치로 골라 MCC (Grouped 면 블록 점수 포함)"""
    spec = dataset.spec
    idx, s_hat = select_sources(result.model, dataset.x, spec.n)
    if spec.groups:
        report = evaluate_blocks(dataset.sources, s_hat, spec.groups, hidden=hidden, seed=spec.seed, knots=knots)
    else:
        report = mcc(dataset.sources, s_hat, knots=knots)
    report.meta["latent_indices"] = [int(i) for i in idx]
    return report


class ExperimentEngine:
    def __init__(self, cfg: dict, out_dir: str | Path | None = None, record: bool = True):
        self.cfg = cfg
        self.config_hash = config_hash(cfg)
        self.out_dir = Path(out_dir) if out_dir else None
        self._store = RunHistoryStore(self.out_dir) if (self.out_dir and record) else None
        self.last_error: str | None = None

    def make_spec(self, mode: str, n: int, m: int, seed: int) -> GenSpec:
        g = self.cfg.get("gen") or {}
        return make_gen_spec(
            mode=mode,
            n=n,
            m=m,
            sample_count=int(g.get("sample_count", 2000)),
            seed=seed,
            density=float(g.get("density", 0.5)),
            group_size=int(g.get("group_size", 2)),
            mean_scale=float(g.get("mean_scale", 1.0)),
            noise_std=float(g.get("noise_std", 0.0)),
            mixing=g.get("mixing"),
        )

    def train_config(self, seed: int, penalty_kind: str | None = None) -> TrainConfig:
        tcfg = TrainConfig.from_dict(self.cfg.get("train"), flow=self.cfg.get("flow"))
        tcfg.seed = int(seed)
        if penalty_kind:
            tcfg.penalty = PenaltyConfig(kind=penalty_kind, lam=tcfg.penalty.lam)
        return tcfg

    def fit_best_lambda(
        self, dataset: Dataset, tcfg: TrainConfig, log=None
    ) -> tuple[TrainResult, EvalReport, float, list[dict]]:
        """
        λ sweep 중 정답 source 대비 MCC 가 가장 높은 λ 선택.
        sweep 이 비어 있으면 tcfg.penalty 의 λ 하나만 학습
        """
        knots = int(get_path(self.cfg, "eval.spline_knots", 5))
        hidden = int(get_path(self.cfg, "eval.subspace_hidden", 32))
        lambdas = list(tcfg.lambda_sweep) or [tcfg.penalty.lam]
        best: tuple[float, TrainResult | None, EvalReport | None, float] = (-np.inf, None, None, lambdas[0])
        per_lambda = []
        for lam in lambdas:
            cfg_l = tcfg.with_penalty(tcfg.penalty.with_lambda(lam))
            result = fit(cfg_l, dataset)
            report = evaluate_model(result, dataset, knots, hidden)
            per_lambda.append({"lambda": lam, "mcc": report.mcc, "final_loss": result.history.loss[-1]})
            if log:
                log.info(f"[Engine] λ={lam}: mcc={report.mcc:.4f}, loss={result.history.loss[-1]:.4f}")
            if report.mcc > best[0]:
                best = (report.mcc, result, report, float(lam))
        return best[1], best[2], best[3], per_lambda

    def run_trial(self, mode: str, n: int, m: int, seed: int, penalty_kind: str | None = None) -> dict:
        log = get_run_logger("engine", mode)
        run_id = str(uuid4())
        history: dict = {
            "run_id": run_id,
            "command": "trial",
            "seed": int(seed),
            "config_hash": self.config_hash,
            "started_at": datetime.now().isoformat(timespec="seconds"),
            "finished_at": None,
            "status": "unknown",  # success|error
            "message": None,
            "trace": [],
            "errors": [],
            "result": None,
        }

        def _trace(step: str, **meta):
            history["trace"].append({"ts": datetime.now().isoformat(timespec="seconds"), "step": step, **meta})

        step = "init"
        try:
            step = "gen"
            spec = self.make_spec(mode, n, m, seed)
            dataset, net = generate_dataset(spec)
            _trace(step, samples=dataset.sample_count, support_cardinality=spec.support.cardinality())

            step = "audit"
            audit = audit_assumptions(spec, net, seed=seed)
            _trace(step, **audit.to_dict())

            step = "fit"
            tcfg = self.train_config(seed, penalty_kind)
            result, report, best_lambda, per_lambda = self.fit_best_lambda(dataset, tcfg, log)
            _trace(step, per_lambda=per_lambda)

            history["result"] = {
                "mode": mode,
                "n": n,
                "m": m,
                "seed": int(seed),
                "penalty": tcfg.penalty.kind,
                "best_lambda": best_lambda,
                "mcc": report.mcc,
                "per_lambda": per_lambda,
                "report": report.to_dict(),
                "audit": audit.to_dict(),
                "config_hash": self.config_hash,
            }
            history["status"] = "success"
            history["message"] = "ok"
            log.info(f"[Engine] trial 완료: mode={mode}, n={n}, m={m}, seed={seed}, mcc={report.mcc:.4f}")
            return history["result"]
        except IcaLabError as e:
            self.last_error = str(e)
            log.error(f"[Engine] trial 실패: {e} | step={step}")
            history["status"] = "error"
            history["errors"].append({"kind": type(e).__name__, "error": str(e), "step": step})
            history["message"] = f"exception:{e}"
            raise
        except Exception as e:
            self.last_error = str(e)
            log.error(f"[Engine] trial 중 예외: {e} | step={step}")
            log.error(traceback.format_exc())
            history["status"] = "error"
            history["errors"].append({"kind": "exception", "error": str(e), "step": step})
            history["message"] = f"exception:{e}"
            raise
        finally:
            history["finished_at"] = datetime.now().isoformat(timespec="seconds")
            if self._store is not None:
                try:
                    self._store.append(history)
                except Exception:
                    # 이력 저장 실패는 trial 실패로 보지 않는다
                    pass

    def run_trials(self, tasks: list[TrialTask], workers: int | None = 1) -> list[dict]:
        """결과 순서는 tasks 순서. 이력은 worker 결과를 받아 현재 프로세스에서 기록"""
        payloads = [(self.cfg, t) for t in tasks]
        if resolve_workers(workers) <= 1 or len(tasks) <= 1:
            return [self.run_trial(t.mode, t.n, t.m, t.seed, t.penalty_kind) for t in tasks]
        results = run_tasks(_run_trial_task, payloads, workers)
        if self._store is not None:
            for r in results:
                self._store.append({
                    "run_id": str(uuid4()),
                    "command": "trial",
                    "seed": r.get("seed"),
                    "config_hash": self.config_hash,
                    "started_at": None,
                    "finished_at": datetime.now().isoformat(timespec="seconds"),
                    "status": "success",
                    "message": "ok (worker)",
                    "trace": [],
                    "errors": [],
                    "result": r,
                })
        return results


def _run_trial_task(payload: tuple) -> dict:
    cfg, task = payload
    engine = ExperimentEngine(cfg, out_dir=None, record=False)
    return engine.run_trial(task.mode, task.n, task.m, task.seed, task.penalty_kind)
