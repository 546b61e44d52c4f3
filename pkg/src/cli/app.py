"""
ica-lab 명령줄 진입점.

    python run/ica_lab.py <gen|check-support|train|eval|reproduce|oracle> [--config PATH] [--seed N] [--fast] [--out DIR]

- 라이브러리 코드는 예외만 던지고, 종료 코드 변환은 main() 에서만 한다
  (0 성공 / 2 검증·audit 실패 / 3 발산·수치 도메인 / 4 파일 I/O)
- 결과 파일은 모두 --out 아래에 쓰고, manifest.json 에 seed 와 config_hash 를 남긴다
- stdout 은 결과 요약(JSON) 전용, 로그는 stderr + logs/
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import traceback
from collections import defaultdict
from datetime import datetime
from pathlib import Path
from typing import Any

import pandas as pd

from src.config.config_manager import config_hash, get_path, load_run_config
from src.data.synthetic_data import audit_assumptions, export_dataset, generate_dataset, import_dataset
from src.engine.experiment_engine import ExperimentEngine, TrialTask, evaluate_model
from src.engine.json_file import write_json_atomic
from src.metrics.evaluation import SUMMARY_HEADER
from src.model.flow_estimator import load_checkpoint, save_checkpoint
from src.model.sparsity_penalty import PENALTY_KINDS, PenaltyConfig
from src.model.training import TrainHistory, TrainConfig, TrainResult, fit, history_to_csv
from src.structure.identifiability_oracle import (
    SCAN_HEADER,
    exhaustive_lemma_scan,
    lemma_check,
    linear_recovery_demo,
    random_ss_matrix,
)
from src.structure.support_analysis import (
    RATE_HEADER,
    SupportMatrix,
    ss_rate_monte_carlo,
    ss_rate_table,
    ss_report,
    ss_source_probability_analytic,
)
from src.utils.errors import AuditError, IcaLabError, ValidationError
from src.utils.logger import get_run_logger, logger, set_run_event_logging

COMMANDS = ("gen", "check-support", "train", "eval", "reproduce", "oracle")
REPRODUCE_TARGETS = ("fig3", "fig4", "ablation", "reg", "sources")
FIG4_HEADER = RATE_HEADER + ["analytic", "all_rate"]
TRIAL_HEADER = SUMMARY_HEADER + ["n", "m", "best_lambda"]
MEDIAN_HEADER = ["run", "n", "trials", "median_mcc"]
EXIT_IO = 4


# ----------------------------------------------------------------------
# 출력 헬퍼
# ----------------------------------------------------------------------

def _write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return write_json_atomic(path, data, indent=2)


def _write_csv(rows: list[dict], header: list[str], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=header)
    tmp = path.with_suffix(path.suffix + ".tmp")
    frame.to_csv(tmp, index=False, float_format="%.10g")
    tmp.replace(path)
    return path


def _emit(summary: dict) -> None:
    print(json.dumps(summary, ensure_ascii=False, indent=2, default=str))


class RunContext:
    """명령 1회 실행에 필요한 설정/경로/seed 묶음"""

    def __init__(self, command: str, args: argparse.Namespace, cfg: dict):
        self.command = command
        self.args = args
        self.cfg = cfg
        self.seed = int(cfg.get("seed", 0))
        self.workers = args.workers
        self.config_hash = config_hash(cfg)
        self.out = Path(args.out) if args.out else Path("results") / command
        self.files: list[str] = []
        self.log = get_run_logger(command.replace("-", "_"), "cli")

    def stamp(self) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash}

    def json(self, name: str, data: dict) -> Path:
        path = _write_json(self.out / name, {**data, **self.stamp()})
        self.files.append(path.name)
        return path

    def csv(self, name: str, rows: list[dict], header: list[str]) -> Path:
        path = _write_csv(rows, header, self.out / name)
        self.files.append(path.name)
        return path

    def manifest(self, extra: dict | None = None) -> Path:
        data = {
            "command": self.command,
            "created_at": datetime.now().isoformat(timespec="seconds"),
            "files": list(self.files),
            "config": self.cfg,
            **(extra or {}),
        }
        return _write_json(self.out / "manifest.json", {**data, **self.stamp()})


# ----------------------------------------------------------------------
# 명령
# ----------------------------------------------------------------------

def _gen_params(ctx: RunContext) -> tuple[str, int, int]:
    g = ctx.cfg.get("gen") or {}
    return str(g.get("mode", "UCSS")), int(g.get("n", 4)), int(g.get("m", 8))


def cmd_gen(ctx: RunContext) -> int:
    mode, n, m = _gen_params(ctx)
    engine = ExperimentEngine(ctx.cfg, record=False)
    spec = engine.make_spec(mode, n, m, ctx.seed)
    dataset, net = generate_dataset(spec)
    audit = audit_assumptions(spec, net, seed=ctx.seed, strict=True)
    ss = ss_report(spec.support)
    if mode == "Base":
        # Base 는 SS 를 일부러 깨는 설정이라 실패로 보지 않는다
        ctx.log.info(f"[CLI] Base support: SS all_hold={ss.all_hold}, fraction={ss.fraction:.3f} (생성 계속)")
    ctx.log.info(f"[CLI] audit 통과: {audit.to_dict()}")

    name = ctx.args.name or "dataset"
    path = export_dataset(
        dataset,
        ctx.out / f"{name}.csv",
        extra={**ctx.stamp(), "audit": audit.to_dict(), "structural_sparsity": ss.to_dict()},
    )
    ctx.files += [path.name, path.with_name(path.stem + ".meta.json").name]
    ctx.manifest()
    _emit({"dataset": str(path), "mode": mode, "n": n, "m": m, "audit": audit.to_dict(), **ctx.stamp()})
    return 0


def _parse_inline_matrix(text: str) -> SupportMatrix:
    """'1,0;1,1;0,1' → 3×2 support (행은 ';', 원소는 ',' 구분)"""
    try:
        rows = [[int(v) for v in row.split(",")] for row in text.strip().split(";") if row.strip()]
    except ValueError as e:
        raise ValidationError(f"[CLI] matrix 형식 오류: {text!r}") from e
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValidationError(f"[CLI] matrix 행 길이가 일정해야 합니다: {text!r}")
    return SupportMatrix.from_dict({"m": len(rows), "n": len(rows[0]), "rows": rows})


def _support_from_args(args: argparse.Namespace) -> SupportMatrix:
    if args.matrix and args.file:
        raise ValidationError("[CLI] --matrix 와 --file 은 함께 쓸 수 없습니다")
    if args.matrix:
        return _parse_inline_matrix(args.matrix)
    if args.file:
        with open(args.file, "r", encoding="utf-8") as f:
            return SupportMatrix.from_json(f.read())
    raise ValidationError("[CLI] --matrix 또는 --file 이 필요합니다")


def cmd_check_support(ctx: RunContext) -> int:
    S = _support_from_args(ctx.args)
    report = ss_report(S)
    ctx.log.info(f"[CLI] support m={S.m}, n={S.n}: all_hold={report.all_hold}, fraction={report.fraction:.3f}")
    payload = {"support": S.to_dict(), **report.to_dict()}
    if ctx.args.out:
        ctx.json("ss_report.json", payload)
        ctx.manifest()
    _emit({**payload, **ctx.stamp()})
    return 0


def _train_config(ctx: RunContext) -> TrainConfig:
    tcfg = TrainConfig.from_dict(ctx.cfg.get("train"), flow=ctx.cfg.get("flow"))
    tcfg.seed = ctx.seed
    tcfg.dump_dir = str(ctx.out / "dumps")
    return tcfg


def cmd_train(ctx: RunContext) -> int:
    dataset = import_dataset(ctx.args.data)
    tcfg = _train_config(ctx)
    result = fit(tcfg, dataset)
    ckpt = save_checkpoint(
        result.model,
        result.prior,
        ctx.out / "model.json",
        extra={**ctx.stamp(), "train": tcfg.to_dict(), "dataset": str(ctx.args.data), "mode": dataset.spec.mode},
    )
    hist = history_to_csv(result.history, ctx.out / "history.csv")
    ctx.files += [ckpt.name, hist.name]
    ctx.manifest()
    final = result.history.loss[-1]
    ctx.log.info(f"[CLI] 학습 완료: epochs={tcfg.epochs}, final_loss={final:.4f}, checkpoint={ckpt}")
    _emit({"checkpoint": str(ckpt), "history": str(hist), "final_loss": final, **ctx.stamp()})
    return 0


def cmd_eval(ctx: RunContext) -> int:
    model, prior, extra = load_checkpoint(ctx.args.model)
    dataset = import_dataset(ctx.args.data)
    spec = dataset.spec
    if spec.m != model.m or spec.n != model.n:
        raise ValidationError(
            f"[CLI] dataset (m={spec.m}, n={spec.n}) 와 model (m={model.m}, n={model.n}) 크기가 다릅니다"
        )
    knots = int(get_path(ctx.cfg, "eval.spline_knots", 5))
    hidden = int(get_path(ctx.cfg, "eval.subspace_hidden", 32))
    report = evaluate_model(TrainResult(model=model, history=TrainHistory(), prior=prior), dataset, knots, hidden)
    kind = (extra.get("train") or {}).get("penalty", {}).get("kind", "flow")
    ctx.json("report.json", {"report": report.to_dict(), "dataset": str(ctx.args.data), "model": str(ctx.args.model)})
    ctx.csv("summary.csv", [report.summary_row(spec.mode, spec.seed, kind)], SUMMARY_HEADER)
    ctx.manifest()
    ctx.log.info(f"[CLI] 평가 완료: mcc={report.mcc:.4f}")
    _emit({"mcc": report.mcc, "permutation": list(report.permutation), **ctx.stamp()})
    return 0


def _trial_rows(results: list[dict], run_key: str) -> list[dict]:
    return [
        {
            "run": r[run_key],
            "seed": r["seed"],
            "model": f"flow-{r['penalty']}",
            "mcc": r["mcc"],
            "n": r["n"],
            "m": r["m"],
            "best_lambda": r["best_lambda"],
        }
        for r in results
    ]


def _median_rows(rows: list[dict]) -> list[dict]:
    grouped: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        grouped[(r["run"], r["n"])].append(float(r["mcc"]))
    return [
        {"run": run, "n": n, "trials": len(v), "median_mcc": statistics.median(v)}
        for (run, n), v in grouped.items()
    ]


def _reproduce_fig3(ctx: RunContext, trials: int, p: float) -> dict:
    rep = ctx.cfg.get("reproduce") or {}
    rows = ss_rate_table(rep.get("fig3_ratios", [1, 2, 3, 4]), rep.get("fig3_n", [5, 10, 15, 20]),
                         p=p, trials=trials, seed=ctx.seed, variant="all", workers=ctx.workers)
    ctx.csv("fig3.csv", rows, RATE_HEADER)
    return {"rows": len(rows)}


def _reproduce_fig4(ctx: RunContext, trials: int, p: float) -> dict:
    rows = []
    for n in (ctx.cfg.get("reproduce") or {}).get("fig4_n", [5, 10, 20]):
        n = int(n)
        per_source = ss_rate_monte_carlo(n, n, p, trials, ctx.seed, variant="per_source", workers=ctx.workers)
        all_sources = ss_rate_monte_carlo(n, n, p, trials, ctx.seed, variant="all", workers=ctx.workers)
        # 해석식은 p=0.5 전용
        analytic = float(ss_source_probability_analytic(n, n)) if p == 0.5 else None
        row = per_source.to_row(n, n, p)
        row.update({"analytic": analytic, "all_rate": all_sources.rate})
        ctx.log.info(f"[CLI] fig4 n={n}: per_source={per_source.rate:.4f}, analytic={analytic}, all={all_sources.rate:.4f}")
        rows.append(row)
    ctx.csv("fig4.csv", rows, FIG4_HEADER)
    return {"rows": len(rows)}


def _trial_tasks(ctx: RunContext, target: str) -> tuple[list[TrialTask], str]:
    rep = ctx.cfg.get("reproduce") or {}
    seeds = [ctx.seed + i for i in range(int(rep.get("ablation_seeds", 5)))]
    n_values = [int(n) for n in rep.get("ablation_n", [2, 4, 6])]
    if target == "ablation":
        modes = rep.get("ablation_modes", ["UCSS", "Mixed", "Base"])
        return [TrialTask(mode, n, 2 * n, s) for mode in modes for n in n_values for s in seeds], "mode"
    if target == "sources":
        return [TrialTask(mode, n, 2 * n, s) for mode in ("UCSS", "Mixed") for n in n_values for s in seeds], "mode"
    kinds = [str(k).upper() for k in rep.get("reg_kinds", list(PENALTY_KINDS))]
    return [TrialTask("UCSS", n, 2 * n, s, penalty_kind=k) for k in kinds for n in n_values for s in seeds], "penalty"


def _reproduce_trials(ctx: RunContext, target: str) -> dict:
    tasks, run_key = _trial_tasks(ctx, target)
    ctx.log.info(f"[CLI] {target}: trials={len(tasks)}, workers={ctx.workers}")
    engine = ExperimentEngine(ctx.cfg, out_dir=ctx.out)
    results = engine.run_trials(tasks, ctx.workers)
    rows = _trial_rows(results, run_key)
    medians = _median_rows(rows)
    ctx.csv(f"{target}.csv", rows, TRIAL_HEADER)
    ctx.csv(f"{target}_median.csv", medians, MEDIAN_HEADER)
    for r in medians:
        ctx.log.info(f"[CLI] {target} {r['run']} n={r['n']}: median mcc={r['median_mcc']:.4f} ({r['trials']} trials)")
    return {"rows": len(rows), "medians": medians}


def cmd_reproduce(ctx: RunContext) -> int:
    target = ctx.args.target
    sup = ctx.cfg.get("support") or {}
    trials = int(sup.get("reference_trials", 50)) if ctx.args.reference_trials else int(sup.get("trials", 10000))
    p = float(sup.get("density", 0.5))
    if target == "fig3":
        summary = _reproduce_fig3(ctx, trials, p)
    elif target == "fig4":
        summary = _reproduce_fig4(ctx, trials, p)
    else:
        summary = _reproduce_trials(ctx, target)
    ctx.manifest({"target": target, "trials": trials})
    _emit({"target": target, "out": str(ctx.out), "files": ctx.files, **summary, **ctx.stamp()})
    return 0


def cmd_oracle(ctx: RunContext) -> int:
    args = ctx.args
    ocfg = ctx.cfg.get("oracle") or {}
    n_values = [int(v) for v in (args.n or ocfg.get("scan_n", [2, 3]))]
    m_max = int(args.m_max or ocfg.get("scan_m_max", 5))

    scan = []
    for n in n_values:
        scan += exhaustive_lemma_scan(n, range(n, m_max + 1), workers=ctx.workers, seed=ctx.seed)
    ctx.csv("oracle_scan.csv", [r.to_row() for r in scan], SCAN_HEADER)
    violations = sum(len(r.violations) for r in scan)
    ctx.json("oracle_scan.json", {
        "rows": [{**r.to_row(), "lemma_without_ss": r.lemma_without_ss, "violating_supports": r.violations} for r in scan],
        "violations_total": violations,
    })
    summary: dict = {"scan_rows": len(scan), "violations_total": violations}

    if args.matrix or args.file:
        report = lemma_check(_support_from_args(args))
        ctx.json("lemma.json", report.to_dict())
        summary["lemma"] = {"ss_holds": report.ss_holds, "all_permutation_scalings": report.all_permutation_scalings}

    if args.linear_demo:
        demo_n, demo_m = int(args.demo_n), int(args.demo_m)
        A = random_ss_matrix(demo_m, demo_n, seed=ctx.seed)
        pcfg = PenaltyConfig.from_dict(get_path(ctx.cfg, "train.penalty"))
        demo = linear_recovery_demo(A, penalty=pcfg, seed=ctx.seed)
        ctx.json("linear_demo.json", {"A": A.tolist(), **demo.to_dict()})
        summary["linear_demo"] = {"off_dp_mass": demo.off_dp_mass, "best_lambda": demo.best_lambda}

    ctx.manifest(summary)
    _emit({**summary, "out": str(ctx.out), **ctx.stamp()})
    if violations:
        raise AuditError("support_lemma", f"SS 가 성립하는데 비순열 T 가 허용되는 support {violations}개")
    return 0


HANDLERS = {
    "gen": cmd_gen,
    "check-support": cmd_check_support,
    "train": cmd_train,
    "eval": cmd_eval,
    "reproduce": cmd_reproduce,
    "oracle": cmd_oracle,
}


# ----------------------------------------------------------------------
# argparse
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config 파일 (JSON/YAML), settings.yaml 위에 병합")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--fast", action="store_true", help="trial/epoch/sample 수만 축소")
    common.add_argument("--out", help="출력 디렉토리 (기본 results/<command>)")
    common.add_argument("--workers", type=int, default=1, help="프로세스 수 (0 이하 = CPU 수)")
    common.add_argument("--log-events", action="store_true", help="logs/events 에 JSONL 이벤트 기록")

    parser = argparse.ArgumentParser(prog="ica-lab", description="nonlinear ICA identifiability lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="합성 dataset 생성 + 가정 audit")
    p.add_argument("--mode", choices=("UCSS", "Mixed", "Grouped", "Base"))
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--name", help="파일 이름 (기본 dataset)")

    p = sub.add_parser("check-support", parents=[common], help="support 행렬의 Structural Sparsity 판정")
    p.add_argument("--matrix", help="inline 0/1 행렬, 예: '1,0;1,1;0,1'")
    p.add_argument("--file", help="support JSON 파일 {m, n, rows}")

    p = sub.add_parser("train", parents=[common], help="flow 학습")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--penalty", choices=PENALTY_KINDS)
    p.add_argument("--lambda", dest="lam", type=float)

    p = sub.add_parser("eval", parents=[common], help="checkpoint 평가 (MCC)")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)

    p = sub.add_parser("reproduce", parents=[common], help="실험 표(CSV) 재현")
    p.add_argument("target", choices=REPRODUCE_TARGETS)
    p.add_argument("--reference-trials", action="store_true", help="support 실험을 설정별 50개 행렬로")

    p = sub.add_parser("oracle", parents=[common], help="support 수준 lemma 전수 검사")
    p.add_argument("--n", type=int, nargs="+")
    p.add_argument("--m-max", type=int)
    p.add_argument("--matrix")
    p.add_argument("--file")
    p.add_argument("--linear-demo", action="store_true")
    p.add_argument("--demo-n", type=int, default=3)
    p.add_argument("--demo-m", type=int, default=5)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    """CLI 플래그 → config override (마지막에 병합)"""
    out: dict = {}
    if args.seed is not None:
        out["seed"] = int(args.seed)
    gen = {k: v for k, v in (
        ("mode", getattr(args, "mode", None)),
        ("n", getattr(args, "n", None) if args.command == "gen" else None),
        ("m", getattr(args, "m", None)),
        ("sample_count", getattr(args, "samples", None)),
    ) if v is not None}
    if gen:
        out["gen"] = gen
    train: dict = {}
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = int(args.epochs)
    penalty = {k: v for k, v in (("kind", getattr(args, "penalty", None)), ("lambda", getattr(args, "lam", None))) if v is not None}
    if penalty:
        train["penalty"] = penalty
    if train:
        out["train"] = train
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    set_run_event_logging(args.command.replace("-", "_"), bool(args.log_events))
    set_run_event_logging("train", bool(args.log_events))
    try:
        cfg = load_run_config(args.config, overrides=_overrides(args), fast=args.fast)
        cfg.setdefault("seed", 0)
        ctx = RunContext(args.command, args, cfg)
        ctx.log.info(f"[CLI] 시작: seed={ctx.seed}, config_hash={ctx.config_hash}, out={ctx.out}")
        return HANDLERS[args.command](ctx)
    except IcaLabError as e:
        logger.error(f"[CLI] {args.command} 실패 ({type(e).__name__}): {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"[CLI] {args.command} 파일 I/O 실패: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:
        logger.error(f"[CLI] {args.command} 중 예외: {e}")
        logger.error(traceback.format_exc())
        print(f"error: {e}", file=sys.stderr)
        return 1
