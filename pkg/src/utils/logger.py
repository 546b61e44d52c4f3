import json
import logging
import os
import sys
from datetime import datetime

_RUN_LOGGERS: dict[str, logging.Logger] = {}
_EVENT_SWITCHES: dict[str, bool] = {}

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
LOG_FORMAT = "[%(asctime)s] [%(levelname)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def get_log_dir() -> str:
    """로그 루트 디렉토리 (ICA_LAB_LOG_DIR 환경변수 우선, 없으면 <project>/logs)"""
    return os.environ.get("ICA_LAB_LOG_DIR") or os.path.join(PROJECT_ROOT, "logs")


def _daily_file(directory: str, stem: str, suffix: str = "log") -> str:
    os.makedirs(directory, exist_ok=True)
    return os.path.join(directory, f"{stem}_{datetime.now():%Y%m%d}.{suffix}")


def _command_key(command: str | None) -> str:
    return (command or "unknown").strip().lower()


def setup_logger(name=None, log_file: str | None = None):
    """로거 설정 및 반환

    - log_file 지정 시 해당 파일로 기록
    - 미지정 시 logs/ica_lab_YYYYMMDD.log
    - 콘솔 출력은 stderr (stdout 은 CSV/JSON 결과 출력 전용)
    """
    lg = logging.getLogger(name or "icaLab")
    lg.setLevel(logging.INFO)
    # 계층 이름(icaLab.train 등)이 상위로 propagate 되면 중복 출력됨
    lg.propagate = False
    if lg.handlers:
        return lg

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    target = log_file or _daily_file(get_log_dir(), "ica_lab")
    for handler in (logging.FileHandler(target, encoding="utf-8"), logging.StreamHandler(sys.stderr)):
        handler.setFormatter(formatter)
        lg.addHandler(handler)
    return lg


class _TaggedAdapter(logging.LoggerAdapter):
    """메시지 앞에 [COMMAND][SOURCE] 태그를 붙인다."""

    def process(self, msg, kwargs):
        return f"{self.extra['tag']} {msg}", kwargs


def get_run_logger(command: str, source: str | None = None):
    """
    커맨드(gen/train/eval/...)별 로그 파일 분리용 로거
    - logs/<command>/ica_lab_YYYYMMDD.log
    - source 지정 시 [COMMAND][SOURCE] 접두어
    """
    key = _command_key(command)
    base = _RUN_LOGGERS.get(key)
    if base is None:
        log_file = _daily_file(os.path.join(get_log_dir(), key), "ica_lab")
        base = setup_logger(name=f"icaLab.{key}", log_file=log_file)
        _RUN_LOGGERS[key] = base
    if not source:
        return base
    return _TaggedAdapter(base, {"tag": f"[{key.upper()}][{source.upper()}]"})


# 기본 로거 인스턴스
logger = setup_logger()


def log_run_event(command: str, payload: dict):
    """
    실행 이벤트(epoch 요약, audit 결과 등) JSON lines 기록.
    - logs/events/<command>_YYYYMMDD.jsonl
    """
    key = _command_key(command)
    if not _EVENT_SWITCHES.get(key, False):
        return
    try:
        path = _daily_file(os.path.join(get_log_dir(), "events"), key, "jsonl")
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(payload or {}, ensure_ascii=False, default=str) + "\n")
    except OSError:
        # 이벤트 로깅 실패는 실행 실패로 간주하지 않음
        pass


def set_run_event_logging(command: str, enabled: bool) -> None:
    """커맨드별 이벤트 로깅 on/off"""
    _EVENT_SWITCHES[_command_key(command)] = bool(enabled)
