from dataclasses import dataclass
from pathlib import Path
from typing import Any

from src.engine.json_file import read_json_or, write_json_atomic

# index.json 한 줄에 남기는 최상위 필드
_INDEX_FIELDS = ("run_id", "command", "started_at", "finished_at", "status", "message", "seed", "config_hash")


@dataclass
class RunHistoryStore:
    """
    실험 실행 이력 저장소.
    - <out_dir>/runs/<run_id>.json : 실행 1회 상세
    - <out_dir>/runs/index.json    : 목록용 요약 (최신이 위)

    저장 단위: run_id 1개 = trial 1회 (gen → audit → fit → eval)
    """

    out_dir: str | Path
    max_entries: int = 2000  # 인덱스 무한 증가 방지

    def __post_init__(self):
        self.runs_dir = Path(self.out_dir) / "runs"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.index_path = self.runs_dir / "index.json"

    @staticmethod
    def _summary(item: dict[str, Any]) -> dict[str, Any]:
        row = {key: item.get(key) for key in _INDEX_FIELDS}
        result = item.get("result") or {}
        row["mode"] = result.get("mode")
        row["mcc"] = result.get("mcc")
        row["errors_count"] = len(item.get("errors") or [])
        return row

    def list(self, limit: int | None = None) -> list[dict[str, Any]]:
        rows = read_json_or(self.index_path, [])
        if not isinstance(rows, list):
            return []
        return rows if limit is None else rows[: int(limit)]

    def append(self, item: dict[str, Any]) -> None:
        run_id = str(item.get("run_id") or "").strip() if isinstance(item, dict) else ""
        if not run_id:
            return
        write_json_atomic(self.runs_dir / f"{run_id}.json", item, indent=2)
        rows = [self._summary(item), *self.list()][: int(self.max_entries)]
        write_json_atomic(self.index_path, rows, indent=2)

    def get(self, run_id: str) -> dict[str, Any] | None:
        run_id = (run_id or "").strip()
        if not run_id:
            return None
        doc = read_json_or(self.runs_dir / f"{run_id}.json", None)
        return doc if isinstance(doc, dict) else None
