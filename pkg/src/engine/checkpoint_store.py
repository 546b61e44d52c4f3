import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from src.engine.json_file import write_json_atomic
from src.utils.errors import CheckpointFormatError


@dataclass
class CheckpointStore:
    """
    버전 헤더가 붙은 JSON 파일 저장소 (flow checkpoint, divergence state dump).
    - {"format": <fmt>, "version": <ver>, ...payload}
    - tmp 로 쓴 뒤 replace → 읽는 쪽은 항상 완성된 파일만 본다
    """

    fmt: str
    version: int = 1

    def save(self, path: str | Path, payload: dict[str, Any]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"format": self.fmt, "version": int(self.version)}
        doc.update(payload)
        return write_json_atomic(path, doc)

    def load(self, path: str | Path) -> dict[str, Any]:
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except FileNotFoundError as e:
            raise CheckpointFormatError(f"checkpoint 파일이 없습니다: {path}") from e
        except json.JSONDecodeError as e:
            raise CheckpointFormatError(f"checkpoint 파싱 실패: {path}: {e}") from e
        if not isinstance(doc, dict):
            raise CheckpointFormatError(f"checkpoint 최상위는 객체여야 합니다: {path}")
        if doc.get("format") != self.fmt:
            raise CheckpointFormatError(f"checkpoint format 불일치: {doc.get('format')!r} != {self.fmt!r}")
        if doc.get("version") != self.version:
            raise CheckpointFormatError(f"지원하지 않는 checkpoint version: {doc.get('version')!r}")
        return doc
