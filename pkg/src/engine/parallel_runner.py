"""
Monte Carlo 블록 / oracle 스캔 / 재현 seed 를 여러 프로세스로 나눠 돌리기 위한 러너.

- workers <= 1 이면 현재 프로세스에서 순차 실행
- workers > 1 이면 multiprocessing Pool 로 분배
- 결과 순서는 항상 tasks 순서와 같다 (병합 결과가 worker 수와 무관)
"""

import multiprocessing
import os
import time
from typing import Any, Callable, Iterable

from src.utils.logger import logger


def resolve_workers(workers: int | None) -> int:
    try:
        w = 1 if workers is None else int(workers)
    except Exception:
        w = 1
    if w <= 0:
        # 0 이하 → CPU 수
        w = os.cpu_count() or 1
    return w


class ParallelRunner:
    def __init__(self, workers: int | None = 1, name: str = "icaLabWorker"):
        self.workers = resolve_workers(workers)
        self.name = name

    def map(self, fn: Callable[[Any], Any], tasks: Iterable[Any]) -> list[Any]:
        """fn 은 picklable(모듈 최상위 함수)이어야 한다."""
        tasks = list(tasks)
        if not tasks:
            return []
        started = time.time()
        if self.workers <= 1 or len(tasks) == 1:
            out = [fn(t) for t in tasks]
        else:
            procs = min(self.workers, len(tasks))
            with multiprocessing.Pool(processes=procs) as pool:
                # chunksize=1: 블록 크기가 고르지 않아도 분배가 균등
                out = pool.map(fn, tasks, chunksize=1)
        elapsed = time.time() - started
        if elapsed > 5.0:
            logger.info(f"[Parallel] {self.name}: tasks={len(tasks)}, workers={self.workers}, elapsed={elapsed:.1f}s")
        return out


def run_tasks(fn: Callable[[Any], Any], tasks: Iterable[Any], workers: int | None = 1) -> list[Any]:
    return ParallelRunner(workers).map(fn, tasks)
