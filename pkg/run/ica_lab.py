import sys
import os
import multiprocessing

# 프로젝트 루트 경로를 sys.path에 추가
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(PROJECT_ROOT)

from src.cli.app import main
from src.utils.logger import logger

if __name__ == "__main__":
    # Windows spawn 에서 worker 재실행 방지
    multiprocessing.freeze_support()
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("=== ica-lab 중단 (KeyboardInterrupt) ===")
        sys.exit(130)
