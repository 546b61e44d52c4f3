"""
ica-lab 공통 예외.

- 라이브러리 코드는 예외만 던지고, 종료코드 매핑은 CLI(src/cli/app.py)가 담당한다.
- exit_code: 0 성공 / 2 검증·가정 위반 / 3 수치 발산 / 4 입출력
"""


class IcaLabError(Exception):
    exit_code = 1


class ValidationError(IcaLabError, ValueError):
    """파라미터/형상/범위/열거 한도 위반"""

    exit_code = 2


class AuditError(IcaLabError):
    """생성 가정(assumption) 검증 실패. assumption 에 실패한 가정 이름을 담는다."""

    exit_code = 2

    def __init__(self, assumption: str, detail: str = ""):
        self.assumption = assumption
        msg = f"assumption failed: {assumption}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DivergenceError(IcaLabError):
    """학습 중 loss/gradient 가 유한하지 않음"""

    exit_code = 3

    def __init__(self, message: str, epoch: int | None = None, dump_path: str | None = None):
        self.epoch = epoch
        self.dump_path = dump_path
        if epoch is not None:
            message = f"{message} (epoch={epoch})"
        if dump_path:
            message = f"{message} state_dump={dump_path}"
        super().__init__(message)


class DomainError(IcaLabError, ArithmeticError):
    """autodiff primitive 정의역 위반(log<=0, 0으로 나눔, 비유한 결과)"""

    exit_code = 3


class DatasetFormatError(IcaLabError):
    exit_code = 4


class CheckpointFormatError(IcaLabError):
    exit_code = 4
