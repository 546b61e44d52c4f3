import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any

import yaml

from src.utils.errors import ValidationError
from src.utils.logger import logger


def _default_settings() -> dict:
    # epochs, λ sweep 등 실험 기본값. fast 섹션은 횟수만 줄인다
    return {
        'support': {
            # 무작위 support 밀도 (각 원소 Bernoulli(p))
            'density': 0.5,
            'trials': 10000,
            # --reference-trials: 설정별 50개 행렬
            'reference_trials': 50,
            'trial_block': 512,
            'exhaustive_max_cells': 20,
        },
        'gen': {
            'mode': 'UCSS',
            'n': 4,
            'm': 8,
            'sample_count': 2000,
            'density': 0.5,
            'group_size': 2,
            'mean_scale': 1.0,
            'noise_std': 0.0,
            'mixing': {
                'width': 16,
                'depth': 2,
                'activation': 'tanh',
                'tau': 1.0e-4,
                'retries': 20,
                'probe_count': 10,
                'fd_step': 1.0e-4,
            },
        },
        'flow': {
            'layers': 10,
            'width': 32,
            'hidden_layers': 1,
            'volume_preserving': True,
            'scale_clamp': 2.0,
        },
        'train': {
            'learning_rate': 0.01,
            'batch_size': 200,
            'epochs': 60,
            'beta1': 0.9,
            'beta2': 0.999,
            'eps': 1.0e-8,
            'penalty_points': 32,
            'warmup_epochs': 0,
            'penalty': {
                'kind': 'MCP',
                'lambda': 0.01,
                'gamma': 2.0,
            },
            'lambda_sweep': [0.001, 0.01, 0.1],
        },
        'eval': {
            'spline_knots': 5,
            'regressor': 'spline',
            'subspace_hidden': 32,
        },
        'oracle': {
            'lemma_max_n': 4,
            'lemma_max_m': 6,
            'scan_n': [2, 3],
            'scan_m_max': 5,
        },
        'reproduce': {
            'fig3_ratios': [1, 2, 3, 4],
            'fig3_n': [5, 10, 15, 20],
            'fig4_n': [5, 10, 20],
            'ablation_n': [2, 4, 6],
            'ablation_seeds': 5,
            'ablation_modes': ['UCSS', 'Mixed', 'Base'],
            'reg_kinds': ['L1', 'SCAD', 'MCP'],
        },
        # --fast: 횟수(trials/epochs/samples)만 줄이고 코드 경로는 동일
        'fast': {
            'support': {'trials': 2000},
            'gen': {'sample_count': 600},
            'train': {'epochs': 8, 'lambda_sweep': [0.01]},
            'reproduce': {'ablation_n': [2], 'ablation_seeds': 2, 'fig3_n': [5, 10]},
        },
        'logging': {
            'run_events': False,
        },
    }


def deep_merge(base: dict, override: dict | None) -> dict:
    """override 를 base 위에 재귀 병합한 새 dict 반환"""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_hash(cfg: dict) -> str:
    """병합된 설정의 정규화 JSON SHA-256 (앞 16자리)"""
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class ConfigManager:
    _instance = None
    _config = None

    PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    CONFIG_FILE = os.path.join(PROJECT_ROOT, 'config', 'settings.yaml')

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(ConfigManager, cls).__new__(cls)
            cls._instance._initialize()
        return cls._instance

    def _initialize(self):
        """설정 초기화 및 로드"""
        if not os.path.exists(self.CONFIG_FILE):
            logger.info(f"[Config] settings.yaml 파일이 없습니다. 기본 설정을 생성합니다.")
            self._create_default_config()

        self.load_config()

    def _create_default_config(self):
        """기본 설정 파일 생성"""
        path = self.save_config(_default_settings())
        logger.info(f"[Config] {path} 생성 완료.")

    def load_config(self):
        """설정 파일 로드 (파일에 없는 키는 기본값으로 채움)"""
        try:
            with open(self.CONFIG_FILE, 'r', encoding='utf-8') as f:
                loaded = yaml.safe_load(f) or {}
        except Exception as e:
            logger.error(f"[Config] 설정 로드 실패: {e}")
            loaded = {}
        self._config = deep_merge(_default_settings(), loaded)

    def save_config(self, config: dict | None = None) -> Path:
        """설정을 YAML 로 저장 (tmp 에 쓴 뒤 replace). config 미지정 시 현재 설정"""
        path = Path(self.CONFIG_FILE)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        text = yaml.safe_dump(config if config is not None else (self._config or {}), allow_unicode=True, sort_keys=False)
        try:
            tmp.write_text(text, encoding="utf-8")
            tmp.replace(path)
        except OSError as e:
            tmp.unlink(missing_ok=True)
            logger.error(f"[Config] 설정 저장 실패: {path}: {e}")
            raise
        return path

    def get(self, key, default=None):
        """설정값 조회 (key1.key2 형식 지원)"""
        return get_path(self._config or {}, key, default)

    def snapshot(self) -> dict:
        return copy.deepcopy(self._config or {})


def load_run_config(path: str | None = None, overrides: dict | None = None, fast: bool = False) -> dict:
    """
    실행 설정 로드.
    - settings.yaml 기본값 위에 run config 파일(JSON/YAML) 병합
    - fast=True 면 'fast' 섹션 병합 (횟수만 축소)
    - overrides(CLI 플래그)는 마지막에 병합
    """
    cfg = config_manager.snapshot()
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                # JSON 은 YAML 의 부분집합이라 safe_load 로 함께 처리
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ValidationError(f"config 파싱 실패: {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ValidationError(f"config 최상위는 객체여야 합니다: {path}")
        cfg = deep_merge(cfg, loaded)
    if fast:
        cfg = deep_merge(cfg, cfg.get("fast") or {})
    cfg = deep_merge(cfg, overrides or {})
    return cfg


def get_path(cfg: dict, key: str, default: Any = None) -> Any:
    """병합된 run config dict 에서 dotted key 조회"""
    value: Any = cfg
    try:
        for k in key.split("."):
            value = value[k]
        return value
    except (KeyError, TypeError):
        return default


# 전역 인스턴스
config_manager = ConfigManager()
