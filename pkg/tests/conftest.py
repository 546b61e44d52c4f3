import json
import os
import sys
import tempfile
from pathlib import Path

import pytest

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, PROJECT_ROOT)

# src.utils.logger 가 import 시점에 로그 파일을 열기 때문에 import 전에 지정
os.environ.setdefault("ICA_LAB_LOG_DIR", tempfile.mkdtemp(prefix="ica_lab_test_logs_"))

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def golden():
    def _load(name: str) -> dict:
        with open(DATA_DIR / name, "r", encoding="utf-8") as f:
            return json.load(f)
    return _load


@pytest.fixture
def small_flow_cfg():
    from src.model.flow_estimator import FlowConfig

    return FlowConfig(layers=4, width=8, hidden_layers=1, volume_preserving=True)


@pytest.fixture
def ucss_dataset():
    """n=2, m=4 UCSS toy dataset (300 samples)"""
    from src.data.synthetic_data import generate_dataset, make_gen_spec

    spec = make_gen_spec("UCSS", n=2, m=4, sample_count=300, seed=3)
    dataset, net = generate_dataset(spec)
    return dataset, net
