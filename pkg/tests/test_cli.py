import json

import pandas as pd
import pytest
import yaml

from src.cli.app import FIG4_HEADER, TRIAL_HEADER, build_parser, main
from src.metrics.evaluation import SUMMARY_HEADER
from src.structure.identifiability_oracle import SCAN_HEADER
from src.structure.support_analysis import RATE_HEADER


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        yaml.safe_dump(
            {
                "flow": {"layers": 4, "width": 8},
                "train": {"epochs": 2, "batch_size": 100},
                "reproduce": {"fig3_n": [5], "fig3_ratios": [1, 4], "fig4_n": [5]},
                "fast": {"reproduce": {"fig3_n": [5]}},
            }
        ),
        encoding="utf-8",
    )
    return str(path)


def _stdout_json(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


def _gen(tmp_path, small_config, n=2, m=4, name="dataset"):
    out = tmp_path / "data"
    code = main([
        "gen", "--mode", "UCSS", "--n", str(n), "--m", str(m), "--samples", "200",
        "--seed", "5", "--config", small_config, "--out", str(out), "--name", name,
    ])
    assert code == 0
    return out / f"{name}.csv"


def test_check_support_inline(capsys, tmp_path):
    assert main(["check-support", "--matrix", "1,0;1,1;0,1", "--out", str(tmp_path)]) == 0
    doc = _stdout_json(capsys)
    assert doc["all_hold"] is True
    assert doc["support"]["rows"] == [[1, 0], [1, 1], [0, 1]]
    saved = json.loads((tmp_path / "ss_report.json").read_text(encoding="utf-8"))
    assert saved["fraction"] == 1.0
    assert "config_hash" in saved
    manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["files"] == ["ss_report.json"]


def test_check_support_from_file(capsys, tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"m": 2, "n": 2, "rows": [[1, 1], [1, 1]]}), encoding="utf-8")
    assert main(["check-support", "--file", str(path)]) == 0
    assert _stdout_json(capsys)["all_hold"] is False


@pytest.mark.parametrize(
    "argv, code",
    [
        (["check-support"], 2),
        (["check-support", "--matrix", "1,x;0,1"], 2),
        (["check-support", "--matrix", "1,0;1"], 2),
        (["check-support", "--matrix", "1,0", "--file", "s.json"], 2),
        (["check-support", "--file", "/nonexistent/support.json"], 4),
    ],
)
def test_check_support_errors(argv, code, capsys):
    assert main(argv) == code
    assert "error:" in capsys.readouterr().err


def test_gen_writes_dataset_and_manifest(tmp_path, small_config, capsys):
    path = _gen(tmp_path, small_config)
    doc = _stdout_json(capsys)
    assert doc["seed"] == 5 and doc["n"] == 2 and doc["m"] == 4
    assert doc["audit"]["passed"]
    frame = pd.read_csv(path)
    assert len(frame) == 200
    meta = json.loads(path.with_name("dataset.meta.json").read_text(encoding="utf-8"))
    assert meta["config_hash"] == doc["config_hash"]
    assert meta["structural_sparsity"]["all_hold"]
    manifest = json.loads((path.parent / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["seed"] == 5
    assert manifest["config"]["gen"]["sample_count"] == 200


def test_train_then_eval_is_reproducible(tmp_path, small_config, capsys):
    data = _gen(tmp_path, small_config)
    capsys.readouterr()
    model_dir = tmp_path / "model"
    assert main(["train", "--data", str(data), "--config", small_config, "--seed", "1", "--out", str(model_dir)]) == 0
    trained = _stdout_json(capsys)
    history = pd.read_csv(trained["history"])
    assert len(history) == 2

    scores = []
    for k in range(2):
        out = tmp_path / f"eval{k}"
        assert main(["eval", "--data", str(data), "--model", trained["checkpoint"], "--out", str(out)]) == 0
        scores.append(_stdout_json(capsys)["mcc"])
        summary = pd.read_csv(out / "summary.csv")
        assert list(summary.columns) == SUMMARY_HEADER
        assert summary.loc[0, "model"] == "MCP"
    assert scores[0] == scores[1]
    assert 0.0 <= scores[0] <= 1.0


def test_eval_rejects_mismatched_dataset(tmp_path, small_config, capsys):
    data = _gen(tmp_path, small_config)
    other = _gen(tmp_path, small_config, n=3, m=4, name="other")
    model_dir = tmp_path / "model"
    assert main(["train", "--data", str(data), "--config", small_config, "--out", str(model_dir)]) == 0
    capsys.readouterr()
    assert main(["eval", "--data", str(other), "--model", str(model_dir / "model.json")]) == 2


def test_eval_missing_files_exit_io(tmp_path, small_config):
    data = _gen(tmp_path, small_config)
    assert main(["eval", "--data", str(data), "--model", str(tmp_path / "nope.json")]) == 4
    assert main(["train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "t")]) == 4


def test_oracle_quick_scan(tmp_path, capsys):
    code = main(["oracle", "--n", "2", "--m-max", "3", "--matrix", "1,0;1,1;0,1", "--out", str(tmp_path)])
    assert code == 0
    doc = _stdout_json(capsys)
    assert doc["violations_total"] == 0
    assert doc["lemma"] == {"ss_holds": True, "all_permutation_scalings": True}
    scan = pd.read_csv(tmp_path / "oracle_scan.csv")
    assert list(scan.columns) == SCAN_HEADER
    assert scan["m"].tolist() == [2, 3]


def test_reproduce_fig3_fast(tmp_path, small_config, capsys):
    code = main(["reproduce", "fig3", "--fast", "--reference-trials", "--config", small_config, "--out", str(tmp_path)])
    assert code == 0
    doc = _stdout_json(capsys)
    assert doc["rows"] == 2
    frame = pd.read_csv(tmp_path / "fig3.csv")
    assert list(frame.columns) == RATE_HEADER
    assert frame["trials"].tolist() == [50, 50]
    assert frame["ratio"].tolist() == [1, 4]
    manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["trials"] == 50 and manifest["target"] == "fig3"


def test_reproduce_fig4_reports_analytic_column(tmp_path, small_config, capsys):
    assert main(["reproduce", "fig4", "--reference-trials", "--config", small_config, "--out", str(tmp_path)]) == 0
    frame = pd.read_csv(tmp_path / "fig4.csv")
    assert list(frame.columns) == FIG4_HEADER
    assert frame.loc[0, "n"] == 5
    assert 0.0 < frame.loc[0, "analytic"] < 1.0
    assert frame.loc[0, "all_rate"] <= frame.loc[0, "rate"]


def test_parser_rejects_unknown_target():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["reproduce", "fig9"])


def test_reproduce_reg_sweeps_source_counts(tmp_path, capsys):
    path = tmp_path / "reg.yaml"
    path.write_text(
        yaml.safe_dump(
            {
                "gen": {"sample_count": 200},
                "flow": {"layers": 2, "width": 8},
                "train": {"epochs": 1, "batch_size": 100, "lambda_sweep": [0.01]},
                "reproduce": {"ablation_n": [2, 3], "ablation_seeds": 1, "reg_kinds": ["l1", "MCP"]},
            }
        ),
        encoding="utf-8",
    )
    assert main(["reproduce", "reg", "--config", str(path), "--out", str(tmp_path / "out")]) == 0
    assert _stdout_json(capsys)["rows"] == 4
    trials = pd.read_csv(tmp_path / "out" / "reg.csv")
    assert list(trials.columns) == TRIAL_HEADER
    assert (trials["m"] == 2 * trials["n"]).all()
    medians = pd.read_csv(tmp_path / "out" / "reg_median.csv")
    assert list(zip(medians["run"], medians["n"])) == [("L1", 2), ("L1", 3), ("MCP", 2), ("MCP", 3)]
