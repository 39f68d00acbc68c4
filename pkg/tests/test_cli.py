import json

import pandas as pd
import pytest

from ctphish.cli import run
from ctphish.pipeline import read_results

from conftest import LE_ISSUER, labeled_dataset, simple_der

FEED = b"https://paypal-login001.ga/signin\nhttps://apple-id.tk/\n"


@pytest.fixture
def cli(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    config = tmp_path / "ctphish.yaml"
    config.write_text(f"store:\n  root: {tmp_path / 'store'}\nlogging:\n  level: WARNING\n")

    def invoke(*argv):
        code = run(["--config", str(config), *argv])
        return code, capsys.readouterr().out

    return invoke


@pytest.fixture
def dataset_file(tmp_path):
    return str(labeled_dataset(20).save(tmp_path / "dataset.jsonl"))


@pytest.mark.parametrize("argv", [
    [],
    ["classify", "--model", "rules"],
    ["classify", "--model", "rules", "--live", "--from", "2020-05-01"],
    ["classify", "--model", "rules", "--from", "2020-05-01"],
    ["classify", "--model", "rules", "--from", "yesterday"],
    ["evaluate"],
    ["evaluate", "--dataset", "dataset.jsonl"],
    ["ingest-feeds", "--file", "feed.txt"],
    ["train", "--dataset", "dataset.jsonl", "--validation-split", "1.5"],
    ["build-dataset", "--log-url", "argon"],
])
def test_usage_errors_exit_2(cli, argv):
    assert cli(*argv)[0] == 2


def test_config_errors_exit_1(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus:\n  key: 1\n")
    assert run(["--config", str(bad), "evaluate"]) == 1


def test_operational_errors_exit_1(cli, tmp_path):
    assert cli("train", "--dataset", str(tmp_path / "missing.jsonl"))[0] == 1
    assert cli("classify", "--model", str(tmp_path / "missing.json"), "--live")[0] == 1


def test_train_with_validation(cli, dataset_file, tmp_path):
    model_path = tmp_path / "model.json"
    code, out = cli("train", "--dataset", dataset_file, "--trees", "5", "--validation-split", "0.25",
                    "--roc-dir", str(tmp_path / "roc"), "--out", str(model_path))

    assert code == 0
    summary = json.loads(out)
    assert summary["classifier"] == "RF_all_max"
    assert summary["manifest"]["n_trees"] == 5
    assert summary["validation"]["certificates"] == 10
    assert sorted(summary["validation"]["thresholds"]) == [f"RF_all_{m}" for m in ("avg", "max", "med", "min")]
    assert len(list((tmp_path / "roc").glob("*.csv"))) == 4
    assert model_path.exists()

    code, out = cli("evaluate", "--model", str(model_path), "--dataset", dataset_file, "--target", "0.1")
    assert code == 0
    assert set(json.loads(out)["thresholds"]["RF_all_max"]) == {"0.1"}


def test_select_features(cli, dataset_file, tmp_path):
    model_path = tmp_path / "model.json"
    assert cli("train", "--dataset", dataset_file, "--trees", "5", "--out", str(model_path))[0] == 0

    code, out = cli("select-features", "--model", str(model_path), "--k", "5",
                    "--out", str(tmp_path / "mdi.csv"), "--preset", str(tmp_path / "preset.txt"))

    assert code == 0
    selected = json.loads(out)["selected"]
    assert len(selected) == 5
    assert (tmp_path / "preset.txt").read_text().split() == selected
    assert not any(name.startswith("kw_") for name in selected)


def test_export_features(cli, tmp_path):
    path = labeled_dataset(5).save(tmp_path / "small.jsonl")
    code, out = cli("export-features", "--dataset", str(path), "--out", str(tmp_path / "features.csv"))

    assert code == 0
    # benign certificates carry two domains each, phishing ones a single domain
    frame = pd.read_csv(tmp_path / "features.csv")
    assert len(frame) == json.loads(out)["rows"] == 15


def test_ingest_file(cli, tmp_path):
    (tmp_path / "feed.txt").write_bytes(FEED)
    code, out = cli("ingest-feeds", "--source", "openphish", "--file", "feed.txt")
    assert code == 0
    assert json.loads(out)["added"] == 2
    # ingesting the same feed again adds nothing
    assert json.loads(cli("ingest-feeds", "--source", "openphish", "--file", "feed.txt")[1])["added"] == 0


def test_classify_verify_report(cli, ct_server, tmp_path):
    ders = [simple_der(f"shop{i}.example.com", serial=i + 1) for i in range(10)]
    ders += [simple_der(f"paypal-login{i:03d}.ga", serial=100 + i, issuer=LE_ISSUER) for i in range(3)]
    server = ct_server({"argon": ders})
    results = tmp_path / "results.jsonl"

    code, out = cli("classify", "--model", "rules", "--log-url", f"argon={server.base_url('argon')}",
                    "--from", "2020-05-01T00:00:00Z", "--to", "2020-05-02T00:00:00Z", "--out", str(results))
    assert code == 0
    assert json.loads(out)["stats"]["positives"] == 3
    assert len(read_results(results)) == 13

    (tmp_path / "feed.txt").write_bytes(FEED)
    assert cli("ingest-feeds", "--source", "openphish", "--file", "feed.txt")[0] == 0
    code, out = cli("verify", "--results", str(results))
    assert code == 0
    assert json.loads(out) == {"results": str(results), "positives": 3, "confirmed": 1}

    code, out = cli("report", "--results", f"rules={results}", "--target", "0.1")
    assert code == 0
    assert "rules" in out and "#TP @ FPR 0.1" in out
