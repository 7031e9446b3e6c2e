import json
import os
from pathlib import Path

import pytest

from bclsim.cli import main
from bclsim.config import (ExperimentConfig, atomic_write, load_config,
                           parse_config, resolve_datasets, serialize_config)

SMALL_TOML = """\
schema_version = 1

[experiment]
name = "unit"
out_dir = "%OUT%"

[dataset]
source = "synthetic"
n_train = 400
n_test = 120

[federation]
n_clients = 8
select_fraction = 0.5
local_epochs = 1
batch_size = 32
rounds = 2
malicious_fraction = 0.25
lr = 0.1
q = 0.5
arch_id = "mlp-small"

[defense]
rule = "multikrum"
f = 1
m_select = 3

[attack]
method = "badnets"
"""


def write_cfg(tmp_path, text=None):
    out = tmp_path / "out"
    cfg_path = tmp_path / "cfg.toml"
    cfg_path.write_text((text or SMALL_TOML).replace("%OUT%", str(out)))
    return cfg_path, out


def test_config_roundtrip_identity(tmp_path):
    cfg_path, _ = write_cfg(tmp_path)
    cfg = load_config(cfg_path)
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_config_rejects_wrong_schema():
    with pytest.raises(ValueError):
        parse_config("schema_version = 99\n")


def test_config_lambda_alias(tmp_path):
    text = SMALL_TOML.replace('method = "badnets"',
                              'method = "lp"\nlambda = 0.75')
    cfg_path, _ = write_cfg(tmp_path, text)
    cfg = load_config(cfg_path)
    assert cfg.fl.attack.lam == 0.75
    assert "lambda = 0.75" in serialize_config(cfg)


def test_config_sweep_validation(tmp_path):
    text = SMALL_TOML + '\n[sweep]\naxis = "tau"\nvalues = [2.0]\n'
    cfg_path, _ = write_cfg(tmp_path, text)
    with pytest.raises(ValueError):
        load_config(cfg_path)


def test_resolve_synthetic_subset(tmp_path):
    cfg_path, _ = write_cfg(tmp_path)
    cfg = load_config(cfg_path)
    train, test = resolve_datasets(cfg.dataset)
    assert len(train) == 400 and len(test) == 120


def test_run_byte_identical_summaries(tmp_path):
    cfg_path, out = write_cfg(tmp_path)
    assert main(["run", "--config", str(cfg_path), "--seed", "7",
                 "--out", str(out / "a"), "--quiet"]) == 0
    assert main(["run", "--config", str(cfg_path), "--seed", "7",
                 "--out", str(out / "b"), "--quiet"]) == 0
    a = (out / "a" / "summary.json").read_bytes()
    b = (out / "b" / "summary.json").read_bytes()
    assert a == b
    rounds = (out / "a" / "rounds.csv").read_text().splitlines()
    assert rounds[0].startswith("round,acc,bsr,n_selected,n_malicious,"
                                "n_accepted_benign,n_accepted_malicious")
    assert len(rounds) == 3  # header + 2 rounds


def test_run_seed_changes_results(tmp_path):
    cfg_path, out = write_cfg(tmp_path)
    main(["run", "--config", str(cfg_path), "--seed", "1",
          "--out", str(out / "s1"), "--quiet"])
    main(["run", "--config", str(cfg_path), "--seed", "2",
          "--out", str(out / "s2"), "--quiet"])
    a = json.loads((out / "s1" / "summary.json").read_text())
    b = json.loads((out / "s2" / "summary.json").read_text())
    assert a["seed"] != b["seed"]


def test_cli_missing_config_reports_error(tmp_path, capsys):
    rc = main(["run", "--config", str(tmp_path / "nope.toml")])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_cli_lsa_writes_report(tmp_path):
    text = SMALL_TOML.replace('method = "badnets"',
                              'method = "lp"\nclean_epochs = 2\npoison_epochs = 2')
    cfg_path, out = write_cfg(tmp_path, text)
    rc = main(["lsa", "--config", str(cfg_path), "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "bc_report.json").read_text())
    assert set(report) >= {"ranking", "selected", "tau", "bsr_malicious"}


def test_cli_sweep_cardinality(tmp_path):
    cfg_path, out = write_cfg(tmp_path)
    rc = main(["sweep", "--config", str(cfg_path), "--axis", "q",
               "--values", "0.1,0.5,0.9", "--out", str(out)])
    assert rc == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert len(rows) == 4  # header + 3 points
    assert len(list(out.rglob("summary.json"))) == 3


def test_cli_report_merges(tmp_path):
    cfg_path, out = write_cfg(tmp_path)
    main(["run", "--config", str(cfg_path), "--seed", "1",
          "--out", str(out / "r1"), "--quiet"])
    main(["run", "--config", str(cfg_path), "--seed", "2",
          "--out", str(out / "r2"), "--quiet"])
    rc = main(["report", "--inputs", str(out),
               "--out", str(tmp_path / "matrix.csv")])
    assert rc == 0
    rows = (tmp_path / "matrix.csv").read_text().splitlines()
    assert rows[0].startswith("attack,defense,runs")
    assert rows[1].startswith("badnets,multikrum,2")


def test_atomic_write_leaves_no_temp(tmp_path):
    target = tmp_path / "file.json"
    atomic_write(target, "{}")
    assert target.read_text() == "{}"
    assert list(tmp_path.glob("*.tmp")) == []


def test_dataset_dir_env_fallback(tmp_path, monkeypatch):
    text = SMALL_TOML.replace('source = "synthetic"', 'source = "idx"')
    cfg_path, _ = write_cfg(tmp_path, text)
    cfg = load_config(cfg_path)
    monkeypatch.setenv("BCLSIM_DATA_DIR", str(tmp_path / "missing"))
    with pytest.raises(FileNotFoundError):
        resolve_datasets(cfg.dataset)
