import json

import numpy as np
import pytest

from rladlab.cli import dispatch


def test_help_exits_zero(capsys):
    assert dispatch(["--help"]) == 0
    assert "toydata" in capsys.readouterr().out


def test_unknown_subcommand_exits_two(capsys):
    assert dispatch(["frobnicate"]) == 2


def test_unknown_flag_exits_two(capsys):
    assert dispatch(["toydata", "--frobnicate", "1"]) == 2


def test_toydata_and_provenance(tmp_path, capsys):
    out = tmp_path / "ds"
    code = dispatch(["toydata", "--n", "6", "--seed", "3", "--out", str(out), "--domain", "source", "--canvas", "64"])
    assert code == 0
    assert (out / "manifest.json").exists()
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["resolved_config"]["n"] == 6


def test_config_file_with_flag_override(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"n": 4, "seed": 9}))
    out = tmp_path / "ds"
    code = dispatch(["toydata", "--config", str(cfg_file), "--out", str(out), "--n", "5"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["records"]) == 5  # flag wins over config file
    assert manifest["seed"] == 9  # config file beats default


def test_unknown_config_keys_rejected(tmp_path, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"n": 4, "bogus_key": 1}))
    code = dispatch(["toydata", "--config", str(cfg_file), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "bogus_key" in capsys.readouterr().err


def test_missing_required_input_exits_one(tmp_path, capsys):
    assert dispatch(["train-ae", "--out", str(tmp_path / "c.pt")]) == 1


def test_extract_layout_oracle(tmp_path):
    out = tmp_path / "ds"
    dispatch(["toydata", "--n", "2", "--seed", "1", "--out", str(out)])
    image = out / "images" / "source-00000.png"
    code = dispatch(["extract-layout", "--in", str(image), "--out", str(tmp_path / "layout")])
    assert code == 0
    assert (tmp_path / "layout_av.png").exists()
    assert (tmp_path / "layout_cd.png").exists()
    assert (tmp_path / "layout_lesions.png").exists()


def test_vasculometry_csv(tmp_path):
    out = tmp_path / "ds"
    dispatch(["toydata", "--n", "6", "--seed", "2", "--out", str(out), "--splits", "0,0,1"])
    table = tmp_path / "table.csv"
    code = dispatch(["vasculometry", "--gt", str(out), "--pred", str(out), "--out", str(table)])
    assert code == 0
    lines = table.read_text().strip().splitlines()
    assert lines[0].split(",") == ["AREA", "LEN", "TI", "EPoints", "BPoints", "D0", "D1", "D2", "BA"]
    values = [float(v) for v in lines[1].split(",")]
    assert all(np.isfinite(v) and v == pytest.approx(1.0, abs=1e-6) for v in values)
