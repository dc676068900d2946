import json
from pathlib import Path

import pytest
import yaml

from goursat import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def tsunami_block(**over):
    block = {"model": {"omega": 0.5, "depth": {"kind": "constant", "h0": 1.0},
                       "r_range": [0.0, 1.0], "t_range": [0.0, 1.0]},
             "cells": 8, "lambdas": [1e-2, 1e-4], "solver": {"method": "cg", "tol": 1e-8, "max_iter": 100}}
    block.update(over)
    return block


@pytest.mark.parametrize("mutation, message", [
    ({"bogus": 1}, "unknown key 'bogus'"),
    ({"grid": {"h_max": 0.1, "hx": 2}}, "unknown key 'grid.hx'"),
    ({"schema_version": 2}, "schema_version"),
    ({"command": "solve"}, "command must be"),
    ({"problem": "nope"}, "problem must be"),
    ({"seed": -1}, "seed"),
    ({"grid": {"h_max": 0}}, "h_max"),
])
def test_config_errors_exit_2(tmp_path, capsys, mutation, message):
    cfg = {"schema_version": 1, "command": "forward", "problem": "lq_rectangle", "grid": {"h_max": 0.25}}
    cfg.update(mutation)
    assert cli.main(["--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert message in capsys.readouterr().err


def test_missing_depth_profile_exit_2(tmp_path, capsys):
    block = tsunami_block()
    del block["model"]["depth"]
    cfg = {"schema_version": 1, "command": "tsunami-twin", "tsunami": block}
    assert cli.main(["--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert "depth" in capsys.readouterr().err


def test_unparsable_and_missing_files(tmp_path):
    (tmp_path / "bad.yaml").write_text("a: [1, 2\n")
    assert cli.main(["--config", str(tmp_path / "bad.yaml")]) == 2
    assert cli.main(["--config", str(tmp_path / "absent.yaml")]) == 2


def test_json_config_and_forward_outputs(tmp_path):
    cfg = {"schema_version": 1, "command": "forward", "problem": "lq_quarter_disk", "grid": {"h_max": 0.125}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "o"
    assert cli.main(["--config", str(path), "--out", str(out), "--seed", "5"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["exit_status"] == 0
    assert set(manifest["outputs"]) <= {p.name for p in out.iterdir()}
    header = (out / "state.csv").read_text().splitlines()[0]
    assert header.startswith("s,t")


@pytest.mark.parametrize("command, problem, files", [
    ("adjoint-check", "lq_quarter_disk", {"adjoint_check.json", "costate.csv"}),
    ("gradient-check", "lq_rectangle", {"gradient_check.json"}),
    ("optimize", "lq_target", {"extremum.json"}),
])
def test_check_commands(tmp_path, command, problem, files):
    cfg = {"schema_version": 1, "command": command, "problem": problem, "grid": {"h_max": 0.0625},
           "tolerances": {"samples": 20} if command == "optimize" else {"count": 3, "threshold": 2e-2}}
    out = tmp_path / "o"
    assert cli.main(["--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0
    assert files <= {p.name for p in out.iterdir()}


def test_failed_check_exit_1(tmp_path):
    cfg = {"schema_version": 1, "command": "adjoint-check", "problem": "lq_quarter_disk",
           "grid": {"h_max": 0.125}, "tolerances": {"count": 3, "threshold": 1e-12}}
    out = tmp_path / "o"
    assert cli.main(["--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 1
    assert json.loads((out / "adjoint_check.json").read_text())["passed"] is False


def test_tsunami_twin_then_invert(tmp_path):
    twin = {"schema_version": 1, "command": "tsunami-twin", "seed": 3, "tsunami": tsunami_block(noise=0.01)}
    out = tmp_path / "twin"
    assert cli.main(["--config", write_cfg(tmp_path, twin, "twin.yaml"), "--out", str(out), "--workers", "2"]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"observations.csv", "lambda_sweep.csv", "u_lambda_0.csv", "misfit_lambda_1.json"} <= names
    inv = {"schema_version": 1, "command": "tsunami-invert",
           "tsunami": tsunami_block(lambdas=[1e-4], observations="twin/observations.csv")}
    out2 = tmp_path / "inv"
    assert cli.main(["--config", write_cfg(tmp_path, inv, "inv.yaml"), "--out", str(out2)]) == 0
    assert (out2 / "lambda_sweep.csv").read_text().splitlines()[0] == "lambda,misfit,regularization,iterations"


def test_invert_missing_observations_exit_2(tmp_path):
    inv = {"schema_version": 1, "command": "tsunami-invert",
           "tsunami": tsunami_block(observations="nowhere.csv")}
    assert cli.main(["--config", write_cfg(tmp_path, inv), "--out", str(tmp_path / "o")]) == 2


def test_twin_csvs_byte_identical(tmp_path):
    twin = {"schema_version": 1, "command": "tsunami-twin", "seed": 9, "tsunami": tsunami_block(noise=0.02)}
    path = write_cfg(tmp_path, twin)
    for name, workers in (("a", "1"), ("b", "3")):
        assert cli.main(["--config", path, "--out", str(tmp_path / name), "--workers", workers]) == 0
    csvs = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert csvs
    for name in csvs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_hmax_override_sets_tsunami_cells(tmp_path):
    twin = {"schema_version": 1, "command": "tsunami-twin", "tsunami": tsunami_block(lambdas=[1e-2])}
    out = tmp_path / "o"
    assert cli.main(["--config", write_cfg(tmp_path, twin), "--out", str(out), "--hmax", "0.25"]) == 0
    # A = 1 and 4 cells per quadrant side: 2 * 4^2 + 2 * 4 + 1 diamond nodes
    assert len((out / "observations.csv").read_text().splitlines()) == 1 + 41


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_validate(name):
    cli.load_config(CONFIGS / name)
