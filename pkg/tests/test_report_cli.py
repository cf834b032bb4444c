import json
import math

import jsonschema
import numpy as np
import pytest

from entroscope import cli
from entroscope.report import SCHEMA_VERSION, dumps, load_schema, to_plain, validate
from entroscope.scenario import run_scenario

from support import SCENARIOS

SCENARIO_FILES = sorted(SCENARIOS.glob("*.json"))
EXPECTED_CODES = {"gram_rank_one": 2, "coeff_nonconvergent": 3, "pushforward_square": 4}


@pytest.fixture(scope="module")
def reports():
    out = {}
    for path in SCENARIO_FILES:
        out[path.stem] = run_scenario(json.loads(path.read_text()))
    return out


def test_dumps_formats_floats_at_full_precision():
    text = dumps({"a": 0.1, "b": 1.0, "c": 1e-20, "d": 3})
    assert json.loads(text) == {"a": 0.1, "b": 1.0, "c": 1e-20, "d": 3}
    assert '"a": 0.10000000000000001' in text
    assert '"b": 1.0' in text and '"d": 3' in text


@pytest.mark.parametrize("value", [math.nan, math.inf, -math.inf, np.float64("nan")])
def test_dumps_non_finite_as_null(value):
    assert json.loads(dumps({"x": value, "xs": [1.0, value]})) == {"x": None, "xs": [1.0, None]}


def test_to_plain_converts_numpy():
    plain = to_plain({"m": np.eye(2), "b": np.bool_(True), "i": np.int64(3), "f": np.float32(0.5)})
    assert plain == {"m": [[1.0, 0.0], [0.0, 1.0]], "b": True, "i": 3, "f": 0.5}
    assert type(plain["b"]) is bool and type(plain["i"]) is int


def test_dumps_is_deterministic():
    obj = {"z": [1.0, 2.5, None], "a": {"nested": [{"k": 1e300}]}, "s": "θ"}
    assert dumps(obj) == dumps(json.loads(dumps(obj)))


def test_dumps_rejects_unknown_types():
    with pytest.raises(TypeError):
        dumps({"x": object()})


@pytest.mark.parametrize("path", SCENARIO_FILES, ids=lambda p: p.stem)
def test_scenario_files_validate(path):
    validate(json.loads(path.read_text()), "scenario")


@pytest.mark.parametrize("path", SCENARIO_FILES, ids=lambda p: p.stem)
def test_reports_validate_and_exit_codes(path, reports):
    report, code = reports[path.stem]
    validate(report, "report")
    assert report["schema_version"] == SCHEMA_VERSION
    assert code == EXPECTED_CODES.get(path.stem, 0)
    assert report["verdicts"]["exit_code"] == code


def test_report_schema_rejects_missing_verdicts(reports):
    report = dict(reports["coeff_gaussian_line"][0])
    del report["verdicts"]
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(report, load_schema("report"))


def test_coefficient_scenario_value(reports):
    report, _ = reports["coeff_gaussian_line"]
    assert report["verdicts"]["pass"]
    assert report["results"]["coefficients"][0]["limit"] == pytest.approx(1.0, abs=1e-6)


def test_invalid_scenario_is_input_error():
    report, code = run_scenario({"command": "coeff", "space": {"kind": "euclidean", "dim": 1}})
    assert code == 4
    assert report["verdicts"]["verdict"] == "input-error"
    assert report["verdicts"]["error"]


def test_parse_error_is_input_error():
    s = json.loads((SCENARIOS / "coeff_gaussian_line.json").read_text())
    s["functions"] = [{"expr": "y1 +"}]
    report, code = run_scenario(s)
    assert code == 4
    assert "1:5" in report["verdicts"]["error"]


def test_cli_writes_out_file(tmp_path, capsys):
    out = tmp_path / "report.json"
    code = cli.main(["coeff", "--scenario", str(SCENARIOS / "coeff_gaussian_line.json"), "--out", str(out)])
    assert code == 0
    assert capsys.readouterr().out == ""
    validate(json.loads(out.read_text()), "report")


def test_cli_stdout_matches_out_file(tmp_path, capsys):
    path = str(SCENARIOS / "coeff_circle.json")
    out = tmp_path / "r.json"
    cli.main(["coeff", "--scenario", path])
    printed = capsys.readouterr().out
    cli.main(["coeff", "--scenario", path, "--out", str(out), "--workers", "4"])
    assert printed == out.read_text()


def test_cli_command_mismatch(capsys):
    code = cli.main(["gram", "--scenario", str(SCENARIOS / "coeff_gaussian_line.json")])
    assert code == 4
    assert "does not match" in capsys.readouterr().err


@pytest.mark.parametrize("seed", ["-1", str(2**64)])
def test_cli_rejects_bad_seed(seed, capsys):
    code = cli.main(["coeff", "--scenario", str(SCENARIOS / "coeff_gaussian_line.json"), "--seed", seed])
    assert code == 4
    assert "seed" in capsys.readouterr().err


def test_cli_missing_file(tmp_path, capsys):
    assert cli.main(["coeff", "--scenario", str(tmp_path / "nope.json")]) == 4
    assert "cannot read" in capsys.readouterr().err


def test_cli_seed_override_is_echoed(tmp_path):
    out = tmp_path / "r.json"
    cli.main(["gram", "--scenario", str(SCENARIOS / "gram_directional_plane_mc.json"), "--seed", "7",
              "--out", str(out)])
    doc = json.loads(out.read_text())
    assert doc["scenario"]["seed"] == 7
    assert doc["diagnostics"]["seed"] == 7


def test_cli_seed_changes_monte_carlo_report(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    path = str(SCENARIOS / "gram_directional_plane_mc.json")
    cli.main(["gram", "--scenario", path, "--seed", "1", "--out", str(a)])
    cli.main(["gram", "--scenario", path, "--seed", "2", "--out", str(b)])
    assert json.loads(a.read_text())["results"] != json.loads(b.read_text())["results"]


def test_cli_unknown_command():
    with pytest.raises(SystemExit):
        cli.main(["plot", "--scenario", "x.json"])
