from __future__ import annotations

import csv
import io
import json
import textwrap
from pathlib import Path

import pytest

from branchcva.cli.config import parse_config, parse_paths
from branchcva.cli.main import main
from branchcva.cli.tables import TABLES, format_csv, table3
from branchcva.errors import ConfigError
from branchcva.gwtree import Mode

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = textwrap.dedent("""\
    process: {sigma: 0.2}
    payoff: {name: cva_digital}
    nonlinearity: {preset: choiceu}
    branching:
      hazard: 0.05
      recovery: 0.4
      T: 2
      mode: nonlinear
      paths: 2^12
    """)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_empty_document_lists_required_sections():
    with pytest.raises(ConfigError) as info:
        parse_config("")
    assert [e for e in info.value.errors if "missing required section" in e] == [
        f"missing required section '{s}'" for s in ("process", "payoff", "nonlinearity",
                                                     "branching")]


def test_experiment1_preset_file():
    cfg = parse_config((CONFIGS / "experiment1.yaml").read_text())
    assert cfg.beta == 0.05 and cfg.T == 10.0 and cfg.spec.sigma == (0.2,)
    assert cfg.probabilities == "uniform" and cfg.mode is Mode.NONLINEAR
    assert cfg.n_paths == 2**16


def test_hazard_and_recovery():
    cfg = parse_config(MINIMAL)
    assert cfg.beta == pytest.approx(0.05 * 0.6)
    assert cfg.hazard == 0.05


def test_every_violation_listed_with_lines():
    doc = textwrap.dedent("""\
        process:
          sigma: 0.2
          colour: red
        payoff: {name: nope}
        nonlinearity: {preset: choiceu}
        branching:
          beta: -1
          T: 1
        extra: 1
        """)
    with pytest.raises(ConfigError) as info:
        parse_config(doc)
    errs = info.value.errors
    assert "line 3: unknown key 'process.colour'" in errs
    assert "line 9: unknown section 'extra'" in errs
    # semantic checks run once the structure is valid
    doc2 = doc.replace("  colour: red\n", "").replace("extra: 1\n", "")
    with pytest.raises(ConfigError) as info:
        parse_config(doc2)
    text = "\n".join(info.value.errors)
    assert "line 3: unknown payoff 'nope'" in text
    assert "line 6:" in text and "beta" in text


def test_type_errors_reported():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("T: 2", "T: soon"))
    assert any("'branching.T' must be" in e for e in info.value.errors)


def test_parse_paths():
    assert parse_paths("2^16") == 65536
    assert parse_paths(1000) == 1000
    with pytest.raises(ValueError):
        parse_paths("lots")


def test_price_zero_hazard(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text(MINIMAL.replace("hazard: 0.05", "hazard: 0.0"))
    code, out, _ = run(["price", str(path)], capsys)
    assert code == 0
    assert json.loads(out)["result"]["cva"] == 0.0


def test_price_json_round_trip(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text(MINIMAL)
    code, out, _ = run(["price", str(path), "--seed", "3"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert json.loads(json.dumps(doc)) == doc
    assert doc["meta"]["seed"] == 3 and doc["meta"]["paths"] == 4096
    again = json.loads(run(["price", str(path), "--seed", "3", "--workers", "2"], capsys)[1])
    assert again["result"] == doc["result"]


def test_price_csv(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text(MINIMAL)
    code, out, _ = run(["price", str(path), "--format", "csv"], capsys)
    rows = list(csv.reader(io.StringIO("\n".join(l for l in out.splitlines()
                                                  if not l.startswith("#")))))
    assert code == 0 and rows[0][:3] == ["risky_value", "riskless_value", "cva"]
    assert "# seed: 0" in out


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("process: {}\n")
    assert run(["price", str(bad)], capsys)[0] == 2
    blow = tmp_path / "blow.yaml"
    blow.write_text(textwrap.dedent("""\
        process: {sigma: 0.2}
        payoff: {name: digital}
        nonlinearity: {preset: blowup}
        branching: {beta: 1.0, T: 1.1}
        """))
    code, _, err = run(["price", str(blow)], capsys)
    assert code == 3 and "blow-up refusal" in err
    cap = tmp_path / "cap.yaml"
    cap.write_text(blow.read_text().replace("T: 1.1}", "T: 0.9, max_particles: 2, paths: 4096}"))
    assert run(["price", str(cap)], capsys)[0] == 4
    assert run(["price", str(tmp_path / "missing.yaml")], capsys)[0] == 2


def test_reference_engines(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text(MINIMAL + "engine: {n_space: 401, n_time: 200, n_outer: 4000, n_inner: 20,"
                    " n_times: 4, n_steps: 10}\n")
    surface = tmp_path / "s.csv"
    code, out, _ = run(["reference-fd", str(path), "--surface", str(surface)], capsys)
    fd = json.loads(out)["result"]["value"]
    assert code == 0 and surface.exists()
    code, out, _ = run(["nested-mc", str(path)], capsys)
    nm = json.loads(out)["result"]
    assert code == 0 and abs(nm["value"] - fd) < 3 * nm["stderr"] + 0.3
    code, out, _ = run(["bsde", str(path), "--paths", "2^16"], capsys)
    assert code == 0 and abs(json.loads(out)["result"]["value"] - fd) < 1.0


def test_analyze(capsys):
    code, out, _ = run(["analyze", "--preset", "choiceu", "--beta", "0.05", "--T", "10"], capsys)
    res = json.loads(out)["result"]
    assert code == 0
    assert res["T_max_beta"] == pytest.approx(0.50829, abs=1e-4)
    # the identity's root; see the acceptance suite for the comparison with 4.497
    assert res["X"] == pytest.approx(4.556, abs=1e-3)


def test_fit_poly(capsys):
    code, out, _ = run(["fit-poly", "--degrees", "0,1,2,4", "--bound", "over"], capsys)
    res = json.loads(out)["result"]
    assert code == 0 and dict((k, a) for k, a in res["coefficients"])[1] == pytest.approx(0.5)


def test_table_experiment1_row(capsys):
    code, out, _ = run(["table", "--name", "experiment1", "--paths", "2^16"], capsys)
    lines = [l for l in out.splitlines() if not l.startswith("#")]
    assert code == 0
    assert lines[0] == "N,fair_nonlinear,stdev_nonlinear,fair_mtm,stdev_mtm"
    n, fair, sd, _, _ = lines[1].split(",")
    assert n == "16"
    assert float(sd) == pytest.approx(0.19, rel=0.3)
    assert abs(float(fair) - 21.97) < 3 * 0.19 + 0.05
    assert "# seed: 0" in out and "# fd_grid" in out


def test_table_layouts():
    expected = {
        "experiment1": ["N", "fair_nonlinear", "stdev_nonlinear", "fair_mtm", "stdev_mtm"],
        "experiment2": ["N", "fair_nonlinear", "stdev_nonlinear", "fair_mtm", "stdev_mtm"],
        "blowup": ["maturity", "branching", "branching_stdev", "pde", "advisory"],
    }
    for name in ("table3", "table4", "table5", "table6"):
        expected[name] = ["maturity", "pde_poly", "branching", "branching_stdev", "pde"]
    assert set(TABLES) == set(expected)
    t = table3(log2_paths=(12,))
    assert t.columns == expected["table3"] and [r[0] for r in t.rows] == [2, 4, 6, 8, 10]
    text = format_csv(t)
    body = [l for l in text.splitlines() if not l.startswith("#")]
    assert body[0] == ",".join(expected["table3"])
    assert all(len(c.split(".")[1]) == 2 for c in body[1].split(",")[1:])
