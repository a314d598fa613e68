import csv
import io
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from brwre.cli import (RunConfig, build_parser, law_from_dict, main, parse_grid, parse_law_file, parse_source,
                       run_command)
from brwre.criteria import classify_regimes
from brwre.env_law import Environment, law_extremes, validate_law

LAWS = Path(__file__).resolve().parent.parent / "laws"


def _run(*argv):
    cfg = RunConfig(**vars(build_parser().parse_args(argv)))
    return run_command(cfg)


def _body(text):
    return [line for line in text.splitlines() if not line.startswith("#")]


def _rows(text):
    return list(csv.DictReader(io.StringIO("\n".join(_body(text)))))


def _write(tmp_path, doc, name="law.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


class TestParse:
    def test_density_density(self):
        law = parse_law_file(LAWS / "density_case_b.json")
        assert law.kind == "density_constant_drift"
        assert law_extremes(law)[0] == 2.0

    def test_case_a_atoms(self):
        law = parse_law_file(LAWS / "two_atom_case_a.json")
        assert [a.weight for a in law.atoms] == [0.75, 0.25]
        assert law.atoms[0].dist.mean == pytest.approx(10 / 9, abs=1e-15)

    def test_weights_short_parse_then_fail(self, tmp_path):
        doc = {"kind": "atomic", "atoms": [{"mean": 1.5, "drift": 0.5, "weight": 0.6},
                                           {"mean": 0.5, "drift": 0.5, "weight": 0.3}]}
        law = parse_law_file(_write(tmp_path, doc))
        assert not validate_law(law).ok
        status, text = _run("validate", _write(tmp_path, doc))
        assert status == 3

    def test_unknown_key_rejected(self, tmp_path):
        doc = {"kind": "atomic", "atoms": [{"mean": 1.5, "drift": 0.5, "weight": 1.0, "colour": "red"}]}
        status, text = _run("validate", _write(tmp_path, doc))
        assert status == 2 and text.startswith("error=config")

    def test_unknown_top_level_key(self):
        with pytest.raises(Exception):
            law_from_dict({"kind": "atomic", "atoms": [], "extra": 1})

    def test_two_offspring_specs_rejected(self, tmp_path):
        doc = {"kind": "atomic", "atoms": [{"mean": 1.5, "pmf": [0, 1], "drift": 0.5, "weight": 1.0}]}
        assert _run("validate", _write(tmp_path, doc))[0] == 2

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert _run("classify", str(p))[0] == 2

    def test_missing_file(self, tmp_path):
        assert _run("classify", str(tmp_path / "nope.json"))[0] == 2

    def test_environment_document(self):
        env = parse_source(LAWS / "site_m2_h075.json")
        assert isinstance(env, Environment) and len(env) == 3
        assert np.all(env.mean == 2.0) and np.all(env.drift == 0.75)

    @pytest.mark.parametrize("spec,want", [("0:1:3", [0, 0.5, 1]), ("0.1,0.2", [0.1, 0.2]), ("1/4", [0.25])])
    def test_grid(self, spec, want):
        assert np.allclose(parse_grid(spec, "g"), want)


class TestCommands:
    def test_classify_case_a(self):
        status, text = _run("classify", str(LAWS / "two_atom_case_a.json"))
        doc = json.loads(text)["data"]
        assert status == 0
        assert doc["h_ls"] == 0.1 and doc["case"] == "a"
        assert doc["h_gs"] == pytest.approx(0.195, abs=1e-3)
        assert doc["phi_at_h_ls"] == "inf"

    def test_phase_diagram_case_c(self):
        status, text = _run("phase-diagram", str(LAWS / "two_atom_case_c.json"), "--h-grid", "0.01:0.99:99")
        rows = _rows(text)
        assert status == 0 and len(rows) == 99
        for r in rows:
            assert r["regime"] == ("I" if float(r["h"]) < 0.5 else "II")

    @pytest.mark.parametrize("name", ["two_atom_case_a.json", "two_atom_case_c.json", "density_case_b.json"])
    def test_phase_diagram_matches_library(self, name):
        grid = "0.02:1:50"
        _, text = _run("phase-diagram", str(LAWS / name), "--h-grid", grid)
        got = [r["regime"] for r in _rows(text)]
        assert got == classify_regimes(parse_law_file(LAWS / name), parse_grid(grid, "g"))

    def test_phi_sweep_undefined_below_h_ls(self):
        _, text = _run("phi-sweep", str(LAWS / "two_atom_case_a.json"), "--h-grid", "0.05,0.1,0.5")
        rows = _rows(text)
        assert [r["phi"] for r in rows[:2]] == ["undefined", "inf"]
        assert float(rows[2]["phi"]) < 0

    def test_metadata_header(self):
        _, text = _run("phase-diagram", str(LAWS / "two_atom_case_c.json"), "--seed", "17")
        meta = dict(line[2:].split("=", 1) for line in text.splitlines() if line.startswith("# ")
                    and not line.startswith("# summary."))
        assert json.loads(meta["seed"]) == 17
        assert json.loads(meta["artifact"]).startswith("brwre ")
        assert len(json.loads(meta["law_sha256"])) == 64
        assert "h_grid" in json.loads(meta["knobs"])

    def test_simulate_trajectory(self):
        status, text = _run("simulate", str(LAWS / "homogeneous_m2_h05.json"), "--replicas", "1",
                            "--horizon", "20")
        rows = _rows(text)
        assert status == 0 and rows[0] == {"n": "0", "Z_n": "1", "saturated": "0"}

    def test_simulate_survival(self):
        status, text = _run("simulate", str(LAWS / "galton_watson_h1.json"), "--replicas", "2000",
                            "--horizon", "50")
        row = _rows(text)[0]
        assert status == 0 and row["mode"] == "annealed"
        assert float(row["ci_low"]) <= 2 / 3 <= float(row["ci_high"])

    def test_embedded_env_file(self):
        status, text = _run("embedded", str(LAWS / "site_m2_h075.json"), "--k", "1", "--runs", "4000")
        row = _rows(text)[0]
        assert status == 0 and float(row["site_embedded_mean"]) == 3.0
        assert abs(float(row["mean_xi_j"]) - 3.0) < 4 * float(row["stderr"])

    def test_beta_summary(self, tmp_path):
        out = tmp_path / "beta.csv"
        assert main(["beta", str(LAWS / "two_atom_case_c.json"), "--n", "40", "--replicas", "4",
                     "--grid", "0.5,1", "--out", str(out), "--richardson"]) == 0
        text = out.read_text()
        assert "# summary.beta_1_analytic=" in text
        assert _body(text)[0] == "x,beta_hat,stderr,diff_vs_half_n"


class TestExitCodes:
    def test_zero_replicas(self):
        assert _run("simulate", str(LAWS / "two_atom_case_a.json"), "--replicas", "0")[0] == 2

    def test_bad_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", str(LAWS / "two_atom_case_a.json"), "--horizon", "ten"])
        assert exc.value.code == 2
        assert capsys.readouterr().err.startswith("error=config")

    def test_invalid_law(self, tmp_path):
        doc = {"kind": "atomic", "atoms": [{"pmf": [0, 1], "drift": 0.5, "weight": 1.0}]}
        status, text = _run("classify", _write(tmp_path, doc))
        assert status == 3 and text.startswith("error=law reason=")
        assert "\n" not in text

    def test_zero_survivors(self, tmp_path):
        doc = {"kind": "atomic", "atoms": [{"pmf": [1.0], "drift": 0.5, "weight": 1.0}]}
        status, text = _run("simulate", _write(tmp_path, doc), "--replicas", "50", "--horizon", "5",
                            "--growth")
        assert status == 4 and text.startswith("error=runtime")

    def test_beta_needs_strong_ellipticity(self):
        assert _run("beta", str(LAWS / "galton_watson_h1.json"), "--n", "10")[0] == 3

    def test_environment_where_law_needed(self):
        assert _run("classify", str(LAWS / "site_m2_h075.json"))[0] == 2


class TestReproducibility:
    @pytest.mark.parametrize("argv", [
        ("simulate", "two_atom_case_c.json", "--replicas", "300", "--horizon", "30", "--growth"),
        ("simulate", "two_atom_case_a.json", "--replicas", "1", "--horizon", "40"),
        ("beta", "two_atom_case_c.json", "--n", "30", "--replicas", "5"),
        ("embedded", "site_m2_h075.json", "--k", "3", "--runs", "50"),
    ])
    def test_byte_identical(self, argv):
        cmd, name, *rest = argv
        a = _run(cmd, str(LAWS / name), "--seed", "99", *rest)
        b = _run(cmd, str(LAWS / name), "--seed", "99", *rest)
        assert a == b
        c = _run(cmd, str(LAWS / name), "--seed", "100", *rest)
        assert _body(a[1]) != _body(c[1])

    def test_no_nan_tokens(self):
        texts = [_run("phi-sweep", str(LAWS / n), "--h-grid", "0.01:1:40")[1]
                 for n in ("two_atom_case_a.json", "two_atom_case_c.json", "density_case_b.json")]
        texts.append(_run("classify", str(LAWS / "two_atom_case_c.json"), "--format", "csv")[1])
        for t in texts:
            for row in csv.reader(io.StringIO("\n".join(_body(t)[1:]))):
                for cell in row:
                    assert cell.lower() != "nan"
                    try:
                        v = float(cell)
                    except ValueError:
                        continue
                    assert not math.isnan(v)


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "brwre.cli", "classify", str(LAWS / "two_atom_case_c.json")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["data"]["h_gs"] == "inf"
