import json
import math
from pathlib import Path

import numpy as np
import pytest

from anticipating import cli
from anticipating import verification as vf


def run(argv, tmp_path, name="out"):
    out = tmp_path / name
    code = cli.main(list(argv) + ["--out", str(out)])
    return code, out


def test_defaults():
    cfg = cli.parse_config(["verify"])
    assert (cfg.T, cfg.n, cfg.K, cfg.m) == (1.0, 16, 4, 10 ** 5)


def test_empty_file_gives_defaults(tmp_path):
    f = tmp_path / "empty.ini"
    f.write_text("")
    assert cli.parse_config(["verify", "--config", str(f)]) == cli.parse_config(["verify"])


def test_range_error_names_field(capsys):
    assert cli.main(["verify", "--n", "0"]) == 2
    err = capsys.readouterr().err
    assert "n:" in err and "got 0" in err


def test_flag_overrides_file(tmp_path):
    f = tmp_path / "c.ini"
    f.write_text("[grid]\nn = 8\nT = 2.0\n")
    cfg = cli.parse_config(["spde", "--config", str(f), "--n", "32"])
    assert cfg.n == 32 and cfg.T == 2.0


def test_unknown_key_and_section_rejected(tmp_path, capsys):
    f = tmp_path / "c.ini"
    f.write_text("[grid]\nwidth = 3\n")
    assert cli.main(["verify", "--config", str(f)]) == 2
    assert "unknown key 'width'" in capsys.readouterr().err
    f.write_text("[plots]\ncolor = red\n")
    assert cli.main(["verify", "--config", str(f)]) == 2
    assert "unknown section [plots]" in capsys.readouterr().err


def test_malformed_file_and_bad_values(tmp_path, capsys):
    f = tmp_path / "c.ini"
    f.write_text("n = 3\n")
    assert cli.main(["verify", "--config", str(f)]) == 2
    assert "malformed" in capsys.readouterr().err
    f.write_text("[grid]\nn = many\n")
    assert cli.main(["verify", "--config", str(f)]) == 2
    assert "expected int" in capsys.readouterr().err
    assert cli.main(["verify", "--tol", "kolmogorov=-1"]) == 2
    assert cli.main(["verify", "--tol", "nonsense=2"]) == 2


def test_config_round_trip(tmp_path):
    cfg = cli.parse_config(["smooth", "--n", "12", "--rho", "0.25", "--a2", "sin", "--eps2", "0.1",
                            "--t-query", "0.5", "--tol", "smoother_ess=2"])
    f = tmp_path / "round.ini"
    f.write_text(cfg.to_ini())
    again = cli.RunConfig(**cli.read_config_file(f)).validate()
    assert again == cfg


def test_verify_report_is_deterministic(tmp_path):
    argv = ["verify", "--suite", "gsro", "--preset", "minimal", "--seed", "7"]
    c1, o1 = run(argv + ["--workers", "1"], tmp_path, "a")
    c2, o2 = run(argv + ["--workers", "2"], tmp_path, "b")
    assert c1 == c2 == 0
    assert (o1 / "report.json").read_bytes() == (o2 / "report.json").read_bytes()
    rep = json.loads((o1 / "report.json").read_text())
    assert rep["passed"] and all("anchor" in r for r in rep["records"])
    assert "runtime" not in rep["records"][0]
    assert "checks" in json.loads((o1 / "timings.json").read_text())


def test_chaos_suite_carries_exponential_vector_anchor(tmp_path):
    code, out = run(["verify", "--suite", "chaos", "--preset", "minimal", "--workers", "1"], tmp_path)
    rep = json.loads((out / "report.json").read_text())
    anchors = {r["name"]: r["anchor"] for r in rep["records"]}
    assert anchors["exp_vector_quantization"] == "second-quantization-exponential"
    assert code == 0


def test_failed_check_sets_exit_code(tmp_path):
    code, out = run(["verify", "--suite", "gsro", "--preset", "minimal", "--workers", "1",
                     "--tol", "integrator_bound=1e-3"], tmp_path)
    assert code == 1
    rep = json.loads((out / "report.json").read_text())
    assert not rep["passed"]


def test_timeout_produces_failing_records(tmp_path):
    code, out = run(["verify", "--suite", "smoothing", "--preset", "minimal", "--workers", "1",
                     "--timeout", "1e-9"], tmp_path)
    assert code == 1
    rep = json.loads((out / "report.json").read_text())
    assert any(r["detail"].get("status") == "timeout" for r in rep["records"])


def test_spde_heat_surface_matches_closed_form(tmp_path):
    code, out = run(["spde", "--a1", "zero", "--a2", "zero", "--rho", "0.0"], tmp_path)
    assert code == 0
    data = np.genfromtxt(out / "U_surface.csv", delimiter=",", names=True)
    # heat semigroup on exp(-r^2/2): exp(-r^2 / (2 (1 + t))) / sqrt(1 + t)
    ref = np.exp(-data["r"] ** 2 / (2 * (1 + data["t"]))) / np.sqrt(1 + data["t"])
    assert np.abs(data["U_mean"] - ref).max() <= 0.02 * np.abs(ref).max()
    header = (out / "U_surface.csv").read_text().splitlines()[0]
    assert header == "t,r,U_mean"


def test_csv_uses_seventeen_significant_digits(tmp_path):
    code, out = run(["fbm", "--n", "8"], tmp_path)
    assert code == 0
    row = (out / "fbm_covariance.csv").read_text().splitlines()[1].split(",")
    assert float(row[0]) == 0.125
    vals = [v for v in row if "e" not in v and len(v.replace(".", "").lstrip("0-")) > 10]
    assert vals, row


def test_output_directory_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "envout"
    monkeypatch.setenv(cli.OUT_ENV, str(target))
    assert cli.main(["fbm", "--n", "8"]) == 0
    assert (target / "report.json").exists()


def test_smooth_and_density_outputs(tmp_path):
    code, out = run(["smooth", "--n", "8", "--m", "20000", "--a1", "zero", "--rho", "0.6"], tmp_path, "s")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert {r["name"] for r in rep["records"]} == {"smoother_ess", "smoother_gaussian"}
    pi = np.genfromtxt(out / "pi_t.csv", delimiter=",", names=True)
    for t in np.unique(pi["t"]):
        assert pi["mass"][pi["t"] == t].sum() == pytest.approx(1.0)
    code, out = run(["density", "--n", "8", "--m", "20000", "--corr", "volterra", "--a2", "sin",
                     "--eps2", "0.1"], tmp_path, "d")
    assert code == 0
    assert (out / "quasinilpotence.csv").exists() and (out / "density_samples.csv").exists()


def test_every_anchor_documented_in_readme():
    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    for anchor in vf.ANCHORS.values():
        assert f"`{anchor}`" in readme, anchor
