import json

import pytest

from stark_kam.cli import OUTDIR_ENV, RunConfig, UsageError, config_hash, main


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["diagonalize", "--window=-24:24", "--seed", "0", "--active", "0", "--outdir", str(d)]) == 0
    assert main(["hamiltonian", "--diag", str(d / "diag.json"), "--eps", "1e-6", "--active", "0",
                 "--outdir", str(d)]) == 0
    assert main(["kam", "--ham", str(d / "ham.json"), "--sites", "0", "--eps", "1e-6", "--steps", "1", "--K", "8",
                 "--outdir", str(d)]) == 0
    return d


def test_empty_invocation_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_malformed_window_names_field(capsys):
    assert main(["diagonalize", "--window=12"]) == 2
    assert "window" in capsys.readouterr().err


def test_config_errors_name_the_field(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"window": "-4:4", "scheme": "euler"}))
    assert main(["diagonalize", "--config", str(cfg), "--outdir", str(tmp_path)]) == 2
    assert "scheme" in capsys.readouterr().err
    cfg.write_text(json.dumps({"colour": 1}))
    assert main(["diagonalize", "--config", str(cfg)]) == 2


def test_missing_input_file(tmp_path):
    assert main(["hamiltonian", "--diag", str(tmp_path / "nope.json")]) == 2


def test_artifacts_embed_provenance(artifacts):
    for name in ("diag.json", "ham.json", "kamlog.json"):
        doc = json.loads((artifacts / name).read_text())
        prov = doc["provenance"]
        assert prov["config_hash"] == config_hash(prov["config"])
        assert prov["version"].startswith("0.1.0")
    log = json.loads((artifacts / "kamlog.json").read_text())
    step = log["steps"][0]
    assert {"norms", "checks", "normal_form", "generator"} <= set(step)
    assert len(step["generator"]["sha256"]) == 64


def test_evolve_is_reproducible(artifacts, tmp_path):
    args = ["evolve", "--model", str(artifacts / "diag.json"), "--eps", "1e-6",
            "--init", f"torus:{artifacts / 'kamlog.json'}", "--T", "20", "--dt", "1e-2"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    body = [ln for ln in a.decode().splitlines() if not ln.startswith("#")]
    assert body[0] == "t,mass,energy,M_d,edge_mass" and len(body) == 22


def test_outdir_from_environment(artifacts, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTDIR_ENV, str(tmp_path))
    assert main(["evolve", "--model", str(artifacts / "diag.json"), "--eps", "0", "--T", "1", "--dt", "1e-2"]) == 0
    assert (tmp_path / "traj.csv").exists()


def test_measure_writes_csv(artifacts, tmp_path):
    out = tmp_path / "m.csv"
    code = main(["measure", "--ham", str(artifacts / "ham.json"), "--sites", "0", "--eps", "1e-32,1e-40,1e-48,1e-56",
                 "--samples", "4000", "--seed", "3", "--out", str(out)])
    assert code == 0
    rows = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    assert rows[0] == "eps,rejected_frac,ci_lo,ci_hi" and len(rows) == 5


def test_saturated_measure_fails(artifacts, tmp_path):
    code = main(["measure", "--ham", str(artifacts / "ham.json"), "--sites", "0", "--eps", "1e-6,1e-8",
                 "--samples", "1000", "--out", str(tmp_path / "m.csv")])
    assert code == 1


def test_kam_site_mismatch_is_usage_error(artifacts):
    assert main(["kam", "--ham", str(artifacts / "ham.json"), "--sites", "1", "--eps", "1e-6"]) == 2


def test_check_bounds_and_report(tmp_path, capsys):
    assert main(["check-bounds", "--window=-16:16", "--seeds", "0-1", "--outdir", str(tmp_path)]) == 0
    assert "2/2 seeds pass" in capsys.readouterr().out
    assert main(["report", str(tmp_path / "bounds.json"), "--outdir", str(tmp_path)]) == 0
    assert "PASS" in (tmp_path / "report.md").read_text()


def test_run_pipeline_from_config(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"window": "-16:16", "eps": 1e-6, "seeds": [1], "T": 10.0, "dt": 0.01,
                               "init": "torus", "stages": ["diagonalize", "hamiltonian", "kam", "evolve"]}))
    assert main(["run", "--config", str(cfg), "--outdir", str(tmp_path)]) == 0
    for name in ("diag.json", "ham.json", "kamlog.json", "traj.csv"):
        assert (tmp_path / "seed1" / name).exists()


def test_run_config_validation():
    with pytest.raises(UsageError, match="stages"):
        RunConfig.from_mapping({"stages": ["bake"]})
    assert RunConfig.from_mapping({"delta": "1/60"}).delta == pytest.approx(1 / 60)
