import csv
import json

import numpy as np
import pytest

from bmpmoments import IllConditioned, cli
from bmpmoments.cli import EXIT_CONFIG, EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main, run


def write_config(path, **extra):
    cfg = {"schema": "bmp-config/1", "model": {"kind": "canonical", "name": "yule"}}
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def cfg_path(tmp_path):
    return tmp_path / "cfg.json"


class TestExitCodes:
    def test_validate_ok(self, tmp_path, cfg_path):
        write_config(cfg_path)
        out = tmp_path / "out"
        assert run("validate", cfg_path, out) == EXIT_OK
        doc = json.loads((out / "validate.json").read_text())
        assert doc["ok"] is True
        assert (out / "manifest.json").exists()

    def test_missing_config(self, tmp_path):
        assert run("validate", tmp_path / "nope.json", tmp_path / "out") == EXIT_CONFIG

    def test_malformed_json(self, tmp_path, cfg_path):
        cfg_path.write_text("{not json")
        assert run("validate", cfg_path, tmp_path / "out") == EXIT_CONFIG

    def test_unknown_key(self, tmp_path, cfg_path):
        write_config(cfg_path, colour="blue")
        assert run("validate", cfg_path, tmp_path / "out") == EXIT_CONFIG

    def test_unknown_section_key(self, tmp_path, cfg_path):
        write_config(cfg_path, mc={"replicas": 100, "extra": 1})
        assert run("validate", cfg_path, tmp_path / "out") == EXIT_CONFIG

    def test_wrong_schema(self, tmp_path, cfg_path):
        cfg_path.write_text(json.dumps({"schema": "other", "model": {}}))
        assert run("validate", cfg_path, tmp_path / "out") == EXIT_CONFIG

    def test_invalid_model(self, tmp_path, cfg_path):
        law = [{"p": 1.0, "children": [0, 0]}]
        bad = {"kind": "multitype", "Q": [[0.0]], "gamma": [-1.0], "offspring": [law]}
        write_config(cfg_path, model=bad)
        assert run("validate", cfg_path, tmp_path / "out") == EXIT_INVALID

    def test_malformed_model_spec(self, tmp_path, cfg_path):
        write_config(cfg_path, model={"kind": "multitype", "Q": [[0.0]], "gamma": [1.0], "offspring": [[[1.0]]]})
        assert run("validate", cfg_path, tmp_path / "out") == EXIT_CONFIG

    def test_function_outside_regime(self, tmp_path, cfg_path):
        write_config(
            cfg_path,
            model={"kind": "canonical", "name": "coupled_small"},
            functions=[[1.0, 0.0], [1.0, 0.0]],
            regime="small",
        )
        assert run("limits", cfg_path, tmp_path / "out") == EXIT_INVALID

    def test_numerical_failure(self, tmp_path, cfg_path, monkeypatch):
        def broken(*args, **kwargs):
            raise IllConditioned("forced")

        monkeypatch.setattr(cli, "decompose", broken)
        write_config(cfg_path)
        assert run("spectral", cfg_path, tmp_path / "out") == EXIT_NUMERICAL

    def test_locked_directory(self, tmp_path, cfg_path):
        write_config(cfg_path)
        out = tmp_path / "out"
        out.mkdir()
        (out / ".bmp.lock").write_text("123")
        assert run("validate", cfg_path, out) == EXIT_CONFIG
        assert (out / ".bmp.lock").exists()

    def test_lock_released(self, tmp_path, cfg_path):
        write_config(cfg_path)
        out = tmp_path / "out"
        assert run("validate", cfg_path, out) == EXIT_OK
        assert not (out / ".bmp.lock").exists()

    def test_main_parses_arguments(self, tmp_path, cfg_path):
        write_config(cfg_path)
        assert main(["validate", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 0


class TestArtifacts:
    def test_spectral_outputs(self, tmp_path, cfg_path):
        write_config(cfg_path, model={"kind": "canonical", "name": "rotation"})
        out = tmp_path / "out"
        assert run("spectral", cfg_path, out) == EXIT_OK
        spec = json.loads((out / "spectral.json").read_text())
        assert len(spec["eigenvalues"]) == 3
        rows = list(csv.reader(open(out / "h1.csv")))
        assert max(float(r[3]) for r in rows[1:]) < 1e-8

    def test_manifest_records_hashes(self, tmp_path, cfg_path):
        write_config(cfg_path, functions=[[1.0], [1.0]], grid=[0.5, 1.0])
        out = tmp_path / "out"
        assert run("moments", cfg_path, out, seed=7) == EXIT_OK
        man = json.loads((out / "manifest.json").read_text())
        assert set(man["artifacts"]) == {"moments.csv"}
        assert man["seeds"]["mc"] == 7
        assert len(man["config_sha256"]) == 64
        assert "large-lemma" in man["convention_ids"]

    def test_eigen_function_reference(self, tmp_path, cfg_path):
        write_config(
            cfg_path,
            model={"kind": "canonical", "name": "coupled_small"},
            functions=[{"eigen": [1, 0, 0]}, {"eigen": [1, 0, 0]}],
            regime="small",
        )
        out = tmp_path / "out"
        assert run("limits", cfg_path, out) == EXIT_OK
        assert (out / "limits.csv").exists()

    def test_bad_eigen_reference(self, tmp_path, cfg_path):
        write_config(cfg_path, functions=[{"eigen": [4, 0, 0]}])
        assert run("moments", cfg_path, tmp_path / "out") == EXIT_INVALID

    def test_delta_on_jordan_fixture(self, tmp_path, cfg_path):
        write_config(
            cfg_path,
            model={"kind": "canonical", "name": "jordan"},
            regime="large",
            dictionary={"members": [[0.0, 1.0]]},
            grid={"linspace": [1.0, 15.0, 8]},
        )
        out = tmp_path / "out"
        assert run("delta", cfg_path, out) == EXIT_OK
        man = json.loads((out / "manifest.json").read_text())
        # first curve is the twisted-argument form
        assert man["summary"]["delta_final_over_initial"][0] < 0.05

    def test_compare_yule_pairs(self, tmp_path, cfg_path):
        write_config(
            cfg_path,
            functions=[[1.0], [1.0]],
            mc={"replicas": 20000, "times": list(np.linspace(0.1, 1.5, 20)), "seed": 3},
        )
        out = tmp_path / "out"
        assert run("compare", cfg_path, out) == EXIT_OK
        man = json.loads((out / "manifest.json").read_text())
        agree = man["summary"]["mc_agreement"]
        assert agree["cases"] == 20
        assert agree["within_4se"] >= 19
        rows = list(csv.DictReader(open(out / "comparison.csv")))
        assert {r["source"] for r in rows} == {"ode", "mc"}


def test_all_is_byte_identical(tmp_path, cfg_path):
    write_config(
        cfg_path,
        model={"kind": "canonical", "name": "coupled_small"},
        functions=[{"eigen": [1, 0, 0]}, {"eigen": [1, 0, 0]}],
        regime="small",
        grid=[1.0, 5.0],
        dictionary={"n_random": 2, "seed": 1},
        mc={"replicas": 2000, "times": [0.5], "seed": 4},
    )
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("all", cfg_path, a) == EXIT_OK
    assert run("all", cfg_path, b) == EXIT_OK
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert "comparison.csv" in names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
