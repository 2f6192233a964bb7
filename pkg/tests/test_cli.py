import json
from pathlib import Path

import numpy as np
import pytest

from studentnmf import __version__
from studentnmf.cli import derive_seed, parse_bounds, parse_vacations, run
from studentnmf.featurizer import read_matrix
from studentnmf.sessionizer import read_sessions
from studentnmf.wnmf import load_model

EVENTS = """student_id,timestamp,subject,kind,bloom,score,duration
s1,1420704000,danish,text,,,
s1,1420704120,danish,exercise,2,,
s1,1420704300,danish,text,,,
s1,1420705500,danish,text,,,
s1,1420705600,danish,quiz,,0.8,300
s2,1420704000,physics,text,,,
"""


@pytest.fixture
def events_file(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text(EVENTS)
    return path


def run_ok(*argv):
    code = run([str(a) for a in argv])
    assert code == 0
    return code


class TestSessionize:
    def test_example(self, events_file, tmp_path):
        out = tmp_path / "s.csv"
        run_ok("sessionize", "--events", events_file, "--gap", 600, "--out", out)
        with open(out) as fh:
            sessions = read_sessions(fh)
        assert [(s.student_id, s.kind.value, s.duration) for s in sessions] == [
            ("s1", "mixed", 300.0), ("s1", "text", 0.0), ("s1", "quiz", 300.0), ("s2", "text", 0.0)]
        manifest = json.loads((tmp_path / "s.csv.manifest.json").read_text())
        assert manifest["version"] == __version__ and str(events_file) in manifest["inputs"]

    def test_missing_file_is_io_error(self, tmp_path):
        assert run(["sessionize", "--events", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "s.csv")]) == 2

    def test_malformed_events(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text(EVENTS.replace("s2,1420704000", "s2,yesterday"))
        assert run(["sessionize", "--events", str(bad), "--out", str(tmp_path / "s.csv")]) == 1
        assert "line 7" in capsys.readouterr().err


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        assert run(["transmogrify"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert run(["fit", "--colour", "blue"]) == 1

    def test_no_subcommand(self):
        assert run([]) == 1

    def test_missing_required(self, capsys):
        assert run(["fit", "--k", "2"]) == 1
        assert "--matrix" in capsys.readouterr().err

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["--version"])
        assert exc.value.code == 0
        assert __version__ in capsys.readouterr().out


def write_matrix_files(prefix: Path, X, W):
    cols = ",".join(f"f{j + 1}" for j in range(X.shape[1]))
    for suffix, data in (("matrix", X), ("mask", W)):
        lines = [f"student_id,period,{cols}"]
        lines += [f"s{i},0," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(data)]
        Path(f"{prefix}.{suffix}.csv").write_text("\n".join(lines) + "\n")


class TestFit:
    def test_negative_entry_rejected(self, tmp_path, capsys):
        X = np.ones((4, 3))
        X[2, 1] = -0.5
        write_matrix_files(tmp_path / "m", X, np.ones_like(X))
        assert run(["fit", "--matrix", str(tmp_path / "m"), "--k", "2", "--out", str(tmp_path / "model.json")]) == 1
        assert "non-negative" in capsys.readouterr().err
        assert not (tmp_path / "model.json").exists()

    def test_fit_and_reports(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.random((20, 2)) @ rng.dirichlet(np.ones(4), 2)
        write_matrix_files(tmp_path / "m", X, np.ones_like(X))
        model_path = tmp_path / "model.json"
        run_ok("fit", "--matrix", tmp_path / "m", "--k", 2, "--restarts", 2, "--out", model_path)
        with open(model_path) as fh:
            model = load_model(fh)
        np.testing.assert_allclose(model.V.sum(axis=1), 1.0)
        assert model.seed == derive_seed(0, "fit") and model.options.restarts == 2
        for kind in ("clusters", "distribution", "timeseries", "activity"):
            run_ok("report", kind, "--model", model_path, "--out", tmp_path / "r")
            assert (tmp_path / f"r.{kind}.csv").exists() and (tmp_path / f"r.{kind}.json").exists()
        run_ok("report", "clusters", "--model", model_path, "--log", "--out", tmp_path / "lg")
        assert json.loads((tmp_path / "lg.clusters.json").read_text())["scale"] == "log10"

    def test_select_k(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        X = np.outer(rng.random(30) + 0.1, rng.random(5) + 0.1)
        write_matrix_files(tmp_path / "m", X, np.ones_like(X))
        run_ok("select-k", "--matrix", tmp_path / "m", "--kmax", 3, "--out", tmp_path / "model.json")
        assert "k* = 1" in capsys.readouterr().out
        lines = (tmp_path / "model.json.selection.csv").read_text().splitlines()
        assert lines[0] == "k,error,selected" and len(lines) == 4


class TestConfig:
    def test_flags_override_config(self, events_file, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gap": 60, "sessionize": {"out": str(tmp_path / "from_cfg.csv")}}))
        run_ok("sessionize", "--config", cfg, "--events", events_file)
        with open(tmp_path / "from_cfg.csv") as fh:
            assert len(read_sessions(fh)) == 6  # 60 s gap splits everything
        run_ok("sessionize", "--config", cfg, "--events", events_file, "--gap", 600, "--out", tmp_path / "flag.csv")
        with open(tmp_path / "flag.csv") as fh:
            assert len(read_sessions(fh)) == 4

    def test_bad_config(self, tmp_path, events_file):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2]")
        assert run(["sessionize", "--config", str(cfg), "--events", str(events_file), "--out", "x"]) == 1

    def test_parsers(self):
        assert parse_bounds(["f10=1.0", "3=2"]) == {10: 1.0, 3: 2.0}
        assert parse_vacations(["5:0.2"]) == {5: 0.2}
        assert derive_seed(1, "fit") != derive_seed(1, "synth")
        assert derive_seed(1, "fit") == derive_seed(1, "fit")


def test_synth_matrix_then_fit(tmp_path):
    run_ok("synth", "matrix", "--students", 40, "--periods", 2, "--k", 2, "--missing-rate", 0.2,
           "--seed", 3, "--out", tmp_path / "syn")
    fm = read_matrix(str(tmp_path / "syn"))
    assert fm.m == 10 and 0 < (fm.W[:, 9] == 0).mean() < 0.5
    planted = json.loads((tmp_path / "syn.planted.json").read_text())
    assert np.array(planted["V"]).shape == (2, 10)


def test_pipeline_is_byte_reproducible(tmp_path):
    run_ok("synth", "events", "--students", 30, "--periods", 3, "--k", 2, "--seed", 1, "--out", tmp_path / "syn")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "events": str(tmp_path / "syn.events.csv"), "subjects": str(tmp_path / "syn.subjects.json"),
        "epoch": "2015-01-08", "periods": 3, "features": "6,7,8,11-14", "kmax": 4, "seed": 5,
        "out_dir": str(tmp_path / "run"),
    }))
    outputs = []
    for threads in (1, 1, 3):
        run_ok("pipeline", "--config", cfg, "--threads", threads)
        outputs.append({p.name: p.read_bytes() for p in sorted((tmp_path / "run").iterdir())
                        if p.name != "manifest.json"})
    assert outputs[0] == outputs[1]
    models = [json.loads(o.pop("model.json")) for o in outputs[1:]]
    assert outputs[1] == outputs[2]  # the thread count only shows up in the model's options
    assert models[0]["U"] == models[1]["U"] and models[0]["objective_trace"] == models[1]["objective_trace"]
    names = set(outputs[0])
    assert {"model.json", "sessions.csv", "features.matrix.csv", "features.mask.csv", "selection.csv"} <= names
    assert {f"report.{k}.csv" for k in ("clusters", "distribution", "timeseries", "activity")} <= names
