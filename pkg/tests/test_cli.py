import csv
import json

import numpy as np
import pytest

from tnnpde import cli, persist

TINY = """
seed = {seed}
checkpoint_every = 4

[problem]
name = "neumann-d2"

[problem.grid]
n_sub = 2
n_pts = 8

[problem.schedule]
p = 3
hidden = [5]
adam_epochs = 6
lbfgs_epochs = 4
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY.format(seed=3))
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _numeric_log(path):
    # drop the wall-clock column
    return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]


def test_list(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 20
    assert any(line.startswith("harmonic-d5") for line in out)


def test_check(capsys):
    assert cli.main(["check"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 8


def test_solve_writes_artifacts(tiny, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["solve", str(tiny), "--out", str(out), "--threads", "1"]) == 0
    rows = _rows(out / "log.csv")
    assert list(rows[0].keys()) == list(cli.LOG_COLUMNS)
    assert [int(r["epoch"]) for r in rows] == list(range(11))
    assert rows[-1]["phase"] == "final" and rows[0]["e_lambda"] == ""
    assert all(np.isfinite(float(r["loss"])) and np.isfinite(float(r["e_l2"])) for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["seed"] == 3
    assert summary["final"]["e_l2"] == pytest.approx(float(rows[-1]["e_l2"]), rel=1e-15)
    names = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert names == ["epoch-0000000.toml", "epoch-0000004.toml", "epoch-0000006.toml",
                     "epoch-0000008.toml", "final.toml"]
    assert json.loads((out / "config.json").read_text())["threads"] == 1


def test_seed_determinism_and_override(tiny, tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli.main(["solve", str(tiny), "--out", str(a)]) == 0
    assert cli.main(["solve", str(tiny), "--out", str(b)]) == 0
    assert cli.main(["solve", str(tiny), "--out", str(c), "--seed", "4"]) == 0
    assert _numeric_log(a / "log.csv") == _numeric_log(b / "log.csv")
    assert _numeric_log(a / "log.csv") != _numeric_log(c / "log.csv")


def test_resume_matches_uninterrupted(tiny, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert cli.main(["solve", str(tiny), "--out", str(full)]) == 0
    ck = full / "checkpoints" / "epoch-0000008.toml"
    assert cli.main(["solve", str(tiny), "--out", str(part), "--resume", str(ck)]) == 0
    ref = _numeric_log(full / "log.csv")
    # a fresh directory holds the header and the epochs from 8 on
    assert _numeric_log(part / "log.csv") == ref[:1] + ref[9:]
    fa = json.loads((full / "summary.json").read_text())["final"]
    fb = json.loads((part / "summary.json").read_text())["final"]
    for k, v in fa.items():
        assert abs(fb[k] - v) <= 1e-10 * max(abs(v), 1e-300)
    # resuming inside the original directory rewrites the log in place
    assert cli.main(["solve", str(tiny), "--out", str(full), "--resume", str(ck)]) == 0
    assert _numeric_log(full / "log.csv") == ref


def test_jsonl_log(tmp_path):
    path = tmp_path / "j.toml"
    path.write_text(TINY.format(seed=0).replace("checkpoint_every = 4", 'log_format = "jsonl"'))
    assert cli.main(["solve", str(path), "--out", str(tmp_path / "run")]) == 0
    lines = (tmp_path / "run" / "log.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert recs[-1]["phase"] == "final" and "e_lambda" not in recs[0]


def test_validation_exit_code(tmp_path, capsys):
    assert cli.main(["solve", str(tmp_path / "missing.toml")]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text('[problem]\nkind = "homo-dirichlet"\n')
    assert cli.main(["solve", str(bad)]) == 1
    assert "domain" in capsys.readouterr().err
    assert cli.main(["bench", "nope-d2"]) == 1


def test_resume_with_wrong_problem(tiny, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["solve", str(tiny), "--out", str(out)]) == 0
    other = tmp_path / "other.toml"
    other.write_text(TINY.format(seed=3).replace("neumann-d2", "poisson-homo-d2"))
    ck = out / "checkpoints" / "epoch-0000004.toml"
    assert cli.main(["solve", str(other), "--out", str(tmp_path / "x"), "--resume", str(ck)]) == 1


def test_numerical_failure_exit_code(tiny, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["solve", str(tiny), "--out", str(out)]) == 0
    ck = persist.load_checkpoint(out / "checkpoints" / "epoch-0000004.toml")
    ck["states"]["u"].theta[:] = 0.0
    broken = tmp_path / "broken.toml"
    persist.save_checkpoint(broken, ck, ck["problem"], ck["seed"])
    assert cli.main(["solve", str(tiny), "--out", str(tmp_path / "r2"), "--resume", str(broken)]) == 2
    summary = json.loads((tmp_path / "r2" / "summary.json").read_text())
    assert summary["status"] == "failed" and "DegenerateBasis" in summary["error"]


def test_solve_accepts_registry_name(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    import tnnpde.problems as problems

    real = problems.get_problem

    def shrunk(name, desk=False):
        pb = real(name, desk)
        pb.grid = problems.GridSpec(2, 8)
        return pb.with_schedule(p=2, hidden=(3,), adam_epochs=1, lbfgs_epochs=1)

    monkeypatch.setattr(persist, "get_problem", shrunk)
    assert cli.main(["solve", "poisson-homo-d2"]) == 0
    assert (tmp_path / "runs" / "poisson-homo-d2-seed0" / "summary.json").exists()
