import math
from pathlib import Path

import numpy as np
import pytest
import tomli
from hypothesis import given, settings, strategies as st

from tnnpde import persist
from tnnpde.problems import GridSpec, ValidationError, get_problem
from tnnpde.solver import Trainer, initial_states, train

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_text_round_trip(x):
    s = persist.fmt_float(x)
    assert float(s) == x
    assert tomli.loads(f"v = {s}")["v"] == x


def _tiny_problem():
    pb = get_problem("laplace-eigen-d2").with_schedule(p=3, hidden=(5,), pretrain_epochs=4,
                                                       adam_epochs=4, lbfgs_epochs=4)
    pb.grid = GridSpec(2, 8)
    return pb.validate()


def _checkpoints(pb, seed=0, every=3):
    cks = []
    report = train(pb, seed=seed, on_checkpoint=cks.append, checkpoint_every=every)
    return report, cks


def test_checkpoint_bytes_are_stable(tmp_path):
    pb = _tiny_problem()
    _, cks = _checkpoints(pb)
    kinds = {ck["optimizer"]["kind"] if ck["optimizer"] else None for ck in cks}
    assert kinds == {"adam", "lbfgs", None}
    rng = np.random.default_rng(0).bit_generator.state
    for ck in cks:
        a = tmp_path / "a.toml"
        b = tmp_path / "b.toml"
        persist.save_checkpoint(a, ck, pb.name, 0, rng)
        loaded = persist.load_checkpoint(a)
        persist.save_checkpoint(b, loaded, pb.name, 0, rng)
        assert a.read_bytes() == b.read_bytes()
        for name, stt in ck["states"].items():
            assert np.array_equal(loaded["states"][name].theta, stt.theta)
            assert np.array_equal(loaded["states"][name].c, stt.c)


def test_resume_reproduces_next_loss_and_final_metrics(tmp_path):
    pb = _tiny_problem()
    full, cks = _checkpoints(pb)
    by_epoch = {r["epoch"]: r for r in full.records}
    for ck in cks[1:-1]:
        path = tmp_path / f"{ck['epoch']}.toml"
        persist.save_checkpoint(path, ck, pb.name, 0)
        resumed = train(pb, resume=persist.load_checkpoint(path))
        first = resumed.records[0]
        ref = by_epoch[first["epoch"]]
        assert first["epoch"] == ck["epoch"]
        assert abs(first["loss"] - ref["loss"]) <= 1e-12 * abs(ref["loss"])
        for k, v in full.final.items():
            assert abs(resumed.final[k] - v) <= 1e-10 * max(abs(v), 1e-300)


def test_load_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("format_version = 99\n")
    with pytest.raises(ValidationError):
        persist.load_checkpoint(path)
    path.write_text("not toml = = =")
    with pytest.raises(ValidationError):
        persist.load_checkpoint(path)


def test_registry_config():
    cfg = persist.config_from_dict({"problem": "laplace-eigen-d5"})
    pb = cfg.problem
    assert pb.kind == "eigen" and pb.d == 5 and pb.exact_lambda == pytest.approx(5 * math.pi ** 2)
    assert pb.f is None and pb.b is None
    assert cfg.seed == 0
    assert persist.describe(cfg)["seed"] == 0


def test_shipped_configs_load():
    for path in sorted(CONFIGS.glob("*.toml")):
        cfg = persist.load_config(path)
        assert cfg.problem.schedule.p >= 1


def test_inline_config_fields():
    cfg = persist.load_config(CONFIGS / "reaction-diffusion-d3.toml")
    pb = cfg.problem
    assert pb.d == 3 and pb.b == 2.0 and cfg.seed == 1 and cfg.checkpoint_every == 250
    assert np.array_equal(pb.A, np.diag([1.0, 2.0, 1.0]))
    assert pb.grid.n_sub == 4 and pb.schedule.hidden == (16, 16)
    x = np.array([0.3, 0.6, 0.9])
    assert pb.f(x) == pytest.approx((4 * math.pi ** 2 + 2) * np.prod(np.sin(math.pi * x)))
    assert pb.exact_u is not None


def test_missing_domain_names_field():
    with pytest.raises(ValidationError, match="domain"):
        persist.config_from_dict({"problem": {"kind": "homo-dirichlet", "f": "1"}})


def test_validation_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('seed = 0\n\n[problem]\nkind = "homo-dirichlet"\ndomain = [[0, 1]]\nf = "sin(pi*x"\n')
    with pytest.raises(ValidationError, match=r"line 6"):
        persist.load_config(path)
    path.write_text('seed = 0\nbogus = 3\n[problem]\nname = "neumann-d2"\n')
    with pytest.raises(ValidationError, match=r"bogus.*line 2"):
        persist.load_config(path)


@pytest.mark.parametrize("data, match", [
    ({"problem": "nope-d3"}, "unknown problem"),
    ({"problem": "neumann-d2", "seed": -1}, "seed"),
    ({"problem": "neumann-d2", "log_format": "xml"}, "log_format"),
    ({"problem": {"name": "neumann-d2", "schedule": {"adam_epochs": -5}}}, "adam_epochs"),
    ({"problem": {"name": "neumann-d2", "schedule": {"warp": 1}}}, "warp"),
    ({"problem": {"kind": "neumann", "domain": [[0, 1]], "b": 1.0, "f": "1"}}, "boundary data"),
    ({"problem": {"kind": "eigen", "domain": [[1, 0]]}}, "a < b"),
    ({"problem": {"kind": "homo-dirichlet", "domain": [[0, 1]], "f": "1/x"}}, "problem.f|f:"),
    ({"problem": {"kind": "homo-dirichlet", "domain": [[0, 1], [0, 1]], "f": "1",
                  "A": [[1, 2], [0, 1]]}}, "symmetric"),
])
def test_config_validation(data, match):
    with pytest.raises(ValidationError, match=match):
        persist.config_from_dict(data)


def test_run_config_defaults_echoed():
    cfg = persist.config_from_dict({"problem": {"name": "harmonic-d2", "desk": True}})
    info = persist.describe(cfg)
    assert info["problem"] == "harmonic-d2-desk"
    assert info["grid"]["hermite"] is True
    assert info["schedule"]["pretrain_epochs"] > 0
