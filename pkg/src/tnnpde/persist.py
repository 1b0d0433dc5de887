"""Run configuration loading and checkpoint files.

Both are TOML.  Checkpoints are written by a small deterministic emitter
that prints every float with 17 significant digits, so save -> load -> save
reproduces the same bytes and reloaded parameters are bit-identical.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import tomli

from .expr import ExprSyntaxError, SeparableFn
from .problems import (KINDS, GridSpec, ProblemSpec, Schedule, ValidationError, get_problem)
from .tnn import TnnState

FORMAT_VERSION = 1


# --- TOML emission -----------------------------------------------------------------


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    s = format(x, ".17g")
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def _value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, np.ndarray):
        v = v.tolist()
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def dumps(data: Dict[str, Any]) -> str:
    """Emit nested dicts as TOML: scalars and arrays first, then sub-tables."""
    lines = []

    def emit(table: Dict[str, Any], prefix: str):
        subtables = []
        for key, v in table.items():
            if isinstance(v, dict):
                subtables.append((key, v))
            elif v is not None:
                lines.append(f"{key} = {_value(v)}")
        for key, v in subtables:
            name = f"{prefix}.{key}" if prefix else key
            lines.append("")
            lines.append(f"[{name}]")
            emit(v, name)

    emit(data, "")
    return "\n".join(lines).lstrip("\n") + "\n"


# --- checkpoints -----------------------------------------------------------------------


def _domain_out(domain):
    return ["line" if iv is None else [float(iv[0]), float(iv[1])] for iv in domain]


def _domain_in(items):
    return [None if iv == "line" else (float(iv[0]), float(iv[1])) for iv in items]


def state_to_dict(st: TnnState) -> dict:
    return {"d": st.d, "p": st.p, "hidden": list(st.hidden), "mask": st.mask,
            "activation": st.activation, "domain": _domain_out(st.domain),
            "c": np.asarray(st.c, float), "theta": np.asarray(st.theta, float)}


def state_from_dict(data: dict) -> TnnState:
    theta = np.array(data["theta"], dtype=np.float64)
    st = TnnState(int(data["d"]), int(data["p"]), tuple(int(h) for h in data["hidden"]),
                  theta, np.array(data["c"], dtype=np.float64), _domain_in(data["domain"]),
                  bool(data["mask"]), str(data.get("activation", "sin")))
    if theta.shape != (st.d, st.n_params):
        raise ValidationError(f"checkpoint theta has shape {theta.shape}, expected {(st.d, st.n_params)}")
    return st


def checkpoint_to_dict(ck: dict, problem: str, seed: int, rng_state: Optional[dict] = None) -> dict:
    out = {"format_version": FORMAT_VERSION, "problem": problem, "seed": seed,
           "epoch": ck["epoch"], "phase_index": ck["phase_index"], "phase_epoch": ck["phase_epoch"]}
    if rng_state is not None:
        out["rng"] = {k: str(v) for k, v in _flatten(rng_state).items()}
    opt = ck.get("optimizer")
    if opt is not None:
        opt = dict(opt)
        if opt["kind"] == "lbfgs":
            opt["n_pairs"] = len(opt["s"])
            opt["s"] = [np.asarray(x).tolist() for x in opt["s"]]
            opt["y"] = [np.asarray(x).tolist() for x in opt["y"]]
        out["optimizer"] = opt
    out["states"] = {name: state_to_dict(st) for name, st in ck["states"].items()}
    return out


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "_"))
        else:
            out[key] = v
    return out


def save_checkpoint(path, ck: dict, problem: str, seed: int, rng_state=None) -> None:
    Path(path).write_text(dumps(checkpoint_to_dict(ck, problem, seed, rng_state)))


def load_checkpoint(path) -> dict:
    """Read a checkpoint into the dict shape the trainer resumes from."""
    try:
        data = tomli.loads(Path(path).read_text())
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from None
    if data.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format {data.get('format_version')!r}")
    opt = data.get("optimizer")
    if opt is not None and opt["kind"] == "lbfgs":
        opt["s"] = [np.array(x, float) for x in opt.get("s", [])]
        opt["y"] = [np.array(x, float) for x in opt.get("y", [])]
    return {"problem": data["problem"], "seed": int(data["seed"]), "epoch": int(data["epoch"]),
            "phase_index": int(data["phase_index"]), "phase_epoch": int(data["phase_epoch"]),
            "optimizer": opt, "rng": data.get("rng"),
            "states": {k: state_from_dict(v) for k, v in data["states"].items()}}


# --- run configuration -----------------------------------------------------------------


@dataclass
class RunConfig:
    problem: ProblemSpec
    seed: int = 0
    out: Optional[str] = None
    checkpoint_every: int = 1000
    log_format: str = "csv"
    threads: Optional[int] = None
    coef_grad: str = "implicit"
    source: Dict[str, Any] = field(default_factory=dict, repr=False)


def _line_of(text: str, key: str) -> str:
    m = re.search(rf"^\s*{re.escape(key)}\s*=", text, flags=re.M)
    return f" (line {text[:m.start()].count(chr(10)) + 1})" if m else ""


def _sep(value, where: str, text: str, dim: int) -> SeparableFn:
    try:
        if isinstance(value, str):
            return SeparableFn([[value] * dim]) if dim == 1 else SeparableFn.product(value, dim)
        if isinstance(value, (int, float)):
            return SeparableFn.constant(float(value), dim)
        if isinstance(value, dict):
            if "terms" not in value:
                raise ValidationError(f"{where}: separable data needs a 'terms' array")
            return SeparableFn(value["terms"], value.get("coefs"))
    except ValidationError:
        raise
    except ExprSyntaxError as exc:
        raise ValidationError(f"{where}{_line_of(text, where.split('.')[-1])}: {exc}") from None
    except ValueError as exc:
        raise ValidationError(f"{where}{_line_of(text, where.split('.')[-1])}: {exc}") from None
    raise ValidationError(f"{where}: expected an expression, a number or a table with 'terms'")


def _dataclass_update(obj, table: dict, where: str, text: str):
    names = {f.name for f in dataclasses.fields(obj)}
    for key in table:
        if key not in names:
            raise ValidationError(f"unknown field {where}.{key}{_line_of(text, key)}")
    kw = dict(table)
    if "hidden" in kw:
        kw["hidden"] = tuple(int(h) for h in kw["hidden"])
    return dataclasses.replace(obj, **kw)


def problem_from_table(t: dict, text: str = "") -> ProblemSpec:
    """Build a ProblemSpec from a [problem] table (registry name or inline data)."""
    t = dict(t)
    grid_t, sched_t = t.pop("grid", None), t.pop("schedule", None)
    if "name" in t and "kind" not in t:
        spec = get_problem(t.pop("name"), desk=bool(t.pop("desk", False)))
        if t:
            raise ValidationError(f"unknown field problem.{next(iter(t))}{_line_of(text, next(iter(t)))}")
    else:
        for req in ("kind", "domain"):
            if req not in t:
                raise ValidationError(f"missing required field 'problem.{req}'")
        kind = t["kind"]
        if kind not in KINDS:
            raise ValidationError(f"problem.kind must be one of {KINDS}{_line_of(text, 'kind')}")
        dom = t["domain"]
        if not isinstance(dom, list) or not dom:
            raise ValidationError(f"problem.domain must be a non-empty array{_line_of(text, 'domain')}")
        domain = []
        for iv in dom:
            if iv == "line":
                domain.append(None)
            elif isinstance(iv, list) and len(iv) == 2:
                domain.append((float(iv[0]), float(iv[1])))
            else:
                raise ValidationError(f"problem.domain entries must be [a, b] or \"line\"{_line_of(text, 'domain')}")
        d = len(domain)
        A = np.asarray(t.get("A", np.eye(d)), dtype=np.float64)
        b = t.get("b")
        if isinstance(b, (dict, str)):
            b = _sep(b, "problem.b", text, d)
        elif b is not None:
            b = float(b)
        f = _sep(t["f"], "problem.f", text, d) if "f" in t else None
        g = None
        if "g" in t:
            g = _sep(t["g"], "problem.g", text, d)
        elif "g_faces" in t:
            g = {}
            for entry in t["g_faces"]:
                i, side = int(entry["dim"]), str(entry["side"])
                g[(i, side)] = _sep(entry, f"problem.g_faces[{i},{side}]", text, d)
        exact_u = _sep(t["exact_u"], "problem.exact_u", text, d) if "exact_u" in t else None
        known = {"kind", "domain", "A", "b", "f", "g", "g_faces", "exact_u", "exact_lambda", "name"}
        for key in t:
            if key not in known:
                raise ValidationError(f"unknown field problem.{key}{_line_of(text, key)}")
        line = domain[0] is None
        grid = GridSpec(n_pts=100, hermite=True) if line else GridSpec()
        spec = ProblemSpec(t.get("name", "inline"), kind, domain, A, b, f, g, exact_u,
                           t.get("exact_lambda"), grid, Schedule())
    if grid_t:
        spec = dataclasses.replace(spec, grid=_dataclass_update(spec.grid, grid_t, "grid", text))
    if sched_t:
        spec = dataclasses.replace(spec, schedule=_dataclass_update(spec.schedule, sched_t, "schedule", text))
    return spec.validate()


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return config_from_dict(data, text)


def config_from_dict(data: dict, text: str = "") -> RunConfig:
    data = dict(data)
    if "problem" not in data:
        raise ValidationError("missing required field 'problem'")
    prob = data.pop("problem")
    if isinstance(prob, str):
        prob = {"name": prob}
    spec = problem_from_table(prob, text)
    cfg = RunConfig(spec, source=data)
    for key, v in data.items():
        if key == "seed":
            if not isinstance(v, int) or v < 0:
                raise ValidationError(f"seed must be a non-negative integer{_line_of(text, key)}")
            cfg.seed = v
        elif key == "out":
            cfg.out = str(v)
        elif key == "checkpoint_every":
            if not isinstance(v, int) or v < 1:
                raise ValidationError(f"checkpoint_every must be a positive integer{_line_of(text, key)}")
            cfg.checkpoint_every = v
        elif key == "log_format":
            if v not in ("csv", "jsonl"):
                raise ValidationError(f"log_format must be 'csv' or 'jsonl'{_line_of(text, key)}")
            cfg.log_format = v
        elif key == "threads":
            if not isinstance(v, int) or v < 1:
                raise ValidationError(f"threads must be a positive integer{_line_of(text, key)}")
            cfg.threads = v
        elif key == "coef_grad":
            if v not in ("implicit", "fixed"):
                raise ValidationError(f"coef_grad must be 'implicit' or 'fixed'{_line_of(text, key)}")
            cfg.coef_grad = v
        else:
            raise ValidationError(f"unknown field '{key}'{_line_of(text, key)}")
    return cfg


def describe(cfg: RunConfig) -> Dict[str, Any]:
    """Resolved configuration, every default filled in, for echoing to the log."""
    p = cfg.problem
    return {"problem": p.name, "kind": p.kind, "d": p.d, "seed": cfg.seed,
            "log_format": cfg.log_format, "threads": cfg.threads, "coef_grad": cfg.coef_grad,
            "grid": dataclasses.asdict(p.grid), "schedule": dataclasses.asdict(p.schedule)}
