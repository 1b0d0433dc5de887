"""Command line entry point: ``tnnpde solve|bench|check|list``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import persist
from .problems import FAMILIES, ValidationError, get_problem, registry
from .solver import initial_states, train

log = logging.getLogger("tnnpde")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2
LOG_COLUMNS = ("epoch", "phase", "loss", "e_l2", "e_h1", "e_lambda", "e_bd", "elapsed_s")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return persist.fmt_float(v)
    return str(v)


class RecordLog:
    """Epoch log sink (CSV with fixed columns, or JSON lines)."""

    def __init__(self, path: Path, fmt: str, keep_before: Optional[int] = None):
        self.fmt = fmt
        kept: List[str] = []
        if keep_before is not None and path.exists():
            lines = path.read_text().splitlines()
            body = lines[1:] if fmt == "csv" else lines
            for line in body:
                epoch = int(line.split(",", 1)[0]) if fmt == "csv" else json.loads(line)["epoch"]
                if epoch < keep_before:
                    kept.append(line)
        self.fh = open(path, "w", newline="")
        if fmt == "csv":
            self.fh.write(",".join(LOG_COLUMNS) + "\n")
        for line in kept:
            self.fh.write(line + "\n")
        self.fh.flush()

    def write(self, rec: dict):
        if self.fmt == "csv":
            self.fh.write(",".join(_cell(rec.get(k)) for k in LOG_COLUMNS) + "\n")
        else:
            row = {k: rec[k] for k in LOG_COLUMNS if rec.get(k) is not None}
            self.fh.write(json.dumps(row) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _set_threads(n: Optional[int]):
    n = n or os.cpu_count() or 1
    torch.set_num_threads(max(1, int(n)))
    return torch.get_num_threads()


def run(cfg: persist.RunConfig, out: Path, resume: Optional[dict] = None) -> int:
    """Train one configured problem, writing log, checkpoints and summary under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    threads = _set_threads(cfg.threads)
    info = persist.describe(cfg)
    info["threads"] = threads
    log.info("resolved configuration: %s", json.dumps(info, sort_keys=True))
    (out / "config.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    problem = cfg.problem
    seed = cfg.seed
    rng = np.random.default_rng(seed)
    if resume is not None:
        if resume["problem"] != problem.name:
            raise ValidationError(f"checkpoint belongs to {resume['problem']!r}, not {problem.name!r}")
        seed = resume["seed"]
        states, rng_state = None, resume.get("rng")
    else:
        states = initial_states(problem, rng)
        rng_state = rng.bit_generator.state
    ext = "csv" if cfg.log_format == "csv" else "jsonl"
    sink = RecordLog(out / f"log.{ext}", cfg.log_format,
                     keep_before=resume["epoch"] if resume is not None else None)

    def on_checkpoint(ck):
        name = "final.toml" if ck["optimizer"] is None else f"epoch-{ck['epoch']:07d}.toml"
        persist.save_checkpoint(out / "checkpoints" / name, ck, problem.name, seed, rng_state)

    try:
        report = train(problem, states, seed=seed, on_record=sink.write, on_checkpoint=on_checkpoint,
                       resume=resume, coef_grad=cfg.coef_grad, checkpoint_every=cfg.checkpoint_every)
    finally:
        sink.close()
    summary = {"problem": problem.name, "seed": seed, "status": report.status, "error": report.error,
               "final": report.final, "wall_time_s": report.wall_time,
               "jitter_events": [list(e) for e in report.jitter_events]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if report.status != "ok":
        log.error("numerical failure: %s", report.error)
        return EXIT_NUMERICAL
    finals = ", ".join(f"{k}={v:.3e}" for k, v in report.final.items()
                       if isinstance(v, float) and k != "epoch")
    print(f"{problem.name}: {finals}  ({report.wall_time:.1f}s)")
    return EXIT_OK


def cmd_solve(args) -> int:
    path = Path(args.config)
    if path.exists():
        cfg = persist.load_config(path)
    else:
        try:
            cfg = persist.config_from_dict({"problem": args.config})
        except ValidationError:
            raise ValidationError(f"config file {args.config!r} not found and not a registry name") from None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    out = Path(args.out or cfg.out or f"runs/{cfg.problem.name}-seed{cfg.seed}")
    resume = persist.load_checkpoint(args.resume) if args.resume else None
    return run(cfg, out, resume)


def cmd_bench(args) -> int:
    names = registry() if args.name == "all" else [args.name]
    status = EXIT_OK
    for name in names:
        cfg = persist.RunConfig(get_problem(name, desk=args.desk).validate(), seed=args.seed,
                                threads=args.threads)
        out = Path(args.out) / cfg.problem.name
        code = run(cfg, out)
        status = max(status, code)
    return status


def cmd_check(args) -> int:
    from .checks import run_checks

    ok = True
    for name, passed, detail in run_checks():
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_list(args) -> int:
    for name in registry():
        spec = get_problem(name)
        s = spec.schedule
        print(f"{name:24s} {spec.kind:18s} d={spec.d:<3d} p={s.p:<4d} (desk variant: {name}-desk)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tnnpde", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="train on a config file or registry problem")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.add_argument("--resume", metavar="CKPT")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="run registry problems")
    p.add_argument("name", help="registry name or 'all'")
    p.add_argument("--desk", action="store_true", help="reduced CPU schedule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", default="bench-runs")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("check", help="quadrature, gradient and assembly self-checks")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("list", help="list registry problems")
    p.set_defaults(func=cmd_list)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
