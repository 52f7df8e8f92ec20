"""Command-line entry point: simulate, train, predict, evaluate, suite.

Exit codes: 0 success, 1 user error (bad config, missing files, failed
suite), 2 numeric or internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import autodiff as ad
from .graphs import Graph
from .metrics import evaluate, report_lines
from .model import InferenceModel
from .scm import read_dataset, sample_task, write_dataset
from .training import TrainConfig, TrainingHalted, build_domain, load_model, train

log = logging.getLogger("amortcd")


class UserError(Exception):
    pass


SIMULATE_KEYS = {"domain", "tasks", "d", "n", "interventional", "seed"}
PREDICT_KEYS = {"checkpoint", "data"}
EVALUATE_KEYS = {"prediction", "truth", "tau"}
SUITE_KEYS = {"cache_dir", "checkpoint", "frozen"}


def _load_config(path: str | None, allowed: set[str] | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UserError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UserError("config must be a JSON object")
    if allowed is not None:
        unknown = set(raw) - allowed
        if unknown:
            raise UserError(f"unknown config keys: {sorted(unknown)}")
    return raw


def _write_resolved(out: str, resolved: dict) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ----------------------------------------------------------------------------


def _simulate_one(args):
    domain_raw, d, n, interventional, seed, k, out = args
    domain = build_domain(domain_raw)
    g, data = sample_task(domain, d, n, np.random.default_rng([seed, k]), interventional=interventional)
    write_dataset(os.path.join(out, f"task_{k:04d}"), g, data, {"seed": seed, "task": k})
    return k


def cmd_simulate(args) -> int:
    raw = _load_config(args.config, SIMULATE_KEYS)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    domain_raw = raw.get("domain", {"preset": "linear"})
    try:
        domain = build_domain(domain_raw)
    except (TypeError, ValueError) as exc:
        raise UserError(str(exc)) from exc
    tasks = int(raw.get("tasks", 1))
    d = int(raw.get("d", 5))
    n = int(raw.get("n", 100))
    if tasks < 1 or d < 1 or n < 2:
        raise UserError("need tasks >= 1, d >= 1, n >= 2")
    interventional = raw.get("interventional")
    resolved = {"domain": domain.to_dict(), "tasks": tasks, "d": d, "n": n,
                "interventional": interventional, "seed": seed}
    out = args.out
    try:
        _write_resolved(out, resolved)
    except OSError as exc:
        raise UserError(f"cannot write to {out}: {exc}") from exc
    jobs = [(domain.to_dict(), d, n, interventional, seed, k, out) for k in range(tasks)]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            list(pool.map(_simulate_one, jobs))
    else:
        for job in jobs:
            _simulate_one(job)
    _emit({"tasks": tasks, "d": d, "n": n, "domain": domain.name, "seed": seed})
    return 0


def cmd_train(args) -> int:
    raw = _load_config(args.config, {"domain", "model", "schedule", "acyclicity", "seed"})
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UserError(str(exc)) from exc
    if args.parallel > 1:
        cfg.schedule.workers = args.parallel
    _write_resolved(args.out, cfg.to_dict())
    state = train(cfg, args.out, resume=args.resume)
    _emit({"checkpoint": os.path.join(args.out, "checkpoint"), "steps": state.step,
           "lambda": state.lam, "F_ema": state.f_ema})
    return 0


def cmd_predict(args) -> int:
    raw = _load_config(args.config, PREDICT_KEYS)
    ckpt = args.checkpoint or raw.get("checkpoint")
    data_dir = args.data or raw.get("data")
    if not ckpt or not data_dir:
        raise UserError("predict needs --checkpoint and --data")
    try:
        params, cfg, _ = load_model(ckpt)
        _, data = read_dataset(data_dir)
    except (OSError, KeyError) as exc:
        raise UserError(f"cannot load inputs: {exc}") from exc
    _write_resolved(args.out, {"checkpoint": os.path.abspath(ckpt), "data": os.path.abspath(data_dir)})
    with ad.precision(np.float64):
        theta = InferenceModel(cfg, params).predict(data)
    path = os.path.join(args.out, "theta.csv")
    np.savetxt(path, theta, fmt="%.17g", delimiter=",")
    _emit({"theta": path, "d": data.d, "n": data.n})
    return 0


def _read_matrix(path: str) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc}") from exc


def _pairs(pred: str, truth: str) -> list[tuple[str, str, str]]:
    """(name, prediction file, truth file) for a single pair or two task-directory roots."""
    if os.path.isfile(pred):
        return [("", pred, truth)]
    out = []
    for name in sorted(os.listdir(pred)):
        pdir = os.path.join(pred, name)
        if not os.path.isdir(pdir):
            continue
        pfile = next((os.path.join(pdir, f) for f in ("theta.csv", "graph.csv")
                      if os.path.exists(os.path.join(pdir, f))), None)
        if pfile is None:
            continue
        out.append((name, pfile, os.path.join(truth, name, "graph.csv")))
    if not out:
        raise UserError(f"no predictions found under {pred}")
    return out


def cmd_evaluate(args) -> int:
    raw = _load_config(args.config, EVALUATE_KEYS)
    pred = args.prediction or raw.get("prediction")
    truth = args.truth or raw.get("truth")
    tau = float(args.tau if args.tau is not None else raw.get("tau", 0.5))
    if not pred or not truth:
        raise UserError("evaluate needs --prediction and --truth")
    if not os.path.exists(pred):
        raise UserError(f"no such prediction: {pred}")
    _write_resolved(args.out, {"prediction": os.path.abspath(pred),
                               "truth": os.path.abspath(truth), "tau": tau})
    reports = []
    for name, pfile, tfile in _pairs(pred, truth):
        theta, g = _read_matrix(pfile), _read_matrix(tfile)
        if theta.shape != g.shape:
            raise UserError(f"dimension mismatch: prediction {theta.shape} vs truth {g.shape}")
        try:
            reports.append(evaluate(theta, Graph(g), tau))
        except ValueError as exc:
            raise UserError(str(exc)) from exc
    if len(reports) == 1 and os.path.isfile(pred):
        text = reports[0].to_json()
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(text + "\n")
        print(text)
    else:
        lines = report_lines(reports)
        with open(os.path.join(args.out, "reports.jsonl"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print("\n".join(lines))
    return 0


def cmd_suite(args) -> int:
    from .suites import SUITES, run_suite

    raw = _load_config(args.config, SUITE_KEYS)
    if args.name not in SUITES:
        raise UserError(f"unknown suite {args.name!r}; choose from {list(SUITES)}")
    cache = args.cache_dir or raw.get("cache_dir")
    resolved = {"suite": args.name, "cache_dir": cache, "checkpoint": args.checkpoint or raw.get("checkpoint"),
                "frozen": bool(args.frozen or raw.get("frozen", False)),
                "seed": args.seed if args.seed is not None else 0}
    _write_resolved(args.out, resolved)
    verdicts = run_suite(args.name, cache, resolved["checkpoint"], resolved["frozen"], resolved["seed"])
    rows = [v.to_dict() for v in verdicts]
    with open(os.path.join(args.out, "verdicts.json"), "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
    for r in rows:
        _emit(r)
    return 0 if all(v.passed for v in verdicts) else 1


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config for the command")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--parallel", type=int, default=1, help="worker processes/threads")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="amortcd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write simulated task directories")
    t = sub.add_parser("train", parents=[common], help="train an inference model")
    t.add_argument("--resume", help="checkpoint to resume from")
    pr = sub.add_parser("predict", parents=[common], help="edge beliefs for a dataset directory")
    pr.add_argument("--checkpoint")
    pr.add_argument("--data")
    ev = sub.add_parser("evaluate", parents=[common], help="score beliefs or a graph against truth")
    ev.add_argument("--prediction")
    ev.add_argument("--truth")
    ev.add_argument("--tau", type=float)
    su = sub.add_parser("suite", parents=[common], help="run a named acceptance suite")
    su.add_argument("name")
    su.add_argument("--cache-dir")
    su.add_argument("--checkpoint")
    su.add_argument("--frozen", action="store_true", help="train with frozen parameters (negative control)")
    return p


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "suite": cmd_suite}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.parallel < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingHalted, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        log.exception("internal failure")
        print(f"internal failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
