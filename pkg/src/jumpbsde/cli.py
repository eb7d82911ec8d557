"""Experiment runner: ``jumpbsde <verb> [--config FILE] [--seed N] [--out DIR] [--paper-scale]``."""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import io
import json
import logging
import os
import re
import sys
import time

import numpy as np

from . import oracles, paths
from ._svg import line_chart
from .models import PRESETS, make_problem
from .sampling import BIT_GENERATOR, RngStream
from .solver import NumericalAbort, SolverConfig, train

log = logging.getLogger("jumpbsde")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

VERBS = ("run", "sweep-dim", "sweep-lambda", "sweep-iters", "eps-study", "density-check")

_NUM = (int, float)
TOP_KEYS = {
    "preset": str, "params": dict, "solver": dict, "oracle": dict, "seed": int, "seeds": list,
    "out": str, "dims": list, "lambdas": list, "iteration_counts": list, "eps_list": list,
    "n_paths": int, "bins": int, "control": str,
}
SOLVER_KEYS = {
    "batch_size": int, "iterations": int, "log_steps": (int, list), "lr_schedule": list,
    "width": int, "n_hidden": int, "valid_size": int, "n_workers": int, "gradient_mode": str,
}
ORACLE_KEYS = {"n_paths": int}

DEFAULT_PRESET = {"run": "pure_jump", "sweep-dim": "basket_call", "sweep-lambda": "basket_call",
                  "sweep-iters": "basket_call", "eps-study": "cgmy_call", "density-check": "cgmy_call"}


class ConfigError(ValueError):
    pass


def _line_of(text, key):
    if text is None:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text[: m.start()].count("\n") + 1 if m else None


def _where(source, text, key):
    line = _line_of(text, key)
    return f"{source}:{line}" if line else source


def _check_type(value, kind, name, source, text):
    kinds = kind if isinstance(kind, tuple) else (kind,)
    ok = any(isinstance(value, k) and not (k is int and isinstance(value, bool)) for k in kinds)
    if not ok:
        names = "/".join(k.__name__ for k in kinds)
        raise ConfigError(f"{_where(source, text, name)}: '{name}' must be {names}, got {type(value).__name__}")


def validate_config(cfg, source="<config>", text=None):
    """Reject unknown keys and wrong types before anything is computed."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"{source}:1: the config must be a JSON object")
    for key, value in cfg.items():
        if key not in TOP_KEYS:
            raise ConfigError(f"{_where(source, text, key)}: unknown key '{key}'")
        _check_type(value, TOP_KEYS[key], key, source, text)
    for section, allowed in (("solver", SOLVER_KEYS), ("oracle", ORACLE_KEYS)):
        for key, value in cfg.get(section, {}).items():
            if key not in allowed:
                raise ConfigError(f"{_where(source, text, key)}: unknown key '{section}.{key}'")
            _check_type(value, allowed[key], key, source, text)
    preset = cfg.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"{_where(source, text, 'preset')}: unknown preset '{preset}'")
    if preset is not None:
        for key, value in cfg.get("params", {}).items():
            if key not in PRESETS[preset]:
                raise ConfigError(f"{_where(source, text, key)}: unknown parameter '{key}' for preset {preset}")
            if key != "scheme":
                _check_type(value, _NUM, key, source, text)
    for key in ("dims", "lambdas", "iteration_counts", "eps_list", "seeds"):
        for item in cfg.get(key, []):
            _check_type(item, int if key in ("dims", "iteration_counts", "seeds") else _NUM, key, source, text)
    if cfg.get("control", "cgmy") not in ("cgmy", "gaussian"):
        raise ConfigError(f"{_where(source, text, 'control')}: control must be 'cgmy' or 'gaussian'")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return validate_config(cfg, path, text)


def default_config(verb, paper_scale=False, preset=None):
    preset = preset or DEFAULT_PRESET[verb]
    cfg = {"preset": preset, "params": {}, "solver": {}, "oracle": {"n_paths": 10**6}, "seed": 0,
           "seeds": None, "out": "results"}
    if preset == "basket_call":
        cfg["params"]["d"] = 100 if paper_scale else 5
        if paper_scale:
            cfg["solver"]["iterations"] = 20000
    cfg["dims"] = [5, 10, 25, 50, 75, 100] if paper_scale else [1, 5]
    cfg["lambdas"] = [0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3] if paper_scale else [0.1, 0.5, 1.3]
    cfg["iteration_counts"] = [20000, 40000] if paper_scale else [2000, 4000]
    cfg["eps_list"] = [1e-1, 3e-2, 1e-2, 3e-3]
    cfg["n_paths"] = None
    cfg["bins"] = 200
    cfg["control"] = "cgmy"
    return cfg


def resolve_config(verb, user=None, seed=None, out=None, paper_scale=False):
    user = user or {}
    cfg = default_config(verb, paper_scale, user.get("preset"))
    for key, value in user.items():
        if isinstance(value, dict):
            cfg[key] = dict(cfg.get(key) or {}, **value)
        else:
            cfg[key] = copy.deepcopy(value)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if cfg["seeds"] is None:
        cfg["seeds"] = [cfg["seed"]]
    return cfg


def build_problem(cfg, **overrides):
    try:
        return make_problem(cfg["preset"], **dict(cfg["params"], **overrides))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def solver_config(cfg, seed=None, **overrides):
    opts = dict(cfg["solver"], **overrides)
    try:
        return SolverConfig(seed=cfg["seed"] if seed is None else seed, **opts)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _write(out, name, text):
    with open(os.path.join(out, name), "w", newline="") as fh:
        fh.write(text)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _oracle(problem, cfg, rng):
    if problem.name == "pure_jump":
        return {"kind": "closed_form", "value": oracles.pure_jump_reference(problem.forward)}
    est = oracles.mc_price(problem, rng, cfg["oracle"]["n_paths"])
    return {"kind": "monte_carlo", "value": est.value, "stderr": est.stderr, "n_paths": est.n_paths, "seed": est.seed}


def _train(problem, scfg, out=None):
    try:
        return train(problem, scfg)
    except NumericalAbort as exc:
        if out is not None and exc.report is not None:
            _write(out, "train_report.csv", exc.report.to_csv())
            _write(out, "abort.json", json.dumps(exc.diagnostics, indent=2))
        raise


def _metadata(out, started, wall, extra=None):
    meta = {"started": started, "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "wall_s": wall, "bit_generator": BIT_GENERATOR, "numpy": np.__version__}
    meta.update(extra or {})
    _write(out, "metadata.json", json.dumps(meta, indent=2))


def cmd_run(cfg):
    out = cfg["out"]
    problem = build_problem(cfg)
    scfg = solver_config(cfg)
    t0 = time.perf_counter()
    report, stack = _train(problem, scfg, out)
    oracle = _oracle(problem, cfg, RngStream(cfg["seed"]).substream(3))
    wall = time.perf_counter() - t0
    rel = abs(report.final_y0 - oracle["value"]) / abs(oracle["value"])
    _write(out, "train_report.csv", report.to_csv())
    _write(out, "train_report.json", report.to_json())
    _write(out, "oracle.json", json.dumps(oracle, indent=2))
    stack.save(os.path.join(out, "networks.ckpt"))
    summary = {"preset": cfg["preset"], "seed": cfg["seed"], "final_y0": report.final_y0,
               "oracle_value": oracle["value"], "rel_error": rel, "iterations": scfg.iterations,
               "n_steps": problem.n_steps, "wall_s": wall, "final_loss": report.final_loss, "config": cfg}
    _write(out, "summary.json", json.dumps(summary, indent=2))
    steps = [r[0] for r in report.rows]
    _write(out, "loss.svg", line_chart([(steps, [r[1] for r in report.rows], "loss")],
                                       "Loss", "iteration", "loss", logy=True))
    _write(out, "y0.svg", line_chart([(steps, [r[2] for r in report.rows], "fitted y0"),
                                      ([steps[0], steps[-1]], [oracle["value"]] * 2, "reference")],
                                     "Initial value", "iteration", "y0"))
    return summary


_SWEEP_COLUMNS = ["mc_price", "bsde_price", "err_pct", "final_loss", "elapsed_s"]


def _sweep(cfg, name, header, items, make):
    out = cfg["out"]
    rows = []
    for item in items:
        rows.append(make(item))
        log.info("%s %s", name, rows[-1])
    _write(out, f"{name}.csv", _csv(header, rows))
    return rows


def _price_row(cfg, problem, key, seeds=None, **solver_overrides):
    seeds = seeds or [cfg["seed"]]
    mc = oracles.mc_price(problem, RngStream(cfg["seed"]).substream(3), cfg["oracle"]["n_paths"])
    t0 = time.perf_counter()
    fits = [_train(problem, solver_config(cfg, seed=s, **solver_overrides))[0] for s in seeds]
    elapsed = time.perf_counter() - t0
    y0 = float(np.median([r.final_y0 for r in fits]))
    loss = float(np.median([r.final_loss for r in fits]))
    return [key, repr(mc.value), repr(y0), repr(100.0 * abs(y0 - mc.value) / mc.value), repr(loss), f"{elapsed:.3f}"]


def cmd_sweep_dim(cfg):
    return {"rows": _sweep(cfg, "sweep_dim", ["dim", *_SWEEP_COLUMNS], cfg["dims"],
                           lambda d: _price_row(cfg, build_problem(cfg, d=d), d, cfg["seeds"]))}


def cmd_sweep_lambda(cfg):
    return {"rows": _sweep(cfg, "sweep_lambda", ["lambda", *_SWEEP_COLUMNS], cfg["lambdas"],
                           lambda lam: _price_row(cfg, build_problem(cfg, lam=lam), lam, cfg["seeds"]))}


def cmd_sweep_iters(cfg):
    problem = build_problem(cfg)
    return {"rows": _sweep(cfg, "sweep_iters", ["iterations", *_SWEEP_COLUMNS], cfg["iteration_counts"],
                           lambda n: _price_row(cfg, problem, n, cfg["seeds"], iterations=n))}


def cmd_eps_study(cfg):
    problem = build_problem(cfg)
    if problem.scheme != "cgmy":
        raise ConfigError("eps-study needs the cgmy_call preset")
    n_paths = 10**4 if cfg["n_paths"] is None else cfg["n_paths"]
    table = paths.forward_error_study(problem.forward, cfg["eps_list"], RngStream(cfg["seed"]), n_paths,
                                      T=problem.T, n_steps=problem.n_steps)
    slope = paths.error_slope(table)
    _write(cfg["out"], "eps_study.csv", _csv(["eps", "e_hat", "stderr", "bound"],
                                             [[repr(v) for v in r] for r in table]))
    pos = [r for r in table if r[1] > 0]
    _write(cfg["out"], "eps_study.svg", line_chart(
        [([r[3] for r in pos], [r[1] for r in pos], "mean squared sup error")],
        "Forward error against small-jump variance", "int |z|^2 nu_eps", "E sup |X_eps - X_ref|^2",
        logx=True, logy=True))
    summary = {"slope": slope, "pass": slope >= 0.8, "n_paths": n_paths, "eps_list": cfg["eps_list"]}
    _write(cfg["out"], "summary.json", json.dumps(summary, indent=2))
    return summary


def density_check(cfg):
    """L1 distance between simulated log-prices and the Fourier-inverted density."""
    bins = cfg["bins"]
    rng = RngStream(cfg["seed"])
    if cfg["control"] == "gaussian":
        n_paths = 10**7 if cfg["n_paths"] is None else cfg["n_paths"]
        if n_paths < 1:
            raise ConfigError("n_paths must be positive")
        dens = oracles.fft_density(oracles.gaussian_char_fn)
        samples = np.concatenate([rng.substream(k).generator.standard_normal(min(1 << 20, n_paths - lo))
                                  for k, lo in enumerate(range(0, n_paths, 1 << 20))])
        threshold = 0.005
    else:
        problem = build_problem(cfg)
        if problem.scheme != "cgmy":
            raise ConfigError("density-check needs the cgmy_call preset or control 'gaussian'")
        n_paths = 10**6 if cfg["n_paths"] is None else cfg["n_paths"]
        if n_paths < 1:
            raise ConfigError("n_paths must be positive")
        spec = problem.forward
        dens = oracles.fft_density(lambda u: oracles.cgmy_char_fn(spec, u, problem.T))
        samples = np.log(np.concatenate([x[:, 0] for x in paths.iter_terminal(problem, rng, n_paths)]))
        threshold = 0.02
    l1 = oracles.histogram_l1(dens, samples, bins)
    return {"l1": l1, "threshold": threshold, "pass": l1 < threshold, "n_paths": int(samples.size),
            "bins": bins, "control": cfg["control"]}, dens, samples


def cmd_density_check(cfg):
    result, dens, samples = density_check(cfg)
    lo, hi = np.quantile(samples, [1e-3, 1 - 1e-3])
    hist, edges = np.histogram(samples, cfg["bins"], (lo, hi))
    centers = 0.5 * (edges[1:] + edges[:-1])
    emp = hist / (samples.size * np.diff(edges))
    mask = (dens.x >= lo) & (dens.x <= hi)
    stride = max(1, int(mask.sum() // 800))
    _write(cfg["out"], "density.svg", line_chart(
        [(dens.x[mask][::stride].tolist(), dens.density[mask][::stride].tolist(), "Fourier density"),
         (centers.tolist(), emp.tolist(), "empirical histogram")],
        "Terminal log-price density", "log price", "density"))
    _write(cfg["out"], "density_check.json", json.dumps(result, indent=2))
    return result


COMMANDS = {"run": cmd_run, "sweep-dim": cmd_sweep_dim, "sweep-lambda": cmd_sweep_lambda,
            "sweep-iters": cmd_sweep_iters, "eps-study": cmd_eps_study, "density-check": cmd_density_check}


def build_parser():
    parser = argparse.ArgumentParser(prog="jumpbsde", description="Deep BSDE solver for jump FBSDEs")
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--paper-scale", action="store_true", help="use the full experiment sizes")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        user = load_config(args.config) if args.config else {}
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = resolve_config(args.verb, user, args.seed, args.out, args.paper_scale)
        os.makedirs(cfg["out"], exist_ok=True)
        result = COMMANDS[args.verb](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc} {json.dumps(exc.diagnostics)}", file=sys.stderr)
        return EXIT_NUMERIC
    _metadata(cfg["out"], started, time.perf_counter() - t0, {"verb": args.verb})
    print(json.dumps(result if args.verb != "run" else {k: v for k, v in result.items() if k != "config"},
                     indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
