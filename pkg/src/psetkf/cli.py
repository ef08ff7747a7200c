"""Command-line front end: ``psetkf {simulate,sweep,bounds,verify}``.

Configuration is a YAML document; every scalar key can be overridden by a
flag. Outputs are written to temporary names and renamed into place, with a
``manifest.json`` describing the run next to them.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .analysis import invert_rate_bounds, rate_bounds
from .errors import CNotFullRowRank, PsetError
from .harness import (ExperimentConfig, identity_battery, run_experiment, run_trials,
                      verify_posterior)
from .matgauss import GaussianBelief
from .model import SCENARIOS, REFERENCE_C, REFERENCE_RATES, LtiSystem
from .pset import ESTIMATORS, TriggerConfig, inject_correction_sign_flip

log = logging.getLogger("psetkf")

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_VALIDATE = 2
EXIT_RUNTIME = 3
EXIT_RANK = 4
EXIT_VERIFY = 5

DEFAULTS = {
    "scenario": "target_tracking",
    "c_grid": [12.0],
    "trials": 200,
    "horizon": 300,
    "seed": 0,
    "estimators": list(ESTIMATORS),
    "out": "out",
    "dump_steps": False,
    "target_rate": None,
    "bounds": {"c_min": 1e-3, "c_max": 1e4, "points": 29},
    "verify": {"instances": 1000, "steps": 50, "grid_points": 10001},
    "system": None,
}

VERIFY_TOLERANCES = {"mean": 1e-6, "rel_var": 1e-4, "silence_prob": 1e-6}


class ConfigError(Exception):
    """Invalid configuration; ``code`` is the process exit code."""

    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- config ------------------------------------------------------------------

def load_config(path: Optional[str]) -> dict:
    """Read a YAML config (or a previous run's manifest.json) as a dict."""
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", EXIT_PARSE) from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}", EXIT_PARSE) from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping at top level", EXIT_PARSE)
    if "command" in doc and isinstance(doc.get("config"), dict):
        doc = doc["config"]
    return doc


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = dict(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}", EXIT_VALIDATE)
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = _merge(DEFAULTS, load_config(args.config))
    flat = {"seed": args.seed, "trials": args.trials, "horizon": args.horizon,
            "scenario": args.scenario, "out": args.out, "target_rate": args.target_rate,
            "estimators": args.estimators, "c_grid": args.c_grid}
    for key, val in flat.items():
        if val is not None:
            cfg[key] = val
    if args.dump_steps:
        cfg["dump_steps"] = True
    for section, key, val in (("bounds", "c_min", args.c_min), ("bounds", "c_max", args.c_max),
                              ("bounds", "points", args.points),
                              ("verify", "steps", args.steps),
                              ("verify", "grid_points", args.grid_points)):
        if val is not None:
            cfg[section] = {**cfg[section], key: val}
    return cfg


def _as_list(val, name):
    if isinstance(val, str):
        val = [v for v in val.replace(",", " ").split() if v]
    if isinstance(val, (int, float)):
        val = [val]
    if not isinstance(val, (list, tuple)):
        raise ConfigError(f"{name} must be a list", EXIT_VALIDATE)
    return list(val)


def _custom_builder(block: dict):
    """Scenario builder for a user-supplied plant; ``Γ = c · gamma``."""
    required = {"A", "C", "Q", "R", "gamma"}
    missing = required - set(block)
    extra = set(block) - required - {"x0_mean", "x0_cov"}
    if missing or extra:
        raise ConfigError(f"system needs keys {sorted(required)} (plus optional x0_mean, "
                          f"x0_cov); missing {sorted(missing)}, unknown {sorted(extra)}",
                          EXIT_VALIDATE)
    A = np.atleast_2d(np.array(block["A"], dtype=float))
    n = A.shape[0]
    x0 = GaussianBelief(np.array(block.get("x0_mean", np.zeros(n)), dtype=float),
                        np.array(block.get("x0_cov", np.eye(n)), dtype=float))
    plant = LtiSystem(A, block["C"], block["Q"], block["R"], x0)
    gamma = np.atleast_2d(np.array(block["gamma"], dtype=float))

    def build(c: float):
        if not c > 0:
            raise ValueError(f"scale c must be positive, got {c}")
        return plant, TriggerConfig(c * gamma)

    return build


def validate(cfg: dict) -> dict:
    """Coerce types and check ranges; raises ConfigError with exit code 2."""
    try:
        out = dict(cfg)
        out["seed"] = int(cfg["seed"])
        if not 0 <= out["seed"] < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        out["trials"] = int(cfg["trials"])
        out["horizon"] = int(cfg["horizon"])
        out["c_grid"] = [float(c) for c in _as_list(cfg["c_grid"], "c_grid")]
        out["estimators"] = [str(e) for e in _as_list(cfg["estimators"], "estimators")]
        out["out"] = str(cfg["out"])
        out["dump_steps"] = bool(cfg["dump_steps"])
        if cfg["target_rate"] is not None:
            out["target_rate"] = float(cfg["target_rate"])
            if not 0.0 <= out["target_rate"] <= 1.0:
                raise ValueError("target_rate must lie in [0, 1]")
        b = {k: float(v) for k, v in cfg["bounds"].items()}
        b["points"] = int(b["points"])
        if not 0 < b["c_min"] < b["c_max"] or b["points"] < 2:
            raise ValueError("bounds need 0 < c_min < c_max and points >= 2")
        out["bounds"] = b
        out["verify"] = {k: int(v) for k, v in cfg["verify"].items()}
        if cfg["system"] is not None:
            out["builder"] = _custom_builder(dict(cfg["system"]))
            out["scenario"] = "custom"
        elif cfg["scenario"] not in SCENARIOS:
            raise ValueError(f"unknown scenario {cfg['scenario']!r}; "
                             f"choose from {sorted(SCENARIOS)}")
        out["experiment"] = ExperimentConfig(out["scenario"], tuple(out["c_grid"]),
                                             out["trials"], out["horizon"], out["seed"],
                                             tuple(out["estimators"]), out.get("builder"))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError, PsetError) as exc:
        raise ConfigError(f"invalid config: {exc}", EXIT_VALIDATE) from None
    return out


def config_echo(cfg: dict) -> dict:
    """Resolved config as plain data (the part of a manifest that reruns it)."""
    return {k: cfg[k] for k in DEFAULTS}


# -- output ------------------------------------------------------------------

def fmt(x) -> str:
    """17 significant digits, so the text round-trips to the same double."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return format(float(x), ".17g")


def write_atomic(path: Path, text: str):
    """Write ``text`` to a temporary file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


class Run:
    """Output set of one command: files plus the manifest written last."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.started = datetime.now(timezone.utc).isoformat()
        self.files: list[str] = []

    def write_csv(self, name: str, header, rows):
        write_atomic(self.out / name, csv_text(header, rows))
        self.files.append(name)

    def finish(self, extra: Optional[dict] = None):
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg["seed"],
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "outputs": self.files,
            "config": config_echo(self.cfg),
        }
        if extra:
            manifest.update(extra)
        write_atomic(self.out / "manifest.json", json.dumps(manifest, indent=2) + "\n")


METRICS_HEADER = ("estimator", "c", "k", "E_k", "T_k", "rate")
STEPS_HEADER = ("estimator", "c", "trial", "k", "varsigma", "rho", "no_send_prob", "sq_err")


def _write_experiment(run: Run, cfg: dict):
    exp = cfg["experiment"]
    result = run_experiment(exp, keep_batches=cfg["dump_steps"])
    rows = []
    for est in exp.estimators:
        for c in exp.c_grid:
            m = result.metrics[(est, c)]
            for k in range(exp.horizon):
                rows.append((est, c, k + 1, m.E_k[k], m.T_k[k], m.rate))
    run.write_csv("metrics.csv", METRICS_HEADER, rows)
    if cfg["dump_steps"]:
        def step_rows():
            for est in exp.estimators:
                for c in exp.c_grid:
                    b = result.batches[(est, c)]
                    for i in range(b.sends.shape[0]):
                        for k in range(b.sends.shape[1]):
                            yield (est, c, i, k + 1, b.sends[i, k], b.rho[i, k],
                                   b.no_send_prob[i, k], b.sq_err[i, k])
        run.write_csv("steps.csv", STEPS_HEADER, step_rows())
    return result


# -- commands ----------------------------------------------------------------

def cmd_simulate(cfg: dict) -> int:
    run = Run("simulate", cfg)
    result = _write_experiment(run, cfg)
    for (est, c), m in result.metrics.items():
        print(f"{est:>7} c={c:<10g} rate={m.rate:.4f} E(K)={m.E_k[-1]:.6g} "
              f"T(K)={m.T_k[-1]:.6g}")
    run.finish()
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    if cfg["scenario"] not in REFERENCE_C:
        raise ConfigError("sweep needs a named scenario with a reference c grid",
                          EXIT_VALIDATE)
    grid = list(REFERENCE_C[cfg["scenario"]])
    exp = cfg["experiment"]
    cfg = {**cfg, "c_grid": grid,
           "experiment": ExperimentConfig(exp.scenario, tuple(grid), exp.trials,
                                          exp.horizon, exp.seed, exp.estimators)}
    run = Run("sweep", cfg)
    result = _write_experiment(run, cfg)
    rows = []
    for target, c in zip(REFERENCE_RATES, grid):
        sys_, trig = cfg["experiment"].build(c)
        rb = rate_bounds(sys_, trig)
        if ("pset", c) in result.metrics:
            emp = result.metrics[("pset", c)].rate
        else:
            emp = run_trials(sys_, "pset", exp.trials, exp.horizon, exp.seed, trig).rate
        rows.append((c, target, emp, rb.rate_lower, rb.rate_upper))
        print(f"c={c:<10g} target={target:.1f} empirical={emp:.4f} "
              f"bounds=[{rb.rate_lower:.4f}, {rb.rate_upper:.4f}]")
    run.write_csv("sweep.csv", ("c", "target_rate", "empirical_rate", "rate_lower",
                                "rate_upper"), rows)
    run.finish()
    return EXIT_OK


def cmd_bounds(cfg: dict) -> int:
    b = cfg["bounds"]
    build = cfg["experiment"].build
    grid = np.geomspace(b["c_min"], b["c_max"], b["points"])
    rows = []
    for c in grid:
        rb = rate_bounds(*build(float(c)))
        rows.append((float(c), rb.rate_lower, rb.rate_upper,
                     float(np.trace(rb.p_lower)), float(np.trace(rb.p_upper))))
    lo, hi = np.array([r[1] for r in rows]), np.array([r[2] for r in rows])
    if np.any(np.diff(lo) < -1e-9) or np.any(np.diff(hi) < -1e-9):
        warnings.warn("rate bounds are not monotone over the c grid", RuntimeWarning)
    run = Run("bounds", cfg)
    run.write_csv("bounds.csv", ("c", "rate_lower", "rate_upper", "trace_p_lower",
                                 "trace_p_upper"), rows)
    extra = None
    if cfg["target_rate"] is not None:
        r = cfg["target_rate"]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            c_upper, c_lower = invert_rate_bounds(build, r, b["c_min"], b["c_max"])
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        interval = [c_upper, c_lower]
        print(f"target rate {r}: c in [{fmt(c_upper)}, {fmt(c_lower)}]")
        run.write_csv("interval.csv", ("target_rate", "c_upper_bound_hit", "c_lower_bound_hit"),
                      [(r, c_upper, c_lower)])
        extra = {"target_rate": r, "interval": interval}
    run.finish(extra)
    return EXIT_OK


def cmd_verify(cfg: dict, inject_fault: bool = False) -> int:
    v = cfg["verify"]
    instances = cfg["trials"] if cfg.get("_trials_given") else v["instances"]
    scalar = LtiSystem([[1.0]], [[1.0]], [[1.0]], [[1.0]], GaussianBelief([0.0], [[2.0]]))
    ctx = inject_correction_sign_flip() if inject_fault else contextlib.nullcontext()
    failures = []
    with ctx:
        t0 = time.perf_counter()
        try:
            rep = verify_posterior(scalar, TriggerConfig([[1.0]]), v["steps"],
                                   v["grid_points"], cfg["seed"])
            post = [("posterior_mean", rep.max_mean_dev, VERIFY_TOLERANCES["mean"]),
                    ("posterior_rel_var", rep.max_rel_var_dev, VERIFY_TOLERANCES["rel_var"]),
                    ("silence_probability", rep.max_prob_dev,
                     VERIFY_TOLERANCES["silence_prob"])]
        except (PsetError, ArithmeticError, np.linalg.LinAlgError) as exc:
            post = [("posterior_oracle", math.inf, 0.0)]
            print(f"posterior oracle raised {type(exc).__name__}: {exc}", file=sys.stderr)
        checks = post + [(c.name, c.worst, c.tolerance)
                         for c in identity_battery(instances, cfg["seed"])]
        elapsed = time.perf_counter() - t0
    for name, worst, tol in checks:
        ok = worst <= tol
        if not ok:
            failures.append(name)
        print(f"{'PASS' if ok else 'FAIL'} {name:<36} max deviation {worst:.3e} "
              f"(tolerance {tol:.0e})")
    print(f"{len(checks) - len(failures)}/{len(checks)} checks passed in {elapsed:.2f} s")
    if failures:
        print(f"tolerance breached: {', '.join(failures)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config or a manifest.json")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed")
    common.add_argument("--trials", type=int, metavar="M", help="Monte Carlo trials "
                        "(verify: randomized instances per identity check)")
    common.add_argument("--horizon", type=int, metavar="K", help="steps per trial")
    common.add_argument("--scenario", choices=sorted(SCENARIOS))
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--target-rate", type=float, metavar="FLOAT",
                        help="bounds: report the c interval for this rate")
    common.add_argument("--estimators", metavar="LIST", help="comma list of "
                        + ",".join(ESTIMATORS))
    common.add_argument("--c-grid", metavar="LIST", help="comma list of scale factors c")
    common.add_argument("--dump-steps", action="store_true", help="also write steps.csv")
    common.add_argument("--c-min", type=float, help="bounds: smallest c")
    common.add_argument("--c-max", type=float, help="bounds: largest c")
    common.add_argument("--points", type=int, help="bounds: log-grid size")
    common.add_argument("--steps", type=int, help="verify: filter steps for the posterior oracle")
    common.add_argument("--grid-points", type=int, help="verify: oracle grid size")
    common.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="psetkf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run estimators over a c grid")
    sub.add_parser("sweep", parents=[common], help="simulate over the reference c grid "
                   "and compare with the rate bounds")
    sub.add_parser("bounds", parents=[common], help="rate bounds over a log c grid")
    sub.add_parser("verify", parents=[common], help="posterior oracle and identity checks")
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = validate(resolve_config(args))
        cfg["_trials_given"] = args.trials is not None
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "bounds":
            return cmd_bounds(cfg)
        return cmd_verify(cfg, inject_fault=args.inject_fault)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CNotFullRowRank as exc:
        print(f"error: {exc}; rate bounds need a full-row-rank C", file=sys.stderr)
        return EXIT_RANK
    except Exception as exc:  # noqa: BLE001 - report, do not dump a traceback
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
