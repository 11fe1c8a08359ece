"""Command-line front end: ``adaptive-kernel {train,spectrum,verify,k0-table,ridge-compare}``.

Configs are flat TOML (or JSON) tables whose keys mirror the library's field
names; ``--set key=value`` overrides are applied after the file is parsed.
Every run writes ``config.json`` with the fully resolved configuration.

Exit codes: 0 success, 1 a hard verification check failed, 2 bad
configuration, 3 divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import re
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from threadpoolctl import threadpool_limits

from . import __version__
from .dynamics import Dataset, DivergenceError, FlowConfig, run_flow
from .experiments import (ExperimentSpec, gen_random_labels, gen_teacher, load_csv,
                          run_spectrum_experiment, write_experiment)
from .io import atomic_write
from .model import ConfigError, InitSpec, init_network
from .verify import SUITES, k0_table, ridge_sweep, run_suites

log = logging.getLogger("adaptive_kernel")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

FLOW_KEYS = {"eta": None, "max_steps": 10_000, "lam": 0.0, "eps_grad": 1e-8, "loss": "squared",
             "alpha": 1.0, "log_every": 100}
DATA_KEYS = {"kind": "teacher", "n": 50, "d": 5, "J": 2, "seed": 0, "csv_path": None,
             "target_column": None, "normalize": True}
INIT_KEYS = {"m": 500, "init": "balanced-from-measure", "radius": 1.0, "m_plus": None,
             "gap": 1.0}

DEFAULTS = {
    "train": {**DATA_KEYS, **INIT_KEYS, **FLOW_KEYS},
    "spectrum": {**DATA_KEYS, **INIT_KEYS, **FLOW_KEYS, "init": "gaussian-rademacher",
                 "max_steps": 100_000, "eps_grad": 1e-6, "schedule": None, "per_decade": 1,
                 "keep": 0.8, "experiment_id": None},
    "verify": {"suites": sorted(SUITES), "seed": None},
    "k0-table": {"grid": 21, "m_samples": 100_000, "d": 5, "seed": 0},
    "ridge-compare": {"lams": [0.1, 0.01, 0.001], "n": 20, "m": 100, "d": 5, "J": 2,
                      "eta": 0.05, "max_steps": 300_000, "seed": 0, "n_eval": 200,
                      "radius": 1.0},
}


class ConfigParseError(Exception):
    """Bad config file or override; reported with exit code 2."""


# -- config handling ----------------------------------------------------------


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _toml_error_line(err, text: str) -> int:
    line = getattr(err, "lineno", None)
    if line:
        return int(line)
    found = re.search(r"line (\d+)", str(err))
    if found:
        return int(found.group(1))
    # errors "at end of document" point past the last line
    return max(1, len(text.splitlines()))


def load_config(command: str, path=None, overrides=()) -> dict:
    """Defaults for ``command``, updated by the file at ``path`` and then by ``key=value`` pairs."""
    cfg = dict(DEFAULTS[command])
    doc = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigParseError(f"cannot read config {path}: {err}") from err
        if path.suffix == ".json":
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as err:
                raise ConfigParseError(f"{path}: malformed JSON at line {err.lineno}: "
                                       f"{err.msg}") from err
        else:
            try:
                doc = tomllib.loads(text)
            except tomllib.TOMLDecodeError as err:
                raise ConfigParseError(f"{path}: malformed TOML at line "
                                       f"{_toml_error_line(err, text)}: {err}") from err
        if not isinstance(doc, dict):
            raise ConfigParseError(f"{path}: top level must be a table")
    for item in overrides:
        if "=" not in item:
            raise ConfigParseError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        doc[key.strip()] = _parse_value(value.strip())
    unknown = sorted(set(doc) - set(cfg))
    if unknown:
        raise ConfigParseError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg.update(doc)
    return cfg


def _flow(cfg) -> FlowConfig:
    return FlowConfig(**{k: cfg[k] for k in FLOW_KEYS})


def _dataset(cfg) -> Dataset:
    if cfg["kind"] == "teacher":
        return gen_teacher(cfg["n"], cfg["d"], cfg["J"], cfg["seed"])[0]
    if cfg["kind"] == "random-label":
        return gen_random_labels(cfg["n"], cfg["d"], cfg["seed"])
    if cfg["kind"] == "csv":
        if cfg["csv_path"] is None or cfg["target_column"] is None:
            raise ConfigError("kind='csv' needs csv_path and target_column")
        return load_csv(cfg["csv_path"], str(cfg["target_column"]), cfg["normalize"])
    raise ConfigError(f"unknown data kind {cfg['kind']!r}")


def _echo(out: Path, command: str, cfg: dict, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, "config": cfg}
    if extra:
        doc.update(extra)
    atomic_write(out / "config.json", json.dumps(doc, indent=2, default=float))


# -- subcommands --------------------------------------------------------------


def cmd_train(cfg: dict, out: Path) -> int:
    data = _dataset(cfg)
    flow = _flow(cfg)
    spec = InitSpec(cfg["init"], seed=cfg["seed"], radius=cfg["radius"], m_plus=cfg["m_plus"],
                    gap=cfg["gap"])
    net0 = init_network(spec, cfg["m"], data.d)
    try:
        res = run_flow(net0, data, flow)
    except DivergenceError as err:
        if err.log is not None:
            atomic_write(out / "trajectory.csv", err.log.to_csv())
        _echo(out, "train", cfg, {"termination": "diverged", "message": str(err)})
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    atomic_write(out / "trajectory.csv", res.log.to_csv())
    atomic_write(out / "network.json", res.net.to_json())
    summary = res.summary()
    _echo(out, "train", cfg, {"resolved_eta": res.eta, "result": summary})
    print(json.dumps(summary, default=float))
    return EXIT_OK


def cmd_spectrum(cfg: dict, out: Path) -> int:
    flow = _flow(cfg)
    fields = ("kind", "n", "d", "m", "J", "seed", "init", "radius", "schedule", "per_decade",
              "keep", "csv_path", "target_column", "normalize", "experiment_id")
    spec = ExperimentSpec(flow=flow, **{k: cfg[k] for k in fields})
    try:
        series, res = run_spectrum_experiment(spec)
    except DivergenceError as err:
        atomic_write(out / "spectra.csv", err.series.to_csv())
        _echo(out, "spectrum", cfg, {"termination": "diverged", "message": str(err)})
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    write_experiment(out, spec, series, res)
    _echo(out, "spectrum", cfg, {"resolved_eta": res.eta, "result": res.summary(),
                                 "stabilization": series.stabilization})
    print(json.dumps({**res.summary(), "stabilization": series.stabilization}, default=float))
    return EXIT_OK


def cmd_verify(cfg: dict, out: Path) -> int:
    suites = cfg["suites"]
    if isinstance(suites, str):
        suites = [s.strip() for s in suites.split(",") if s.strip()]
    unknown = [s for s in suites if s not in SUITES]
    if unknown:
        raise ConfigParseError(f"unknown suite(s) {unknown}; available: {sorted(SUITES)}")
    checks = run_suites(suites, seed=cfg["seed"])
    report = [c.to_dict() for c in checks]
    atomic_write(out / "report.json", json.dumps(report, indent=2, default=float))
    hard_fail = [c for c in checks if c.hard and not c.passed]
    for c in checks:
        status = "PASS" if c.passed else ("FAIL" if c.hard else "WARN")
        print(f"{status} {c.suite} {c.instance} {c.metric}={c.value!r} bound={c.bound!r}")
    _echo(out, "verify", {**cfg, "suites": suites},
          {"checks": len(checks), "hard_failures": len(hard_fail)})
    return EXIT_CHECK_FAILED if hard_fail else EXIT_OK


def cmd_k0_table(cfg: dict, out: Path) -> int:
    rows = k0_table(cfg["grid"], cfg["m_samples"], cfg["d"], cfg["seed"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("t", "closed_form", "monte_carlo", "std_error"))
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    atomic_write(out / "k0_table.csv", buf.getvalue())
    _echo(out, "k0-table", cfg)
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_ridge_compare(cfg: dict, out: Path) -> int:
    rows = ridge_sweep(tuple(cfg["lams"]), cfg["n"], cfg["m"], cfg["d"], cfg["J"],
                       eta=cfg["eta"], max_steps=cfg["max_steps"], seed=cfg["seed"],
                       n_eval=cfg["n_eval"], radius=cfg["radius"])
    cols = ("lam", "lam_eff", "max_gap_eval", "max_gap_train", "grad_norm", "grad_norm_w",
            "ratio", "rank_H", "nn_train_residual", "velocity_identity_err", "termination",
            "steps")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] for c in cols])
    atomic_write(out / "ridge_compare.csv", buf.getvalue())
    _echo(out, "ridge-compare", cfg)
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "spectrum": cmd_spectrum, "verify": cmd_verify,
            "k0-table": cmd_k0_table, "ridge-compare": cmd_ridge_compare}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptive-kernel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML (or .json) config file")
        sp.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key; repeatable")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _thread_limit():
    raw = os.environ.get("ADAPTIVE_KERNEL_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    n = int(raw)
    return threadpool_limits(limits=max(n, 1))  # 0 means sequential


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or Path("runs") / args.command)
    try:
        cfg = load_config(args.command, args.config, args.overrides)
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit():
            return COMMANDS[args.command](cfg, out)
    except (ConfigParseError, ConfigError) as err:
        print(f"adaptive-kernel: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, ValueError) as err:
        # ill-typed config values surface here from the library constructors
        print(f"adaptive-kernel: invalid configuration: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
