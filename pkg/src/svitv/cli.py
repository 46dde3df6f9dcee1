"""Command-line entry point: ``svitv <command> --config FILE``.

Commands write their products to the output directory and print a one-line
JSON summary on stdout.  Failures print one JSON line on stderr and exit
with status 2 (bad configuration or usage) or 1 (run-time failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .config import ConfigError, initial_field, load_config
from .fields import validate_assumption
from .io import write_pgm, write_snapshot
from .operators import stencil
from .sde import (COLUMNS, _mean_record, ensemble, ensemble_path, simulate,
                  stability_number)
from .svi import constant_spec, regularization_sweep, regularized_spec, svi_check


class AssumptionFailure(RuntimeError):
    pass


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([_fmt(v) for v in row])


def _write_diagnostics(path, record):
    rows = ((int(r[0]), *r[1:]) for r in record.rows())
    _write_csv(path, COLUMNS, rows)


def _setup(args, mode):
    cfg = load_config(args.config, mode)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(["--seed: must be an unsigned 64-bit integer"])
        cfg.base_seed = args.seed
    if args.paths is not None:
        if args.paths < 1:
            raise ConfigError(["--paths: must be >= 1"])
        cfg.n_paths = args.paths
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError(["--workers: must be >= 1"])
        cfg.workers = args.workers
    out = args.out or (cfg.out_dir if os.path.isabs(cfg.out_dir)
                       else os.path.join(cfg.base_dir, cfg.out_dir))
    os.makedirs(out, exist_ok=True)
    return cfg, out


def cmd_validate(args):
    cfg, _ = _setup(args, "validate")
    summary = {"command": "validate", "domain": cfg.grid.kind,
               "nodes": cfg.grid.size, "n_fields": len(cfg.fields),
               "stability_number": stability_number(cfg.fields, cfg.params.dt)}
    if cfg.fields:
        report = validate_assumption(cfg.fields, cfg.grid)
        print(report.table())
        summary["assumption_passed"] = bool(report.passed)
        if not report.passed:
            raise AssumptionFailure("fields: assumption check failed")
    return summary


def cmd_simulate(args):
    cfg, out = _setup(args, "simulate")
    p = cfg.params
    x0 = initial_field(cfg.initial, cfg.grid)
    files = []
    traj = simulate(x0, p, path=ensemble_path(p, cfg.base_seed, 0),
                    stride=cfg.stride)
    if "svif" in cfg.formats:
        for k, t, snap in zip(traj.steps, traj.times, traj.snapshots):
            name = os.path.join(out, f"snapshot_{int(k):06d}.svif")
            write_snapshot(name, snap, cfg.grid, t, int(k))
            files.append(name)
    record = traj.diagnostics
    if cfg.n_paths > 1:
        record = ensemble(x0, p, cfg.n_paths, cfg.base_seed,
                          workers=cfg.workers).mean
    if "csv" in cfg.formats:
        name = os.path.join(out, "diagnostics.csv")
        _write_diagnostics(name, record)
        files.append(name)
    return {"command": "simulate", "steps": p.steps, "n_paths": cfg.n_paths,
            "snapshots": len(traj.steps), "outputs": files}


def cmd_denoise(args):
    cfg, out = _setup(args, "denoise")
    p = cfg.params
    f = initial_field(cfg.initial, cfg.grid)
    finals, records = [], []
    for k in range(cfg.n_paths):
        traj = simulate(f, p, path=ensemble_path(p, cfg.base_seed, k),
                        stride=p.steps)
        finals.append(traj.snapshots[-1])
        records.append(traj.diagnostics)
    image = np.mean(finals, axis=0)
    name = os.path.join(out, cfg.denoise_output)
    write_pgm(name, image, cfg.denoise_bits)
    diag = os.path.join(out, "diagnostics.csv")
    _write_diagnostics(diag, _mean_record(records))
    return {"command": "denoise", "n_paths": cfg.n_paths,
            "outputs": [name, diag]}


def cmd_svi_check(args):
    cfg, out = _setup(args, "svi-check")
    p = cfg.params
    x0 = initial_field(cfg.initial, cfg.grid)
    if cfg.svi_test == "constant":
        w = stencil(cfg.grid).weights
        c = (cfg.svi_value if cfg.svi_value is not None
             else float(np.dot(w, x0.ravel()) / w.sum()))
        spec = constant_spec(c)
    else:
        zp = replace(p, eps=p.eps if cfg.svi_eps is None else cfg.svi_eps,
                     lam=p.lam if cfg.svi_lambda is None else cfg.svi_lambda,
                     check_fields=False)
        spec = regularized_spec(initial_field(cfg.svi_z0, cfg.grid, x0), zp)
    report = svi_check(x0, p, spec, cfg.n_paths, cfg.base_seed)
    name = os.path.join(out, "svi.csv")
    _write_csv(name, ("step", "time", "lhs", "rhs", "gap"),
               ((k, *row) for k, row in enumerate(report.rows())))
    return {"command": "svi-check", "test": cfg.svi_test,
            "n_paths": cfg.n_paths,
            "worst_excursion": report.worst_excursion(), "outputs": [name]}


def cmd_sweep(args):
    cfg, out = _setup(args, "sweep")
    x0 = initial_field(cfg.initial, cfg.grid)
    table = regularization_sweep(x0, cfg.params, cfg.sweep, cfg.n_paths,
                                 cfg.base_seed)
    name = os.path.join(out, "sweep.csv")
    _write_csv(name, ("eps_a", "lambda_a", "delta_a", "eps_b", "lambda_b",
                      "delta_b", "distance"), table.rows())
    ref = (len(cfg.sweep) - 1 if cfg.sweep_reference is None
           else cfg.sweep_reference)
    fits = []
    for col, pname in enumerate(("eps", "lam", "delta")):
        others = {e[col] for i, e in enumerate(cfg.sweep) if i != ref}
        if len(others) < 2:
            continue
        try:
            fits.append((pname, table.fit_exponent(pname, ref)))
        except ValueError:
            continue
    fit_name = os.path.join(out, "sweep_fit.csv")
    with open(fit_name, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("parameter", "exponent"))
        for pname, e in fits:
            w.writerow((pname, _fmt(e)))
    return {"command": "sweep", "entries": len(cfg.sweep),
            "exponents": dict(fits), "outputs": [name, fit_name]}


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate,
            "denoise": cmd_denoise, "svi-check": cmd_svi_check,
            "sweep": cmd_sweep}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError([f"usage: {message}"])


def build_parser():
    parser = _Parser(prog="svitv", description="Stochastic TV flow experiments.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="configuration file")
        s.add_argument("--seed", type=int, help="override ensemble.base_seed")
        s.add_argument("--out", help="override output.dir")
        s.add_argument("--paths", type=int, help="override ensemble.n_paths")
        s.add_argument("--workers", type=int, help="override ensemble.workers")
    return parser


def _fail(exc, status):
    msg = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        msg["errors"] = exc.errors
    print(json.dumps(msg), file=sys.stderr)
    return status


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        summary = COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(exc, 2)
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        return _fail(exc, 1)
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
