"""Command-line interface: ``scopfit fit|predict|simulate|plotdata|acf``.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
from scipy import linalg

from .data import DataTable, read_csv, write_csv
from .formula import FormulaError
from .model import fit_model, load_model, save_model
from .plotdata import heatmap_svg, line_svg, write_table
from .simulate import SCENARIOS, simulate

__all__ = ["main"]

log = logging.getLogger("scopfit")


class NumericFailure(RuntimeError):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--formula", help='model formula, e.g. "y ~ s(x, bs=mpi) + z"')
    p.add_argument("--family", default="gaussian", choices=["gaussian", "binomial", "poisson"])
    p.add_argument("--link", default=None, help="link function (default: canonical)")
    p.add_argument("--criterion", default="auto", choices=["auto", "gcv", "ubre"])
    p.add_argument("--optimizer", default="efs", choices=["efs"])
    p.add_argument("--gamma", type=float, default=1.0, help="criterion inflation factor")
    p.add_argument("--ar1-rho", default=None, help="AR1 correlation: a number or 'search'")
    p.add_argument("--ar-start", default=None, help="column flagging the first row of each block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output path")
    return p


def build_parser(fit_defaults: dict | None = None) -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="scopfit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="fit a model to a CSV file")
    f.add_argument("data")
    f.add_argument("--factors", default="", help="comma-separated columns to read as factors")
    f.add_argument("--rho-grid", default=None, help="comma-separated AR1 search grid")
    f.add_argument("--summary", default=None, help="also write the summary to this path")
    f.add_argument("--config", default=None,
                   help="JSON run config; its fields are defaults that flags override")
    f.set_defaults(**(fit_defaults or {}))

    p = sub.add_parser("predict", parents=[common], help="predict from a saved model")
    p.add_argument("model")
    p.add_argument("newdata")
    p.add_argument("--type", default="response", choices=["response", "link"])
    p.add_argument("--terms", action="store_true", help="add per-term contributions")
    p.add_argument("--extrapolate", action="store_true", help="allow covariates outside the range")
    p.add_argument("--factors", default="")

    s = sub.add_parser("simulate", parents=[common], help="write a simulated data set")
    s.add_argument("scenario", choices=sorted(SCENARIOS))
    s.add_argument("--n", type=int, default=None,
                   help="rows (groups for sitka-like)")
    s.add_argument("--rho", type=float, default=None, help="AR1 correlation (sitka-like)")
    s.add_argument("--per-group", type=int, default=None, help="observations per group (sitka-like)")

    d = sub.add_parser("plotdata", parents=[common], help="emit plot data for a model term")
    d.add_argument("model")
    d.add_argument("--term", required=True, help="term label, covariate name, or 'acf'")
    d.add_argument("--grid", type=int, default=100)
    d.add_argument("--svg", default=None, help="also write a minimal SVG rendering")

    a = sub.add_parser("acf", parents=[common], help="residual autocorrelation of a model")
    a.add_argument("model")
    a.add_argument("--max-lag", type=int, default=20)
    return parser


CONFIG_FIELDS = ("formula", "family", "link", "criterion", "optimizer", "gamma", "ar1_rho",
                 "ar_start", "seed", "out", "factors", "rho_grid", "summary")


def load_config(path) -> dict:
    """Read a JSON run config into ``fit`` argument defaults."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: invalid JSON config: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_FIELDS))
    if unknown:
        raise ValueError(f"{path}: unknown config field(s) {', '.join(unknown)}")
    cfg = dict(raw)
    for key in ("factors", "rho_grid"):
        if isinstance(cfg.get(key), list):
            cfg[key] = ",".join(str(v) for v in cfg[key])
    if "ar1_rho" in cfg and cfg["ar1_rho"] is not None:
        cfg["ar1_rho"] = str(cfg["ar1_rho"])
    return cfg


def _factors(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _emit(path, columns: dict) -> None:
    if path:
        write_table(path, columns)
        return
    write_table("/dev/stdout", columns)


def cmd_fit(args) -> int:
    if not args.formula:
        raise ValueError("--formula is required")
    data = read_csv(args.data, _factors(args.factors))
    ar1 = args.ar1_rho
    if ar1 is not None and ar1 != "search":
        try:
            ar1 = float(ar1)
        except ValueError:
            raise ValueError(f"--ar1-rho must be a number or 'search', got {ar1!r}") from None
    grid = None if args.rho_grid is None else np.array([float(v) for v in args.rho_grid.split(",")])
    model = fit_model(args.formula, data, args.family, args.link, args.criterion, args.gamma,
                      args.optimizer, ar1, args.ar_start, grid)
    text = model.summary()
    print(text)
    if args.summary:
        with open(args.summary, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    if args.out:
        save_model(model, args.out)
    if not model.converged:
        raise NumericFailure("fit did not converge: " + "; ".join(model.flags[-3:]))
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    data = read_csv(args.newdata, _factors(args.factors))
    fit, se = model.predict(data, args.type, se=True, extrapolate=args.extrapolate)
    cols = {"fit": fit, "se": se}
    if args.terms:
        terms = model.predict(data, "terms", extrapolate=args.extrapolate)
        for j, label in enumerate(model.labels):
            cols[label] = terms[:, j]
    _emit(args.out, cols)
    return 0


def cmd_simulate(args) -> int:
    kw = {}
    if args.rho is not None:
        kw["rho"] = args.rho
    if args.per_group is not None:
        kw["per_group"] = args.per_group
    if kw and args.scenario != "sitka-like":
        raise ValueError("--rho/--per-group apply to sitka-like only")
    table = simulate(args.scenario, seed=args.seed, n=args.n, **kw)
    write_csv(args.out or "/dev/stdout", table)
    return 0


def cmd_plotdata(args) -> int:
    model = load_model(args.model)
    if args.term == "acf":
        cols = model.residual_acf(20)
        _emit(args.out, cols)
        if args.svg:
            series = {k: v for k, v in cols.items() if k != "lag"}
            _write(args.svg, line_svg(cols["lag"], series, "residual ACF"))
        return 0
    cols, kind = model.term_curve(args.term, args.grid)
    _emit(args.out, cols)
    if args.svg:
        label = model.labels[model.term(args.term)]
        if kind == "surface":
            names = list(cols)
            svg = heatmap_svg(cols[names[0]], cols[names[1]], cols["fit"], label)
        elif kind == "levels":
            svg = line_svg(np.arange(len(cols["fit"])), {"fit": cols["fit"]}, label)
        else:
            x = cols[next(iter(cols))]
            svg = line_svg(x, {"fit": cols["fit"], "lower": cols["lower"], "upper": cols["upper"]},
                           label, dashed=("lower", "upper"))
        _write(args.svg, svg)
    return 0


def cmd_acf(args) -> int:
    model = load_model(args.model)
    cols = model.residual_acf(args.max_lag)
    print(f"acf1 raw = {cols['raw'][1]:.6f}")
    if "standardized" in cols:
        print(f"acf1 standardized = {cols['standardized'][1]:.6f}")
    if args.out:
        write_table(args.out, cols)
    return 0


def _write(path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate,
            "plotdata": cmd_plotdata, "acf": cmd_acf}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    config_path = pre.parse_known_args(argv)[0].config
    defaults = None
    if config_path:
        try:
            defaults = load_config(config_path)
        except (OSError, ValueError) as exc:
            print(f"scopfit: error: {exc}", file=sys.stderr)
            return 2
    args = build_parser(defaults).parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FormulaError as exc:
        tok = f" near {exc.token!r}" if exc.token else ""
        print(f"scopfit: formula error{tok}: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"scopfit: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        print(f"scopfit: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"scopfit: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
