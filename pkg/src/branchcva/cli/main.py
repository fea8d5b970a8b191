"""``branchcva`` command-line entry point.

Exit codes: 0 success, 2 schema or usage error, 3 blow-up refusal,
4 engine failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from typing import Any

from .. import __version__
from ..analysis import blowup_check, criticality, variance_bound
from ..cva import Convention, CvaRequest, Engine, price
from ..errors import BlowUpRefusal, BranchCvaError, ConfigError, ContractViolation
from ..gwtree import Mode
from ..nonlinearity import (PRESETS, Polynomial, fit_bounding, fit_positive_part,
                            optimal_probabilities)
from ..reference.bsde import bsde_solve
from ..reference.fd import FdGrid, PdeProblem, fd_solve
from ..reference.nested_mc import McProblem, nested_mc
from .config import RunConfig, load_config, parse_paths
from .tables import TABLES, format_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_BLOWUP = 3
EXIT_ENGINE = 4


def _pct(v: float) -> float:
    return 100.0 * v


def _emit(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json(payload: dict) -> str:
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


def _csv_row(meta: dict, row: dict) -> str:
    buf = io.StringIO()
    for k, v in meta.items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(row))
    w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
    return buf.getvalue()


def _write(args, cfg: RunConfig | None, meta: dict, result: dict) -> None:
    fmt = args.format or (cfg.output.get("format") if cfg else None) or "json"
    path = args.output or (cfg.output.get("path") if cfg else None)
    if fmt == "csv":
        flat = {k: v for k, v in result.items() if not isinstance(v, (dict, list))}
        _emit(_csv_row(meta, flat), path)
    else:
        _emit(_json(_finite({"meta": meta, "result": result})), path)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    from dataclasses import replace

    kw: dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "paths", None) is not None:
        kw["n_paths"] = parse_paths(args.paths)
    if getattr(args, "workers", None) is not None:
        kw["engine"] = {**cfg.engine, "workers": args.workers}
    return replace(cfg, **kw) if kw else cfg


def _meta(cfg: RunConfig, **extra) -> dict:
    meta = {"version": __version__, "units": "percent", "seed": cfg.seed,
            "mode": cfg.mode.value, "beta": cfg.beta, "T": cfg.T, "recovery": cfg.recovery,
            "payoff": cfg.payoff.tag,
            "nonlinearity": None if cfg.nonlinearity is None else cfg.nonlinearity.to_pairs()}
    meta.update(extra)
    return meta


def _x0_scalar(cfg: RunConfig) -> float:
    if isinstance(cfg.x0, tuple):
        if len(cfg.x0) != 1:
            raise ContractViolation("this engine needs a scalar x0")
        return cfg.x0[0]
    return cfg.x0


def _request(cfg: RunConfig, args) -> CvaRequest:
    if cfg.mode is Mode.TIMEWEIGHTED:
        raise ContractViolation("price supports the nonlinear and mtm modes only")
    if cfg.hazard is not None:
        hazard = cfg.hazard
    elif cfg.recovery < 1.0:
        hazard = cfg.beta / (1.0 - cfg.recovery)
    elif cfg.beta == 0.0:
        hazard = 0.0
    else:
        raise ContractViolation("beta > 0 with full recovery has no hazard rate")
    eng = cfg.engine
    probs = None if cfg.nonlinearity is None else cfg.probs_for(
        cfg.nonlinearity if cfg.mode is Mode.NONLINEAR else _blend(cfg))
    return CvaRequest(
        hazard=hazard, recovery=cfg.recovery, payoff=cfg.payoff, horizon=cfg.T,
        convention=Convention.WITH_PROVISION if cfg.mode is Mode.NONLINEAR
        else Convention.NO_PROVISION,
        engine=Engine(eng.get("name", "branching")), nonlinearity=cfg.nonlinearity,
        spec=cfg.spec, x0=cfg.x0, seed=cfg.seed, n_samples=cfg.n_paths,
        workers=eng.get("workers", 1), n_space=eng.get("n_space", 801),
        n_time=eng.get("n_time", 400), n_outer=eng.get("n_outer", 10_000),
        n_inner=eng.get("n_inner", 100), n_times=eng.get("n_times", 20),
        theta=float(eng.get("theta", 0.5)), n_steps=eng.get("n_steps", 50),
        basis_degree=eng.get("basis_degree", 6), override_blowup=args.override_blowup,
        probs=probs, max_particles=cfg.max_particles, sampler=eng.get("sampler", "batch"))


def _blend(cfg: RunConfig) -> Polynomial:
    from ..nonlinearity import mtm_transform

    return mtm_transform(cfg.nonlinearity, cfg.recovery)


def cmd_price(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    req = _request(cfg, args)
    res = price(req)
    out = {"risky_value": _pct(res.risky_value), "riskless_value": _pct(res.riskless_value),
           "cva": _pct(res.cva), "engine": res.engine.value,
           "convention": res.convention.value}
    for k, v in res.diagnostics.items():
        out[k] = _pct(v) if k.startswith("stderr") else v
    out["advisory"] = None if res.advisory is None else res.advisory.to_dict()
    meta = _meta(cfg, hazard=req.hazard, engine=req.engine.value, paths=req.n_samples,
                 n_space=req.n_space, n_time=req.n_time)
    _write(args, cfg, meta, out)
    return EXIT_OK


def _pde_problem(cfg: RunConfig) -> PdeProblem:
    R = cfg.recovery if cfg.mode is Mode.MTM else 0.0
    return PdeProblem(cfg.mode, cfg.spec, cfg.payoff, cfg.beta, cfg.T, cfg.nonlinearity,
                      recovery=R, x0=_x0_scalar(cfg))


def _mc_problem(cfg: RunConfig) -> McProblem:
    R = cfg.recovery if cfg.mode is Mode.MTM else 0.0
    return McProblem(cfg.mode, cfg.spec, cfg.payoff, cfg.beta, cfg.T, cfg.nonlinearity,
                     recovery=R, x0=cfg.x0)


def cmd_reference_fd(args) -> int:
    cfg = load_config(args.config)
    p = _pde_problem(cfg)
    ns = args.n_space or cfg.engine.get("n_space", 801)
    nt = args.n_time or cfg.engine.get("n_time", 400)
    sol = fd_solve(p, FdGrid.for_problem(p, ns, nt))
    if args.surface and not sol.diverged:
        sol.to_csv(args.surface)
    out = {"value": math.inf if sol.diverged else _pct(sol.value), "diverged": sol.diverged,
           "divergence_time": sol.divergence_time,
           "picard_max_iterations": sol.picard_max_iterations}
    _write(args, cfg, _meta(cfg, n_space=ns, n_time=nt), out)
    return EXIT_ENGINE if sol.diverged and args.fail_on_divergence else EXIT_OK


def cmd_nested_mc(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    eng = cfg.engine
    n_outer = eng.get("n_outer", 10_000)
    n_inner = eng.get("n_inner", 100)
    n_times = eng.get("n_times", 20)
    est = nested_mc(_mc_problem(cfg), n_outer, n_inner, n_times, cfg.seed,
                    workers=eng.get("workers", 1))
    out = {"value": _pct(est.mean), "stderr": _pct(est.stderr), "inner_paths": est.inner_paths}
    _write(args, cfg, _meta(cfg, n_outer=n_outer, n_inner=n_inner, n_times=n_times), out)
    return EXIT_OK


def cmd_bsde(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    eng = cfg.engine
    kw = dict(theta=float(eng.get("theta", 0.5)), n_steps=eng.get("n_steps", 50),
              basis_degree=eng.get("basis_degree", 6), n_paths=cfg.n_paths, seed=cfg.seed)
    mc = _mc_problem(cfg)
    if not isinstance(cfg.x0, float):
        mc = McProblem(mc.mode, mc.spec, mc.payoff, mc.beta, mc.T, mc.nonlinearity,
                       mc.recovery, _x0_scalar(cfg))
    res = bsde_solve(mc, **kw)
    out = {"value": _pct(res.value), "stderr": _pct(res.stderr)}
    _write(args, cfg, _meta(cfg, **{k: v for k, v in kw.items() if k != "seed"}), out)
    return EXIT_OK


def _poly_from_args(args) -> Polynomial:
    if args.coefficients:
        pairs = []
        for item in args.coefficients.split(","):
            k, _, a = item.partition(":")
            pairs.append((int(k), float(a)))
        return Polynomial.from_pairs(pairs)
    if args.preset not in PRESETS:
        raise ConfigError([f"unknown preset '{args.preset}' (choose from {', '.join(PRESETS)})"])
    return PRESETS[args.preset]


def cmd_analyze(args) -> int:
    poly = _poly_from_args(args)
    report = blowup_check(poly, args.sup_norm, args.beta, args.T)
    comparison = poly.abs()
    probs = optimal_probabilities(comparison, args.sup_norm)
    crit = criticality(probs)
    out = {
        "blowup": report.to_dict(),
        "X": report.X,
        "T_max": report.T_max,
        "T_max_beta": report.T_max * args.beta,
        "converges": report.converges,
        "optimal_probabilities": list(probs.probs),
        "criticality": crit.to_dict(),
        "variance_bound_moment1": variance_bound(comparison, probs, args.sup_norm, args.beta,
                                                 args.T, 1),
        "variance_bound_moment2": variance_bound(poly, optimal_probabilities(poly, args.sup_norm),
                                                 args.sup_norm, args.beta, args.T, 2),
    }
    meta = {"version": __version__, "nonlinearity": poly.to_pairs(), "beta": args.beta,
            "T": args.T, "sup_norm": args.sup_norm}
    _emit(_json({"meta": meta, "result": _finite(out)}), args.output)
    return EXIT_OK


def _finite(obj):
    """JSON-safe copy: non-finite floats become strings ``"inf"``/``"nan"``."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    return obj


def cmd_fit_poly(args) -> int:
    degrees = [int(d) for d in args.degrees.split(",")]
    fit = fit_positive_part(degrees, args.samples) if args.bound is None \
        else fit_bounding(args.bound, degrees, args.samples)
    out = {"coefficients": fit.poly.to_pairs(), "sup_error": fit.sup_error}
    meta = {"version": __version__, "degrees": degrees, "samples": args.samples,
            "bound": args.bound}
    _emit(_json({"meta": meta, "result": out}), args.output)
    return EXIT_OK


def cmd_table(args) -> int:
    fn = TABLES[args.name]
    kw: dict[str, Any] = {"seed": args.seed, "workers": args.workers}
    if args.paths:
        kw["log2_paths"] = tuple(int(math.log2(parse_paths(p))) for p in args.paths)
    table = fn(**kw)
    if args.format == "json":
        d = table.to_dict()
        d["meta"] = {"version": __version__, "units": "percent", **d["meta"]}
        text = _json(_finite(d))
    else:
        text = format_csv(table)
    _emit(text, args.output)
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser, samples: bool = True) -> None:
    p.add_argument("config", help="YAML run configuration")
    p.add_argument("--output", "-o", help="output file (default: config output.path or stdout)")
    p.add_argument("--format", choices=("json", "csv"))
    if samples:
        p.add_argument("--seed", type=int)
        p.add_argument("--paths", help="sample count, integer or 2^N")
        p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="branchcva",
                                 description="Branching-diffusion CVA pricing and references.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("price", help="risky value, riskless value and CVA")
    _add_run_flags(p)
    p.add_argument("--override-blowup", action="store_true",
                   help="run the branching engine even if the advisory fails")
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("reference-fd", help="implicit finite-difference reference")
    _add_run_flags(p, samples=False)
    p.add_argument("--n-space", type=int)
    p.add_argument("--n-time", type=int)
    p.add_argument("--surface", help="write the (x, u(0, x)) surface to this CSV")
    p.add_argument("--fail-on-divergence", action="store_true",
                   help="exit with status 4 when the solution diverges")
    p.set_defaults(func=cmd_reference_fd)

    p = sub.add_parser("nested-mc", help="brute-force nested Monte-Carlo reference")
    _add_run_flags(p)
    p.set_defaults(func=cmd_nested_mc)

    p = sub.add_parser("bsde", help="regression theta-scheme reference")
    _add_run_flags(p)
    p.set_defaults(func=cmd_bsde)

    p = sub.add_parser("analyze", help="blow-up advisory, criticality and variance bound")
    p.add_argument("--preset", default="choiceu")
    p.add_argument("--coefficients", help="degree:coefficient pairs, e.g. 0:0.1,2:0.5")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--sup-norm", type=float, default=1.0)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit-poly", help="least-squares polynomial fit of x+ on [-1, 1]")
    p.add_argument("--degrees", default="0,1,2,4")
    p.add_argument("--samples", type=int, default=1001)
    p.add_argument("--bound", choices=("under", "over"))
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_fit_poly)

    p = sub.add_parser("table", help="reproduce a named experiment table")
    p.add_argument("--name", required=True, choices=sorted(TABLES))
    p.add_argument("--paths", action="append",
                   help="sample count 2^N; repeat for several rows (experiment tables)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_table)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ContractViolation, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except BlowUpRefusal as exc:
        print(f"blow-up refusal: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(json.dumps(_finite(exc.report.to_dict())), file=sys.stderr)
        return EXIT_BLOWUP
    except BranchCvaError as exc:
        print(f"engine failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
