"""Command-line front end: ``lazyball {sample,round,volume,bench,diag}``.

Exit codes: 0 success, 1 input error, 2 the run stopped early (step cap,
check budget, failed rounding or a failed diagnostic).
"""
from __future__ import annotations

import argparse
import io
import json
import math
import sys

import numpy as np

from . import diagnostics as dg
from .geometry import ContractError, interior_point, load_polytope, make_body
from .rounding import RoundingConfig, round_bounded
from .volume import volume_telescoping
from .walks import (OK, WalkConfig, ball_walk_run, default_parameters, make_rng, practical_alpha,
                    practical_eta, sample_uniform_batch)

SUITES = ("equivalence", "anticoncentration", "conductance", "frequency", "steptail")


class InputError(Exception):
    pass


def _emit(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def samples_to_csv(samples: np.ndarray, n: int) -> str:
    buf = io.StringIO()
    buf.write(",".join(f"x{i + 1}" for i in range(n)) + "\n")
    for row in samples:
        buf.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    return buf.getvalue()


def _load(args):
    try:
        return load_polytope(args.poly)
    except OSError as exc:
        raise InputError(f"cannot read {args.poly}: {exc.strerror}") from None


def _parse_x0(text: str | None, poly) -> np.ndarray:
    if text is None:
        return interior_point(poly)
    try:
        x0 = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise InputError(f"--x0 must be comma-separated numbers, got {text!r}") from None
    if x0.shape != (poly.n,):
        raise InputError(f"--x0 needs {poly.n} values")
    return x0


# sample --------------------------------------------------------------------
def cmd_sample(args) -> int:
    poly = _load(args)
    if args.rho is not None:
        poly = poly.with_rho(args.rho)
    n, m = poly.n, poly.m
    base = default_parameters(n, m, args.eps, 1.0, "practical", proper_steps=args.proper_steps)
    p = args.n_samples
    cfg = WalkConfig(
        eta=base.eta if args.eta is None else args.eta,
        alpha=base.alpha if args.alpha is None else args.alpha,
        proper_steps=base.proper_steps,
        i_max=args.i_max if args.i_max is not None else 100 * base.proper_steps * max(p, 1),
        modified=args.mode == "on",
        seed=args.seed,
        rho=poly.rho,
    )
    x0 = _parse_x0(args.x0, poly)
    batch = sample_uniform_batch(poly, x0, cfg, p, make_rng(args.seed), threads=args.threads)
    if args.format == "csv":
        body = samples_to_csv(batch.samples, n)
    else:
        body = json.dumps(batch.samples.tolist()) + "\n"
    _emit(body, args.out)
    report = {"command": "sample", "seed": args.seed, "status": batch.status,
              "config": cfg.to_dict(), "x0": x0.tolist(), "n": n, "m": m, "n_samples": p,
              **batch.stats.to_report()}
    if args.stats:
        _emit(_dump(report), args.stats)
    elif args.out not in (None, "-"):
        sys.stdout.write(_dump(report))
    else:
        sys.stderr.write(_dump(report))
    return 0 if batch.status == OK else 2


# round ---------------------------------------------------------------------
def _rounding_config(args, poly) -> RoundingConfig:
    n, m = poly.n, poly.m
    R = args.R if args.R is not None else args.r
    extra = {"threads": args.threads}
    if args.attempts is not None:
        extra["attempts_max"] = args.attempts
    if args.checks_cap is not None:
        extra["checks_cap"] = args.checks_cap
    if args.param_mode == "paper":
        return RoundingConfig.paper(n, m, args.r, R, eps=args.eps, seed=args.seed, **extra)
    kw = {}
    if args.proper_steps is not None:
        kw["proper_steps"] = args.proper_steps
    return RoundingConfig.practical(n, m, args.r, R, p=args.p, eps=args.eps, eta=args.eta,
                                    seed=args.seed, **kw, **extra)


def cmd_round(args) -> int:
    poly = _load(args)
    cfg = _rounding_config(args, poly)
    res = round_bounded(poly, cfg, make_rng(args.seed))
    out = res.to_dict()
    out.update({"command": "round", "seed": args.seed, "param_mode": args.param_mode,
                "config": {"r": cfg.r, "R": cfg.R, "p": cfg.p, "eps": cfg.eps,
                           "checks_cap": None if math.isinf(cfg.checks_cap) else cfg.checks_cap,
                           "attempts_max": cfg.attempts_max, "walk": cfg.walk.to_dict()}})
    _emit(_dump(out), args.out)
    return 0 if res.succeeded else 2


# volume --------------------------------------------------------------------
def cmd_volume(args) -> int:
    poly = _load(args)
    args.p = args.samples_per_ratio
    args.param_mode, args.attempts, args.checks_cap = "practical", None, None
    cfg = _rounding_config(args, poly)
    est = volume_telescoping(poly, cfg, args.samples_per_ratio, make_rng(args.seed))
    out = est.to_dict()
    out.update({"command": "volume", "seed": args.seed,
                "config": {"r": cfg.r, "R": cfg.R, "samples_per_ratio": args.samples_per_ratio,
                           "walk": cfg.walk.to_dict()}})
    _emit(_dump(out), args.out)
    return 0 if est.succeeded else 2


# bench ---------------------------------------------------------------------
def cmd_bench(args) -> int:
    rng = make_rng(args.seed)
    rows = []
    for n, child in zip(args.dims, rng.spawn(len(args.dims))):
        poly = dg.isotropic_cube(n)
        m = poly.m
        sampler = dg.cube_sampler(n, dg.SQRT3)
        on_cfg = WalkConfig(eta=practical_eta(n), alpha=practical_alpha(m), proper_steps=args.steps,
                            i_max=100 * args.steps)
        on_rng, off_rng = child.spawn(2)
        on = dg.per_step_cost(poly, on_cfg, sampler, args.runs, on_rng)
        off = dg.per_step_cost(poly, on_cfg.replace(modified=False), sampler, 1, off_rng)
        rows.append({"n": n, "m": m, "eta": on_cfg.eta, "alpha": on_cfg.alpha,
                     "gamma": on_cfg.gamma(n), "on_checks_per_step": on["checks_per_step"],
                     "off_checks_per_step": off["checks_per_step"], "on_ratio": on["ratio"],
                     "off_ratio": off["ratio"], "steps": on["steps"]})
    ratios = [r["on_ratio"] for r in rows]
    out = {"command": "bench", "seed": args.seed, "runs": args.runs, "proper_steps": args.steps,
           "rows": rows, "decreasing": all(a > b for a, b in zip(ratios, ratios[1:]))}
    _emit(_dump(out), args.out)
    return 0


# diag ----------------------------------------------------------------------
def _diag_equivalence(args, rng):
    n, eps_hat = 10, 0.05
    poly = _load(args) if args.poly else make_body("cube", n, rho=20.0)
    n, m = poly.n, poly.m
    cfg = default_parameters(n, m, eps_hat, 1.0, "practical", proper_steps=args.proper_steps)
    cfg = cfg.replace(rho=poly.rho)
    seeds = [int(s) for s in rng.integers(0, 2 ** 63, size=args.trials or 20)]
    rep = dg.equivalence_check(poly, cfg, seeds, x0=interior_point(poly), eps_hat=eps_hat)
    return [dict(rep, eps_hat=eps_hat, alpha=cfg.alpha, eta=cfg.eta)]


def _diag_anticoncentration(args, rng):
    n = 10
    trials = args.trials or 100_000
    out = []
    for name, sampler in (("cube", dg.cube_sampler(n, dg.SQRT3)),
                          ("simplex", dg.isotropic_simplex_sampler(n))):
        for eps_hat in (0.01, 0.05, 0.1):
            u = rng.standard_normal(n)
            rep = dg.anti_concentration_probe(sampler, u, 0.0, eps_hat, trials, rng)
            out.append(dict(rep, body=name))
    return out


def _diag_conductance(args, rng):
    n = 16
    eta = 0.2 / math.sqrt(n)
    rep = dg.conductance_estimate(make_body("cube", n), eta, args.trials or 100_000, rng,
                                  dg.cube_sampler(n), inradius=1.0)
    return [dict(rep, eta=eta)]


def _diag_frequency(args, rng):
    n = 64
    poly = dg.isotropic_cube(n)
    steps = args.proper_steps
    cfg = WalkConfig(eta=practical_eta(n), alpha=practical_alpha(poly.m), proper_steps=steps,
                     i_max=100 * steps)
    sampler = dg.cube_sampler(n, dg.SQRT3)
    reports = []
    for child in rng.spawn(args.trials or 30):
        res = ball_walk_run(poly, sampler(child, 1)[0], cfg, child)
        reports.append(dg.frequency_report(res.stats, cfg, n))
    agg = dg.aggregate_frequency(reports)
    agg["below_full_scan"] = agg["statistic"] < 1.0
    if agg["vacuous"]:
        agg["passed"] = agg["below_full_scan"]
    return [dict(agg, gamma=cfg.gamma(n))]


def _diag_steptail(args, rng):
    return [dg.step_tail_probe(50, 0.3, args.trials or 100_000, rng)]


def cmd_diag(args) -> int:
    if args.list:
        sys.stdout.write("\n".join(SUITES) + "\n")
        return 0
    if args.suite not in SUITES:
        raise InputError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    rng = make_rng(args.seed)
    results = globals()[f"_diag_{args.suite}"](args, rng)
    for r in results:
        for k, v in list(r.items()):
            if isinstance(v, float) and math.isinf(v):
                r[k] = None
    passed = all(r["passed"] for r in results)
    out = {"command": "diag", "suite": args.suite, "seed": args.seed, "trials": args.trials,
           "proper_steps": args.proper_steps, "results": results, "passed": passed}
    _emit(_dump(out), args.out)
    return 0 if passed else 2


# parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lazyball", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, poly=True):
        if poly:
            p.add_argument("--poly", required=True, help="polytope JSON file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output file (default stdout)")
        p.add_argument("--threads", type=int, default=1)

    s = sub.add_parser("sample", help="draw uniform samples")
    common(s)
    s.add_argument("--n-samples", type=int, default=1)
    s.add_argument("--eta", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--proper-steps", type=int, default=1000)
    s.add_argument("--i-max", type=int)
    s.add_argument("--mode", choices=("on", "off"), default="on")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--x0", help="comma-separated start point (default: an interior point)")
    s.add_argument("--rho", type=float, help="ball cap radius")
    s.add_argument("--eps", type=float, default=0.1)
    s.add_argument("--stats", help="write the stats report here")
    s.set_defaults(func=cmd_sample)

    def rounding_args(p):
        p.add_argument("--r", type=float, required=True, help="inradius: r B inside the body")
        p.add_argument("--R", type=float, help="circumradius (default r)")
        p.add_argument("--eps", type=float, default=0.1)
        p.add_argument("--proper-steps", type=int)
        p.add_argument("--eta", type=float)

    r = sub.add_parser("round", help="bring the body near isotropic position")
    common(r)
    rounding_args(r)
    r.add_argument("--p", type=int, help="samples per iteration")
    r.add_argument("--checks-cap", type=float, help="inequality-check budget per attempt")
    r.add_argument("--attempts", type=int)
    r.add_argument("--param-mode", choices=("practical", "paper"), default="practical")
    r.set_defaults(func=cmd_round)

    v = sub.add_parser("volume", help="telescoping volume estimate")
    common(v)
    rounding_args(v)
    v.add_argument("--samples-per-ratio", type=int, default=10_000)
    v.set_defaults(func=cmd_volume)

    b = sub.add_parser("bench", help="ON vs OFF constraint checks per step on isotropic cubes")
    common(b, poly=False)
    b.add_argument("--dims", type=int, nargs="+", default=[16, 64, 256])
    b.add_argument("--runs", type=int, default=5)
    b.add_argument("--steps", type=int, default=2000, help="proper steps per run")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("diag", help="run a diagnostic suite")
    common(d, poly=False)
    d.add_argument("--suite")
    d.add_argument("--list", action="store_true")
    d.add_argument("--poly", help="polytope for the equivalence suite")
    d.add_argument("--trials", type=int)
    d.add_argument("--proper-steps", type=int, default=2000)
    d.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return args.func(args)
    except (InputError, ContractError) as exc:
        sys.stderr.write(f"lazyball {args.command}: {exc}\n")
        return 1
