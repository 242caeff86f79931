"""Empirical checks of the sampler's guarantees.

Every check is one-sided: a bound passes when the measured statistic does not
exceed it by more than three Monte Carlo standard errors.  Reports are plain
dicts with ``statistic``, ``bound``, ``mc_error`` and ``passed`` keys so the
CLI can emit them as JSON.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import ContractError, Polytope, make_body
from .walks import (WalkConfig, WalkStats, agreement_alpha, ball_walk_run, make_rng,
                    sample_unit_ball)

SQRT3 = math.sqrt(3.0)


# isotropy -------------------------------------------------------------------
@dataclass(frozen=True)
class IsotropyReport:
    eig_min: float
    eig_max: float
    mean_norm: float
    grade_a: float

    def to_dict(self) -> dict:
        return asdict(self)


def isotropy_report(sigma, mu) -> IsotropyReport:
    """Smallest a with ``I/a^2 <= sigma <= a^2 I`` and ``|mu| <= a/10``."""
    sigma = np.asarray(sigma, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1] or mu.shape != (sigma.shape[0],):
        raise ContractError("sigma must be n x n and mu length n")
    skew = np.max(np.abs(sigma - sigma.T), initial=0.0)
    if skew > 1e-10 * max(1.0, np.max(np.abs(sigma), initial=0.0)):
        raise ContractError(f"sigma is not symmetric (skew {skew:.3g})")
    eig = np.linalg.eigvalsh(0.5 * (sigma + sigma.T))
    lo, hi = float(eig[0]), float(eig[-1])
    mean_norm = float(np.linalg.norm(mu))
    inv = math.inf if lo <= 0 else 1.0 / math.sqrt(lo)
    grade = max(math.sqrt(max(hi, 0.0)), inv, 10.0 * mean_norm)
    return IsotropyReport(lo, hi, mean_norm, grade)


def box_moments(lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of the uniform law on the box ``prod [lo_i, hi_i]``."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    return 0.5 * (lo + hi), np.diag((hi - lo) ** 2 / 12.0)


def transformed_box_moments(lo, hi, amap) -> tuple[np.ndarray, np.ndarray]:
    """Exact moments of the box seen in ``amap``'s frame (``y = F^-1 (x - mu)``)."""
    mean, cov = box_moments(lo, hi)
    Finv = amap.sigma_inv_factor
    return Finv @ (mean - amap.mu), Finv @ cov @ Finv.T


# exact samplers ---------------------------------------------------------------
def box_sampler(lo, hi):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)

    def draw(rng: np.random.Generator, size: int) -> np.ndarray:
        return lo + (hi - lo) * rng.random((size, lo.shape[0]))

    return draw


def cube_sampler(n: int, half_width: float = 1.0):
    return box_sampler(-half_width * np.ones(n), half_width * np.ones(n))


def isotropic_cube(n: int) -> Polytope:
    """``[-sqrt 3, sqrt 3]^n``: mean 0, covariance I."""
    return make_body("scaled_cube", n, scales=SQRT3 * np.ones(n))


def simplex_isotropy_map(n: int) -> tuple[np.ndarray, np.ndarray]:
    """``(mean, W)`` with ``W (x - mean)`` isotropic for x uniform on the standard simplex."""
    mean = np.full(n, 1.0 / (n + 1))
    cov = ((n + 1) * np.eye(n) - np.ones((n, n))) / ((n + 1) ** 2 * (n + 2))
    w, V = np.linalg.eigh(cov)
    return mean, (V / np.sqrt(w)) @ V.T


def isotropic_simplex_sampler(n: int):
    """Exact uniform draws from the standard simplex, mapped to isotropic position."""
    mean, W = simplex_isotropy_map(n)

    def draw(rng: np.random.Generator, size: int) -> np.ndarray:
        x = rng.dirichlet(np.ones(n + 1), size)[:, :n]
        return (x - mean) @ W.T

    return draw


# anti-concentration ------------------------------------------------------------
def anti_concentration_probe(sampler, normal, offset: float, eps_hat: float, trials: int,
                             rng: np.random.Generator) -> dict:
    """Estimate ``P(dist(X, H) <= eps_hat)`` for ``H = {x : u.x = offset}``."""
    u = np.asarray(normal, dtype=float)
    u = u / np.linalg.norm(u)
    X = sampler(rng, trials)
    hits = int(np.count_nonzero(np.abs(X @ u - offset) <= eps_hat)) if eps_hat > 0 else 0
    p_hat = hits / trials
    sigma = math.sqrt(max(p_hat * (1 - p_hat), 1.0 / trials) / trials)
    bound = 2 * eps_hat
    return {"statistic": p_hat, "p_hat": p_hat, "bound": bound, "mc_error": sigma,
            "passed": p_hat <= bound + 3 * sigma, "bound_ok": p_hat <= bound + 3 * sigma,
            "eps_hat": eps_hat, "trials": trials}


# check frequency -----------------------------------------------------------------
def frequency_bound(gamma: float, n: int, beta: float = 1.0, eps_hat: float = 0.05,
                    N: int | None = None) -> float:
    """``16 g b / n + 32 (g/n) b ln(n/g) + b eps_hat / N`` (inf when vacuous)."""
    if gamma <= 0:
        return 0.0
    if gamma >= n:
        return math.inf
    tail = beta * eps_hat / N if N else 0.0
    return 16 * gamma * beta / n + 32 * gamma / n * beta * math.log(n / gamma) + tail


def frequency_report(stats: WalkStats, cfg: WalkConfig, n: int, beta: float = 1.0,
                     eps_hat: float = 0.05) -> dict:
    """Per-constraint check frequencies ``N_j / N`` of one lazy run.

    ``violations`` lists rows above the expectation bound; it is a single-run
    heuristic, see :func:`aggregate_frequency` for the real test.
    """
    N = stats.wall_steps
    F = stats.per_constraint_checks / N if N else np.zeros_like(stats.per_constraint_checks, dtype=float)
    gamma = cfg.gamma(n)
    bound = frequency_bound(gamma, n, beta, eps_hat, N)
    violations = [] if bound >= 1 else np.flatnonzero(F > bound).tolist()
    return {"F": F, "mean_F": float(F.mean()), "bound": bound, "gamma": gamma,
            "vacuous": bound >= 1, "violations": violations, "steps": N,
            "checks_total": int(stats.per_constraint_checks.sum())}


def aggregate_frequency(reports: list[dict]) -> dict:
    """Mean check frequency across runs against the (expectation) bound."""
    if len(reports) < 2:
        raise ContractError("need at least two runs")
    means = np.array([r["mean_F"] for r in reports])
    bound = max(r["bound"] for r in reports)
    mc = float(means.std(ddof=1) / math.sqrt(len(means)))
    stat = float(means.mean())
    return {"statistic": stat, "bound": bound, "mc_error": mc, "runs": len(reports),
            "vacuous": bound >= 1, "passed": stat <= bound + 3 * mc}


# step tail ---------------------------------------------------------------------
def step_tail_bound(n: int, t: float) -> float:
    """``2 exp(-(n-2) t^2 / 2)``: tail of one coordinate of a uniform unit vector."""
    if n < 3:
        raise ContractError(f"step tail bound needs n >= 3, got {n}")
    if t < 0:
        raise ContractError(f"t must be >= 0, got {t}")
    return 2.0 * math.exp(-(n - 2) * t * t / 2.0)


def step_tail_probe(n: int, t: float, draws: int, rng: np.random.Generator) -> dict:
    """Monte Carlo ``P(|u . xi/|xi|| >= t)`` for a random unit u and uniform-ball xi."""
    bound = step_tail_bound(n, t)
    u = rng.standard_normal(n)
    u /= np.linalg.norm(u)
    xi = sample_unit_ball(rng, n, draws)
    p_hat = float(np.mean(np.abs(xi @ u) / np.linalg.norm(xi, axis=1) >= t))
    sigma = math.sqrt(max(p_hat * (1 - p_hat), 1.0 / draws) / draws)
    return {"statistic": p_hat, "bound": bound, "mc_error": sigma,
            "passed": p_hat <= bound + 3 * sigma, "n": n, "t": t, "draws": draws}


# conductance -----------------------------------------------------------------------
def conductance_estimate(poly: Polytope, eta: float, trials: int, rng: np.random.Generator,
                         exact_sampler, inradius: float | None) -> dict:
    """Fraction of (uniform point, ball proposal) pairs that stay inside."""
    if inradius is None or not inradius > 0:
        raise ContractError("conductance_estimate needs a known positive inradius")
    n = poly.n
    X = exact_sampler(rng, trials)
    P = X + eta * sample_unit_ball(rng, n, trials)
    inside = np.all(P @ poly.A.T <= poly.b, axis=1)
    if poly.rho is not None:
        inside &= np.einsum("ij,ij->i", P, P) <= poly.rho ** 2
    lam = float(inside.mean())
    sigma = math.sqrt(max(lam * (1 - lam), 1.0 / trials) / trials)
    bound = 1.0 - eta * math.sqrt(n) / (2.0 * inradius)
    return {"statistic": lam, "lambda_hat": lam, "lower_bound": bound, "bound": bound,
            "mc_error": sigma, "passed": lam >= bound - 3 * sigma, "trials": trials}


# speedy start and step budget ---------------------------------------------------------
def speedy_start(poly: Polytope, eta: float, exact_sampler, rng: np.random.Generator,
                 max_draws: int = 10_000) -> np.ndarray:
    """A draw from the speedy law: exact uniform point kept iff one ball step stays inside."""
    for _ in range(max_draws):
        x = exact_sampler(rng, 1)[0]
        if poly.contains(x + eta * sample_unit_ball(rng, poly.n)):
            return x
    raise ContractError("speedy start: no accepted draw")


def improper_step_budget(poly: Polytope, cfg: WalkConfig, runs: int, rng: np.random.Generator,
                         exact_sampler, lambda_hat: float, slack: float = 1.5) -> dict:
    """Mean wall steps of ``runs`` walks against ``slack * 2 I / lambda_hat``."""
    walls = []
    for child in rng.spawn(runs):
        x0 = speedy_start(poly, cfg.eta, exact_sampler, child)
        res = ball_walk_run(poly, x0, cfg, child)
        walls.append(res.stats.wall_steps)
    walls = np.asarray(walls, dtype=float)
    bound = 2 * cfg.proper_steps / lambda_hat
    mean = float(walls.mean())
    return {"statistic": mean, "bound": bound, "limit": slack * bound,
            "mc_error": float(walls.std(ddof=1) / math.sqrt(runs)) if runs > 1 else 0.0,
            "passed": mean <= slack * bound, "runs": runs}


# per-step cost ------------------------------------------------------------------------------
def per_step_cost(poly: Polytope, cfg: WalkConfig, exact_sampler, runs: int,
                  rng: np.random.Generator) -> dict:
    """Mean constraints evaluated per step divided by m (initial scan excluded)."""
    checks = steps = 0
    for child in rng.spawn(runs):
        x0 = exact_sampler(child, 1)[0]
        res = ball_walk_run(poly, x0, cfg, child)
        checks += res.stats.total_checks
        steps += res.stats.wall_steps
    return {"checks_per_step": checks / steps, "ratio": checks / steps / poly.m, "steps": steps,
            "m": poly.m, "n": poly.n, "eta": cfg.eta, "alpha": cfg.alpha, "gamma": cfg.gamma(poly.n),
            "modified": cfg.modified}


def cost_scaling(dims, cfg_for, runs: int, rng: np.random.Generator) -> dict:
    """ON-mode cost ratio on isotropic cubes across ``dims``; ``cfg_for(n, m)`` builds the config."""
    rows = []
    for n, child in zip(dims, rng.spawn(len(dims))):
        poly = isotropic_cube(n)
        rows.append(per_step_cost(poly, cfg_for(n, poly.m), cube_sampler(n, SQRT3), runs, child))
    ratios = [r["ratio"] for r in rows]
    decreasing = all(a > b for a, b in zip(ratios, ratios[1:]))
    return {"rows": rows, "ratios": ratios, "decreasing": decreasing}


# ON/OFF equivalence -------------------------------------------------------------------------
def equivalence_check(poly: Polytope, cfg: WalkConfig, seeds, *, x0=None, eps_hat: float | None = None,
                      modes: tuple[bool, bool] = (True, False)) -> dict:
    """Run each seed under two modes with identical streams and compare trajectories.

    Trajectories agree when the per-step accept flags and the final point are
    bit-identical.  ON runs are audited: ``audit_clean`` counts runs whose
    accepted points all pass full membership.
    """
    n, m = poly.n, poly.m
    if eps_hat is not None and cfg.alpha < agreement_alpha(m, cfg.i_max, eps_hat) * (1 - 1e-12):
        raise ContractError(f"alpha={cfg.alpha:.4g} is below 4 ln(2 m i_max / eps_hat)")
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    agree = audit_clean = 0
    seeds = list(seeds)
    for seed in seeds:
        runs = []
        for modified in modes:
            res = ball_walk_run(poly, x0, cfg.replace(modified=modified), make_rng(seed),
                                record=True, audit=modified)
            runs.append(res)
        a, b = runs
        same = (np.array_equal(a.accept_flags, b.accept_flags) and np.array_equal(a.Y, b.Y)
                and a.status == b.status)
        agree += same
        audit_clean += all(r.audit_failures == 0 for r in runs)
    total = len(seeds)
    expected = 1 - (eps_hat if eps_hat is not None else 0.0)
    sigma = math.sqrt(expected * (1 - expected) / total) if total else 0.0
    rate = agree / total if total else 1.0
    return {"agree_count": agree, "total": total, "audit_clean": audit_clean,
            "statistic": rate, "bound": expected, "mc_error": sigma,
            "passed": rate >= expected - 3 * sigma}


# two-sample energy test --------------------------------------------------------------------
def energy_statistic(X, Y) -> float:
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    return float(2 * cdist(X, Y).mean() - cdist(X, X).mean() - cdist(Y, Y).mean())


def energy_test(X, Y, permutations: int, rng: np.random.Generator) -> dict:
    """Permutation p-value of the energy distance between two samples."""
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    Z = np.vstack([X, Y])
    D = cdist(Z, Z)
    k = X.shape[0]

    def stat(idx):
        a, b = idx[:k], idx[k:]
        return 2 * D[np.ix_(a, b)].mean() - D[np.ix_(a, a)].mean() - D[np.ix_(b, b)].mean()

    base = np.arange(Z.shape[0])
    observed = stat(base)
    exceed = sum(stat(rng.permutation(base)) >= observed for _ in range(permutations))
    return {"statistic": float(observed), "p_value": (exceed + 1) / (permutations + 1)}
