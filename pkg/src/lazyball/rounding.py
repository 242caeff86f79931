"""Iterative rounding over the nested bodies ``K_i = (1+1/n)^i r B ∩ K``.

Iteration i samples ``K_i`` in the current frame (map ``M_i``), estimates the
sample mean and covariance there and composes them into ``M_{i+1}`` so that
``M_{i+1}^{-1}(K_i)`` is close to isotropic.  A warm start for the next
iteration is a fresh sample re-expressed in the new frame and kept only if it
sits at least ``n^-3`` inside.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import AffineMap, ContractError, Polytope, apply_affine, distance_to_boundary
from .walks import (CHECK_BUDGET, OK, FrameBall, WalkConfig, WalkStats, i_star, make_rng,
                    paper_parameters, practical_alpha, sample_unit_ball, sample_uniform_batch)

#: eigenvalues below this fraction of the largest count as degenerate.
EIG_FLOOR = 1e-12
WARM_START_TRIES = 64


class RoundingFailure(RuntimeError):
    """An attempt could not finish (singular covariance, budget, step cap)."""


def cap_radius(n: int, eps: float, p: int, power: int = 2) -> float:
    """``20 sqrt(n) ln(40 n^2 p^power / eps)``; ``power=0`` drops the p factor."""
    return 20 * math.sqrt(n) * math.log(40 * n ** 2 * p ** power / eps)


@dataclass(frozen=True)
class RoundingConfig:
    r: float
    R: float
    p: int
    eps: float
    walk: WalkConfig
    checks_cap: float = math.inf
    attempts_max: int = 3
    cap_power: int = 2
    threads: int = 1
    #: shrink the first iteration's step by 1/sqrt(n+2): in the starting frame
    #: ``r I`` the body is the unit ball, whose per-axis spread is 1/sqrt(n+2).
    scale_first_step: bool = True

    def __post_init__(self):
        if not 0 < self.r <= self.R:
            raise ContractError(f"need 0 < r <= R, got r={self.r}, R={self.R}")
        if not 0 < self.eps < 1:
            raise ContractError(f"eps must lie in (0, 1), got {self.eps}")
        if self.attempts_max < 1:
            raise ContractError("attempts_max must be >= 1")
        if self.checks_cap < 0:
            raise ContractError("checks_cap must be >= 0")

    def validate_for(self, n: int) -> None:
        if self.p < n + 1:
            raise ContractError(f"p must be >= n + 1 = {n + 1}, got {self.p}")

    def i_star_for(self, n: int) -> int:
        return i_star(n, self.R / self.r)

    def rho(self, n: int) -> float:
        return cap_radius(n, self.eps, self.p, self.cap_power)

    def replace(self, **changes) -> "RoundingConfig":
        return replace(self, **changes)

    @classmethod
    def practical(cls, n: int, m: int, r: float, R: float, *, p: int | None = None, eps: float = 0.1,
                  proper_steps: int = 3000, eta: float | None = None, seed: int | None = None,
                  **kw) -> "RoundingConfig":
        """Desk-scale profile.

        The default step size ``0.8 / sqrt(n)`` suits the near-isotropic frames
        the iteration maintains; the per-batch step cap allows every restart
        100 times its proper-step target.
        """
        p = max(n + 1, 60 * n) if p is None else p
        eta = 0.8 / math.sqrt(n) if eta is None else eta
        walk = WalkConfig(eta=eta, alpha=practical_alpha(m), proper_steps=proper_steps,
                          i_max=100 * proper_steps * p, seed=seed)
        return cls(r=r, R=R, p=p, eps=eps, walk=walk, **kw)

    @classmethod
    def paper(cls, n: int, m: int, r: float, R: float, *, eps: float = 0.1, c: float = 1.0,
              c2: float = 1.0, seed: int | None = None, **kw) -> "RoundingConfig":
        """Formula-faithful constants (far too large to run beyond tiny n)."""
        pp = paper_parameters(n, m, eps, R / r, c=c, c2=c2)
        walk = WalkConfig(eta=pp.eta, alpha=pp.alpha, proper_steps=pp.proper_steps,
                          i_max=int(min(pp.i_max, 2 ** 62)), seed=seed)
        attempts = max(1, math.ceil(math.log(1 / eps)))
        kw.setdefault("attempts_max", attempts)
        kw.setdefault("checks_cap", pp.checks_cap)
        kw.setdefault("scale_first_step", False)
        return cls(r=r, R=R, p=pp.p, eps=eps, walk=walk, **kw)


@dataclass
class RoundingResult:
    map: AffineMap
    warm_point: np.ndarray
    iterations_completed: int
    checks_used: int
    succeeded: bool
    reason: str = ""
    attempts: int = 1
    i_star: int = 0
    stats: WalkStats | None = None
    warm_start_tries: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sigma_factor": self.map.sigma_factor.tolist(),
            "mu": self.map.mu.tolist(),
            "log_det_factor": self.map.log_det_factor,
            "warm_point": self.warm_point.tolist(),
            "iterations": self.iterations_completed,
            "i_star": self.i_star,
            "checks_used": int(self.checks_used),
            "succeeded": self.succeeded,
            "attempts": self.attempts,
            "reason": self.reason,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def estimate_moments(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and population-normalised (1/p) covariance."""
    Z = np.asarray(samples, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ContractError("need at least 2 samples as a (p, n) array")
    mu = Z.mean(axis=0)
    D = Z - mu
    return mu, D.T @ D / Z.shape[0]


def sqrt_psd(S) -> np.ndarray:
    """Symmetric square root via eigendecomposition.

    Raises :class:`RoundingFailure` when an eigenvalue is below
    ``EIG_FLOOR * max`` (the sample is degenerate, not something to patch).
    """
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    w, V = np.linalg.eigh(S)
    if w[-1] <= 0 or w[0] < EIG_FLOOR * w[-1]:
        raise RoundingFailure("singular sample covariance")
    return (V * np.sqrt(w)) @ V.T


def initial_interior_point(n: int, eps: float | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniform point of the unit ball, redrawn until ``n^-3`` inside it."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    rng = make_rng() if rng is None else rng
    limit = 1.0 - n ** -3.0
    if limit <= 0:  # n = 1: only the centre is a full unit inside [-1, 1]
        return np.zeros(n)
    while True:
        v = sample_unit_ball(rng, n)
        if np.linalg.norm(v) <= limit:
            return v


def reexpress(current_map: AffineMap, next_map: AffineMap, y) -> np.ndarray:
    """Coordinates in ``next_map``'s frame of the point ``y`` of ``current_map``'s frame."""
    return next_map.inverse(current_map.forward(y))


def interior_distance(poly: Polytope, amap: AffineMap, radius: float, rho: float, y) -> float:
    """Lower bound on the distance from ``y`` to the boundary of
    ``amap^{-1}(K ∩ radius B) ∩ rho B``."""
    body = apply_affine(poly, amap).with_rho(rho)
    return min(distance_to_boundary(body, y), FrameBall(amap, radius).distance_lower_bound(y))


def warm_start(current_map: AffineMap, next_map: AffineMap, poly: Polytope, walk: WalkConfig,
               rng: np.random.Generator, *, x0, radius: float, rho: float,
               max_tries: int = WARM_START_TRIES, threads: int = 1) -> tuple[np.ndarray, int, WalkStats]:
    """Draw samples of ``current_map^{-1}(K ∩ radius B) ∩ rho B`` until one,
    re-expressed in ``next_map``'s frame, is ``n^-3`` inside the same body.

    Returns ``(point, tries, stats)``; raises :class:`RoundingFailure` after
    ``max_tries`` misses.
    """
    n = poly.n
    body = apply_affine(poly, current_map).with_rho(rho)
    fb = FrameBall(current_map, radius)
    stats = WalkStats.zeros(poly.m)
    margin = n ** -3.0
    for tries in range(1, max_tries + 1):
        batch = sample_uniform_batch(body, x0, walk.replace(rho=rho), 1, rng.spawn(1)[0],
                                     frame_ball=fb, threads=threads)
        stats.merge(batch.stats)
        if batch.status != OK:
            raise RoundingFailure(f"warm start sampling stopped: {batch.status}")
        y = reexpress(current_map, next_map, batch.samples[0])
        if interior_distance(poly, next_map, radius, rho, y) >= margin:
            return y, tries, stats
    raise RoundingFailure(f"no interior warm start after {max_tries} tries")


def _iterate(poly: Polytope, cfg: RoundingConfig, rng: np.random.Generator, iterations: int,
             budget: float, on_samples=None, on_iteration=None) -> RoundingResult:
    """Core loop shared by rounding and volume estimation.

    Runs ``iterations`` frame updates starting from ``M = r I``.
    ``on_samples(i, samples, amap, radius)`` sees each batch (frame
    coordinates); ``on_iteration(i, amap, working_poly)`` sees the
    incrementally maintained working body after each update.
    """
    n, m = poly.n, poly.m
    cfg.validate_for(n)
    rho = cfg.rho(n)
    walk = cfg.walk.replace(rho=rho)
    amap = AffineMap.scaling(n, cfg.r)
    y0 = initial_interior_point(n, cfg.eps, rng.spawn(1)[0])
    A_w, b_w = poly.A * cfg.r, poly.b.copy()
    stats = WalkStats.zeros(m)
    tries: list[int] = []
    step = 1.0 + 1.0 / n

    def result(done, ok, reason=""):
        return RoundingResult(amap, y0, done, stats.checks_used, ok, reason, i_star=cfg.i_star_for(n),
                              stats=stats, warm_start_tries=tries)

    for i in range(1, iterations + 1):
        radius = cfg.r * step ** i
        if poly.rho is not None:  # the body's own cap is part of K
            radius = min(radius, poly.rho)
        working = Polytope(A_w, b_w, rho)
        step_walk = walk
        if i == 1 and cfg.scale_first_step:
            step_walk = walk.replace(eta=walk.eta / math.sqrt(n + 2))
        batch = sample_uniform_batch(working, y0, step_walk, cfg.p, rng.spawn(1)[0],
                                     frame_ball=FrameBall(amap, radius), threads=cfg.threads,
                                     check_budget=None if math.isinf(budget) else int(budget - stats.checks_used))
        stats.merge(batch.stats)
        if batch.status != OK:
            return result(i - 1, False, batch.status)
        if stats.checks_used > budget:
            return result(i - 1, False, CHECK_BUDGET)
        if on_samples is not None:
            on_samples(i, batch.samples, amap, radius)
        mean, S = estimate_moments(batch.samples)
        try:
            root = sqrt_psd(S)
        except RoundingFailure as exc:
            return result(i - 1, False, str(exc))
        update = AffineMap.from_factor(root, mean)
        nxt = amap.compose(update)
        try:
            y_next, k, ws = warm_start(amap, nxt, poly, step_walk, rng.spawn(1)[0], x0=y0, radius=radius,
                                       rho=rho, threads=cfg.threads)
        except RoundingFailure as exc:
            return result(i - 1, False, str(exc))
        stats.merge(ws)
        tries.append(k)
        # working body in the new frame: {z : (A_w R) z <= b_w - A_w mean}
        A_w, b_w = A_w @ root, b_w - A_w @ mean
        amap, y0 = nxt, y_next
        if on_iteration is not None:
            on_iteration(i, amap, Polytope(A_w, b_w, rho))
        if stats.checks_used > budget:
            return result(i, False, CHECK_BUDGET)
    return result(iterations, True)


def round_polytope(poly: Polytope, cfg: RoundingConfig, rng: np.random.Generator | None = None, *,
                   on_iteration=None) -> RoundingResult:
    """One rounding attempt: ``i* - 1`` frame updates."""
    rng = make_rng(cfg.walk.seed) if rng is None else rng
    iterations = max(cfg.i_star_for(poly.n) - 1, 0)
    return _iterate(poly, cfg, rng, iterations, cfg.checks_cap, on_iteration=on_iteration)


def round_bounded(poly: Polytope, cfg: RoundingConfig, rng: np.random.Generator | None = None) -> RoundingResult:
    """Retry :func:`round_polytope` (each attempt capped at ``checks_cap``
    checks, on its own substream) up to ``attempts_max`` times."""
    rng = make_rng(cfg.walk.seed) if rng is None else rng
    streams = rng.spawn(cfg.attempts_max)
    total = 0
    res = None
    for attempt, stream in enumerate(streams, start=1):
        if cfg.checks_cap == 0:
            res = RoundingResult(AffineMap.scaling(poly.n, cfg.r), np.zeros(poly.n), 0, 0, False,
                                 CHECK_BUDGET, i_star=cfg.i_star_for(poly.n))
        else:
            res = round_polytope(poly, cfg, stream)
        total += res.checks_used
        res.attempts = attempt
        if res.succeeded:
            break
    res.checks_used = total
    return res
