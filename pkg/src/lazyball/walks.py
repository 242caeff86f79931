"""Ball walk (lazy and conventional), speedy-to-uniform rejection, batches,
hit-and-run baseline and parameter rules.

Each ball-walk step proposes ``x + eta * xi`` with ``xi`` uniform on the unit
ball.  With ``modified=True`` only the constraints due in the
:class:`~lazyball.lazy_oracle.DeadlineLedger` are evaluated (at the
proposal); with ``modified=False`` all m rows are.  The ball cap, and the
optional :class:`FrameBall`, are checked on every step.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np

from .geometry import AffineMap, ContractError, Polytope, membership_full
from .lazy_oracle import (DeadlineLedger, LedgerEvent, _ledger_pop, _ledger_schedule,
                          _wait)

#: xi draws generated per refill; both modes consume the stream identically.
BLOCK = 4096
#: kernel-side ceiling on step counts (paper-mode i_max overflows int64).
STEP_CEILING = 2 ** 62

OK, HIT_I_MAX, LEFT_BODY, CHECK_BUDGET = "ok", "hit_i_max", "left_body", "check_budget"


def make_rng(seed=None) -> np.random.Generator:
    """Counter-based generator; restarts take ``rng.spawn`` substreams."""
    return np.random.Generator(np.random.Philox(seed))


def sample_unit_ball(rng: np.random.Generator, n: int, size: int | None = None) -> np.ndarray:
    """Uniform draw(s) from the unit ball: normalised Gaussian times U^(1/n)."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    k = 1 if size is None else size
    g = rng.standard_normal((k, n))
    u = rng.random(k)
    out = g * (u ** (1.0 / n) / np.linalg.norm(g, axis=1))[:, None]
    return out[0] if size is None else out


@dataclass(frozen=True)
class FrameBall:
    """The ball ``{x : |x| <= radius}`` of original space, seen in a frame.

    In frame coordinates the constraint is ``|F y + mu| <= radius``.  The
    rounding loop uses it for the nested bodies ``K_i = t_i B ∩ K``.
    """

    amap: AffineMap
    radius: float

    def contains(self, y) -> bool:
        x = self.amap.forward(y)
        return float(np.dot(x, x)) <= self.radius ** 2

    def contains_rows(self, Y) -> np.ndarray:
        X = self.amap.forward(Y)
        return np.einsum("ij,ij->i", X, X) <= self.radius ** 2

    def distance_lower_bound(self, y) -> float:
        """Lower bound on the frame-space distance to the ellipsoid boundary."""
        smax = np.linalg.norm(self.amap.sigma_factor, 2)
        return (self.radius - float(np.linalg.norm(self.amap.forward(y)))) / smax


@dataclass(frozen=True)
class WalkConfig:
    eta: float
    alpha: float
    proper_steps: int
    i_max: int
    modified: bool = True
    seed: int | None = None
    rho: float | None = None

    def __post_init__(self):
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ContractError(f"eta must be finite and >= 0, got {self.eta}")
        if not self.alpha > 0:
            raise ContractError(f"alpha must be > 0, got {self.alpha}")
        if self.proper_steps < 0:
            raise ContractError(f"proper_steps must be >= 0, got {self.proper_steps}")
        if self.i_max < self.proper_steps:
            raise ContractError(f"i_max ({self.i_max}) must be >= proper_steps ({self.proper_steps})")

    def gamma(self, n: int) -> float:
        """``alpha * eta * sqrt(n)`` (equivalently ``10 * alpha * eta_hat``)."""
        return self.alpha * self.eta * math.sqrt(n)

    def replace(self, **changes) -> "WalkConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WalkStats:
    per_constraint_checks: np.ndarray
    proper_steps: int = 0
    improper_steps: int = 0
    init_checks: int = 0
    rejection_attempts: int = 0
    rejection_checks: int = 0
    accepted_samples: int = 0

    @classmethod
    def zeros(cls, m: int) -> "WalkStats":
        return cls(np.zeros(m, dtype=np.int64))

    @property
    def wall_steps(self) -> int:
        return self.proper_steps + self.improper_steps

    @property
    def total_checks(self) -> int:
        return int(self.per_constraint_checks.sum())

    @property
    def checks_used(self) -> int:
        """Every constraint evaluation, including initialisation and rejection tests."""
        return self.total_checks + self.init_checks + self.rejection_checks

    @property
    def lambda_hat(self) -> float:
        return self.proper_steps / self.wall_steps if self.wall_steps else float("nan")

    def merge(self, other: "WalkStats") -> "WalkStats":
        self.per_constraint_checks = self.per_constraint_checks + other.per_constraint_checks
        self.proper_steps += other.proper_steps
        self.improper_steps += other.improper_steps
        self.init_checks += other.init_checks
        self.rejection_attempts += other.rejection_attempts
        self.rejection_checks += other.rejection_checks
        self.accepted_samples += other.accepted_samples
        return self

    def to_report(self) -> dict:
        lam = self.lambda_hat
        return {
            "proper": self.proper_steps,
            "improper": self.improper_steps,
            "checks_total": self.total_checks,
            "checks_init": self.init_checks,
            "checks_rejection": self.rejection_checks,
            "checks_per_constraint": self.per_constraint_checks.tolist(),
            "lambda_hat": None if math.isnan(lam) else lam,
            "accepted": self.accepted_samples,
            "rejected": self.rejection_attempts - self.accepted_samples,
        }


@dataclass
class WalkResult:
    Y: np.ndarray
    stats: WalkStats
    status: str
    accept_flags: np.ndarray | None = None
    events: list[LedgerEvent] | None = None
    audit_failures: int = 0
    first_audit_failure: int | None = None


@dataclass
class BatchResult:
    samples: np.ndarray
    stats: WalkStats
    status: str
    runs: int = 0
    extras: dict = field(default_factory=dict)


# compiled kernel -----------------------------------------------------------
# ctr layout: step, proper, improper, audit_first_fail, audit_fail_count, n_events
@numba.njit(cache=True, nogil=True)
def _walk_block(A, b, x, xi, eta, rho2, fb_pos, fb_xi, fb_r2, modified,
                head, nxt, deadline, last_check, n_checks, sqrt_n, alpha_eta,
                ctr, proper_target, i_max, audit, flags, ev_step, ev_j, ev_h, ev_w, scratch):
    m, n = A.shape
    capacity = head.shape[0]
    use_fb = fb_xi.shape[0] > 0
    record = flags.shape[0] > 0
    log = ev_step.shape[0] > 0
    prop = np.empty(n)
    fb_prop = np.empty(fb_pos.shape[0])
    k = 0
    while k < xi.shape[0]:
        if ctr[1] >= proper_target or ctr[0] >= i_max:
            break
        step = ctr[0] + 1
        ctr[0] = step
        sq = 0.0
        for t in range(n):
            v = x[t] + eta * xi[k, t]
            prop[t] = v
            sq += v * v
        ok = sq <= rho2
        if modified:
            cnt = _ledger_pop(head, nxt, step, scratch)
            for q in range(cnt):
                j = scratch[q]
                h = b[j]
                for t in range(n):
                    h -= A[j, t] * prop[t]
                n_checks[j] += 1
                if h < 0.0:
                    ok = False
                    w = 1
                else:
                    w = _wait(h, sqrt_n, alpha_eta, capacity)
                _ledger_schedule(head, nxt, deadline, last_check, j, step, w)
                if log:
                    e = ctr[5]
                    ev_step[e] = step
                    ev_j[e] = j
                    ev_h[e] = h
                    ev_w[e] = w
                    ctr[5] = e + 1
        else:
            for j in range(m):
                h = b[j]
                for t in range(n):
                    h -= A[j, t] * prop[t]
                n_checks[j] += 1
                if h < 0.0:
                    ok = False
        if use_fb:
            fsq = 0.0
            for t in range(fb_pos.shape[0]):
                v = fb_pos[t] + eta * fb_xi[k, t]
                fb_prop[t] = v
                fsq += v * v
            if fsq > fb_r2:
                ok = False
        if ok:
            for t in range(n):
                x[t] = prop[t]
            if use_fb:
                for t in range(fb_pos.shape[0]):
                    fb_pos[t] = fb_prop[t]
            ctr[1] += 1
            if audit:
                inside = True
                for j in range(m):
                    h = b[j]
                    for t in range(n):
                        h -= A[j, t] * x[t]
                    if h < 0.0:
                        inside = False
                        break
                if not inside:
                    if ctr[3] < 0:
                        ctr[3] = step
                    ctr[4] += 1
        else:
            ctr[2] += 1
        if record:
            flags[k] = 1 if ok else 0
        k += 1
    return k


_EMPTY_F2 = np.empty((0, 0))
_EMPTY_I = np.empty(0, dtype=np.int64)
_EMPTY_F = np.empty(0)
_EMPTY_U8 = np.empty(0, dtype=np.uint8)


def _check_start(poly: Polytope, x0: np.ndarray, rho: float | None, frame_ball: FrameBall | None,
                 strict: bool) -> None:
    inside, _ = membership_full(poly.with_rho(rho), x0)
    if not inside or (frame_ball is not None and not frame_ball.contains(x0)):
        raise ContractError("x0 is not inside the body")
    if strict and np.any(poly.normalized.slacks(x0) <= 0):
        raise ContractError("x0 must be strictly interior when modified=True")


def ball_walk_run(poly: Polytope, x0, cfg: WalkConfig, rng: np.random.Generator, *,
                  frame_ball: FrameBall | None = None, audit: bool = False, record: bool = False,
                  log_events: bool = False, init_slacks: np.ndarray | None = None) -> WalkResult:
    """Run the ball walk from ``x0`` until ``cfg.proper_steps`` proper steps or
    ``cfg.i_max`` total steps.

    ``init_slacks`` (slacks of the row-normalised body at ``x0``) lets batch
    restarts skip re-measuring the start point; otherwise m evaluations are
    charged to ``stats.init_checks``.  ``audit`` re-tests every accepted point
    against all rows (uncharged); ``record`` returns the per-step accept flags.
    """
    n, m = poly.n, poly.m
    x = np.array(x0, dtype=float)
    if x.shape != (n,):
        raise ContractError(f"x0 must have length {n}")
    rho = cfg.rho if cfg.rho is not None else poly.rho
    body = poly.normalized
    stats = WalkStats.zeros(m)
    if init_slacks is None:
        _check_start(poly, x, rho, frame_ball, strict=cfg.modified)
        if cfg.modified:
            init_slacks = body.slacks(x)
            stats.init_checks = m
    if cfg.modified:
        ledger = DeadlineLedger.for_polytope(body.with_rho(rho), cfg.alpha, cfg.eta, init_slacks)
        ledger.reset(init_slacks)
        head, nxt, deadline, last_check = ledger.head, ledger.nxt, ledger.deadline, ledger.last_check
        sqrt_n, alpha_eta = ledger.sqrt_n, ledger.alpha_eta
        scratch = np.empty(m, dtype=np.int64)
    else:
        head = nxt = deadline = last_check = scratch = _EMPTY_I
        sqrt_n, alpha_eta = 1.0, 1.0
    n_checks = stats.per_constraint_checks
    rho2 = math.inf if rho is None else rho * rho
    if frame_ball is not None:
        fb_pos = frame_ball.amap.forward(x)
        fb_r2 = frame_ball.radius ** 2
    else:
        fb_pos, fb_r2 = _EMPTY_F, math.inf
    ctr = np.array([0, 0, 0, -1, 0, 0], dtype=np.int64)
    i_max = min(int(cfg.i_max), STEP_CEILING)
    flag_parts, events = [], [] if log_events else None
    A, b = body.A, body.b
    while ctr[1] < cfg.proper_steps and ctr[0] < i_max:
        size = int(min(BLOCK, i_max - ctr[0]))
        xi = sample_unit_ball(rng, n, size)
        fb_xi = xi @ frame_ball.amap.sigma_factor.T if frame_ball is not None else _EMPTY_F2
        flags = np.zeros(size, dtype=np.uint8) if record else _EMPTY_U8
        if log_events and cfg.modified:
            cap = size * m
            ev = (np.empty(cap, np.int64), np.empty(cap, np.int64), np.empty(cap), np.empty(cap, np.int64))
            ctr[5] = 0
        else:
            ev = (_EMPTY_I, _EMPTY_I, _EMPTY_F, _EMPTY_I)
        used = _walk_block(A, b, x, xi, float(cfg.eta), rho2, fb_pos, fb_xi, fb_r2, cfg.modified,
                           head, nxt, deadline, last_check, n_checks, sqrt_n, alpha_eta,
                           ctr, int(cfg.proper_steps), i_max, audit and cfg.modified, flags,
                           ev[0], ev[1], ev[2], ev[3], scratch)
        if record:
            flag_parts.append(flags[:used])
        if events is not None and cfg.modified:
            e = int(ctr[5])
            events.extend(LedgerEvent(int(s), int(j), float(h), int(w))
                          for s, j, h, w in zip(ev[0][:e], ev[1][:e], ev[2][:e], ev[3][:e]))
    stats.proper_steps = int(ctr[1])
    stats.improper_steps = int(ctr[2])
    if ctr[4] > 0:
        status = LEFT_BODY
    elif ctr[1] < cfg.proper_steps:
        status = HIT_I_MAX
    else:
        status = OK
    return WalkResult(
        Y=x, stats=stats, status=status,
        accept_flags=np.concatenate(flag_parts) if record and flag_parts else (
            np.zeros(0, np.uint8) if record else None),
        events=events,
        audit_failures=int(ctr[4]),
        first_audit_failure=int(ctr[3]) if ctr[3] >= 0 else None,
    )


def speedy_to_uniform(Y, poly: Polytope, n: int | None = None, *,
                      frame_ball: FrameBall | None = None) -> tuple[np.ndarray, bool]:
    """Rescale a speedy-walk endpoint by 2n/(2n-1) and test membership."""
    Y = np.asarray(Y, dtype=float)
    n = poly.n if n is None else n
    Z = (2.0 * n / (2.0 * n - 1.0)) * Y
    accepted = membership_full(poly, Z)[0]
    if accepted and frame_ball is not None:
        accepted = frame_ball.contains(Z)
    return Z, accepted


def sample_uniform_batch(poly: Polytope, x0, cfg: WalkConfig, p: int, rng: np.random.Generator | None = None,
                         *, frame_ball: FrameBall | None = None, threads: int = 1,
                         check_budget: int | None = None) -> BatchResult:
    """Restart the walk at ``x0`` until ``p`` rescaled endpoints are accepted.

    Restart k runs on the k-th substream spawned from ``rng``; ``cfg.i_max``
    caps the cumulative wall steps over all restarts.  With ``threads > 1``
    restarts are computed in waves and consumed in order, so results match the
    serial run unless the step cap binds mid-wave.
    """
    if p < 0:
        raise ContractError(f"p must be >= 0, got {p}")
    if rng is None:
        rng = make_rng(cfg.seed)
    n, m = poly.n, poly.m
    x0 = np.array(x0, dtype=float)
    rho = cfg.rho if cfg.rho is not None else poly.rho
    capped = poly.with_rho(rho)
    stats = WalkStats.zeros(m)
    samples: list[np.ndarray] = []
    if p == 0:
        return BatchResult(np.zeros((0, n)), stats, OK)
    _check_start(poly, x0, rho, frame_ball, strict=cfg.modified)
    init_slacks = None
    if cfg.modified:
        init_slacks = poly.normalized.slacks(x0)
        stats.init_checks = m
    status, runs = OK, 0
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        while len(samples) < p:
            remaining = cfg.i_max - stats.wall_steps
            if remaining <= 0:
                status = HIT_I_MAX
                break
            if check_budget is not None and stats.checks_used > check_budget:
                status = CHECK_BUDGET
                break
            wave = rng.spawn(max(1, threads))
            run_cfg = cfg.replace(i_max=max(remaining, cfg.proper_steps), rho=rho)

            def one(child):
                return ball_walk_run(poly, x0, run_cfg, child, frame_ball=frame_ball,
                                     init_slacks=init_slacks)

            results = list(pool.map(one, wave)) if pool else [one(c) for c in wave]
            for res in results:
                if len(samples) >= p:
                    break
                runs += 1
                stats.merge(res.stats)
                if res.status != OK or stats.wall_steps > cfg.i_max:
                    status = HIT_I_MAX if res.status != LEFT_BODY else LEFT_BODY
                    break
                Z, accepted = speedy_to_uniform(res.Y, capped, n, frame_ball=frame_ball)
                stats.rejection_attempts += 1
                stats.rejection_checks += m
                if accepted:
                    samples.append(Z)
                    stats.accepted_samples += 1
            if status != OK:
                break
    finally:
        if pool:
            pool.shutdown()
    return BatchResult(np.array(samples).reshape(-1, n), stats, status, runs)


def hit_and_run_step(poly: Polytope, x, rng: np.random.Generator, direction=None) -> np.ndarray:
    """One hit-and-run step: uniform point on the chord through ``x``."""
    x = np.asarray(x, dtype=float)
    if direction is None:
        u = rng.standard_normal(poly.n)
        u /= np.linalg.norm(u)
    else:
        u = np.asarray(direction, dtype=float)
        u = u / np.linalg.norm(u)
    lo, hi = chord(poly, x, u)
    return x + rng.uniform(lo, hi) * u


def chord(poly: Polytope, x, u) -> tuple[float, float]:
    """Parameter range ``[lo, hi]`` with ``x + t u`` in the body (m dot products)."""
    s = poly.b - poly.A @ x
    if np.any(s <= 0) or (poly.rho is not None and float(x @ x) >= poly.rho ** 2):
        raise ContractError("chord needs a strictly interior point")
    au = poly.A @ u
    with np.errstate(divide="ignore"):
        ratios = s / au
    hi = float(np.min(ratios[au > 0], initial=math.inf))
    lo = float(np.max(ratios[au < 0], initial=-math.inf))
    if poly.rho is not None:
        xu = float(x @ u)
        disc = xu * xu - float(x @ x) + poly.rho ** 2
        r = math.sqrt(disc)
        lo, hi = max(lo, -xu - r), min(hi, -xu + r)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ContractError("unbounded chord; body needs a cap or bounding rows")
    if hi - lo <= 1e-14 * max(1.0, abs(hi), abs(lo)):
        raise ContractError("empty chord: point is on the boundary")
    return lo, hi


def hit_and_run(poly: Polytope, x0, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Chain of ``steps`` hit-and-run moves; returns all visited points."""
    out = np.empty((steps, poly.n))
    x = np.asarray(x0, dtype=float)
    for i in range(steps):
        x = hit_and_run_step(poly, x, rng)
        out[i] = x
    return out


# parameter rules -------------------------------------------------------------
@dataclass(frozen=True)
class PaperParameters:
    """Theory-driven constants; ``c`` and ``c2`` are unspecified universal constants."""

    n: int
    m: int
    eps: float
    p: int
    proper_steps: int
    eta: float
    alpha: float
    gamma: float
    i_max: float
    checks_cap: float
    i_star: int
    rho_cap: float


def i_star(n: int, R_over_r: float) -> int:
    """Number of nested bodies: ``ceil(n log2(R/r))``."""
    return max(0, math.ceil(n * math.log2(R_over_r) - 1e-12))


def paper_parameters(n: int, m: int, eps: float, R_over_r: float, *, c: float = 1.0,
                     c2: float = 1.0) -> PaperParameters:
    if not 0 < eps < 1:
        raise ContractError(f"eps must lie in (0, 1), got {eps}")
    if R_over_r < 1:
        raise ContractError(f"R/r must be >= 1, got {R_over_r}")
    log = math.log
    p = max(n + 1, math.ceil(n * c * log(1 / eps) ** 2 * log(n) ** 2))
    rho = 20 * math.sqrt(n) * log(40 * n ** 2 * p ** 2 / eps)
    loglog_ratio = max(log(log(R_over_r)), 1.0) if R_over_r > math.e else 1.0
    proper = math.ceil(c2 * n ** 2 * rho * log(log(rho)) * log(n * p ** 2 / eps) ** 3 * loglog_ratio)
    eta = 1.0 / (30 * math.sqrt(n * log(n / eps)))
    eta_hat = eta * math.sqrt(n) / 10
    istar = i_star(n, R_over_r)
    base = 2000 * (2 + p) * max(istar, 1) * proper * m
    q = 20 * m * eta_hat / eps
    i_max = (base * (16 / n * q + 32 * q / n * log(n * eps / (20 * m * eta_hat)) + eps / (n * p))) ** 2
    i_max = max(i_max, float(proper))

    def cap_for(i_max_value):
        alpha = 4 * log(2 * n * p * i_max_value / eps)
        gamma = alpha * eta * math.sqrt(n)
        if gamma < n:
            freq = 16 * gamma / n + 32 * gamma / n * log(n / gamma) + 6 * eps / (n * p)
        else:  # the frequency bound needs gamma < n; a full scan checks every row
            freq = 1.0
        checks = base * freq
        return alpha, gamma, checks

    alpha, gamma, checks = cap_for(i_max)
    if checks > i_max:
        # i_max >= checks_cap is required; one more pass settles alpha (it is logarithmic in i_max)
        i_max = checks
        alpha, gamma, checks = cap_for(i_max)
        i_max = max(i_max, checks)
    return PaperParameters(n, m, eps, p, proper, eta, alpha, gamma, i_max, checks, istar, rho)


def practical_eta(n: int) -> float:
    return 1.0 / (30 * math.sqrt(max(n * math.log(n), 1.0)))


def practical_alpha(m: int) -> float:
    return 4 * math.log(2 * m * 1e8)


def default_parameters(n: int, m: int, eps: float = 0.1, R_over_r: float = 1.0,
                       mode: str = "practical", *, proper_steps: int | None = None,
                       c: float = 1.0, c2: float = 1.0, seed: int | None = None) -> WalkConfig:
    """Walk parameters in ``paper`` (formula-faithful) or ``practical`` mode."""
    if not 0 < eps < 1:
        raise ContractError(f"eps must lie in (0, 1), got {eps}")
    if R_over_r < 1:
        raise ContractError(f"R/r must be >= 1, got {R_over_r}")
    if mode == "paper":
        pp = paper_parameters(n, m, eps, R_over_r, c=c, c2=c2)
        proper = pp.proper_steps if proper_steps is None else proper_steps
        return WalkConfig(eta=pp.eta, alpha=pp.alpha, proper_steps=proper,
                          i_max=max(int(min(pp.i_max, STEP_CEILING)), proper), seed=seed)
    if mode == "practical":
        proper = 1000 if proper_steps is None else proper_steps
        return WalkConfig(eta=practical_eta(n), alpha=practical_alpha(m), proper_steps=proper,
                          i_max=100 * proper, seed=seed)
    raise ContractError(f"unknown parameter mode {mode!r}")


def agreement_alpha(m: int, i_max: int, eps_hat: float) -> float:
    """Smallest tolerance for which ON/OFF agree with probability >= 1 - eps_hat."""
    return 4 * math.log(2 * m * i_max / eps_hat)
