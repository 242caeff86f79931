"""Volume by a telescoping product over the nested bodies, plus the
determinant rescaling of a volume measured in a rounded frame."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import AffineMap, ContractError, Polytope, ball_log_volume
from .rounding import RoundingConfig, _iterate
from .walks import make_rng

#: ratios above ``e * (1 + RATIO_SLACK)`` are flagged as unreliable.
RATIO_SLACK = 0.2


@dataclass
class VolumeEstimate:
    log_volume: float
    rel_error: float
    ratios: list[float] = field(default_factory=list)
    ratio_errors: list[float] = field(default_factory=list)
    unreliable: list[int] = field(default_factory=list)
    succeeded: bool = True
    reason: str = ""
    checks_used: int = 0

    @property
    def volume(self) -> float:
        return math.exp(self.log_volume)

    def to_dict(self) -> dict:
        return {
            "volume": self.volume,
            "log_volume": self.log_volume,
            "rel_error": self.rel_error,
            "ratios": self.ratios,
            "ratio_errors": self.ratio_errors,
            "unreliable": self.unreliable,
            "succeeded": self.succeeded,
            "reason": self.reason,
            "checks_used": int(self.checks_used),
        }


def volume_telescoping(poly: Polytope, cfg: RoundingConfig, samples_per_ratio: int = 10_000,
                       rng: np.random.Generator | None = None) -> VolumeEstimate:
    """``Vol(r B) * prod_i Vol(K_i) / Vol(K_{i-1})`` for i = 1..i*.

    Each ratio is the inverse hit fraction of ``K_i`` samples that fall in
    ``K_{i-1}`` (a single radius comparison).  ``cfg.p`` is replaced by
    ``samples_per_ratio``; the samples also drive the frame updates, so every
    body is sampled in a near-isotropic frame.
    """
    if samples_per_ratio < poly.n + 1:
        raise ContractError(f"samples_per_ratio must be >= n + 1 = {poly.n + 1}")
    rng = make_rng(cfg.walk.seed) if rng is None else rng
    cfg = cfg.replace(p=samples_per_ratio)
    n = poly.n
    iterations = cfg.i_star_for(n)
    est = VolumeEstimate(ball_log_volume(n, cfg.r), 0.0)
    var = 0.0
    shrink = 1.0 / (1.0 + 1.0 / n)

    def on_samples(i, samples, amap, radius):
        nonlocal var
        X = amap.forward(samples)
        inner = radius * shrink
        hits = int(np.count_nonzero(np.einsum("ij,ij->i", X, X) <= inner * inner))
        N = samples.shape[0]
        frac = max(hits, 1) / N
        ratio = 1.0 / frac
        var_i = (1.0 - frac) / (N * frac)
        est.ratios.append(ratio)
        est.ratio_errors.append(ratio * math.sqrt(var_i))
        if not ratio <= math.e * (1 + RATIO_SLACK) or hits == 0:
            est.unreliable.append(i)
        est.log_volume += math.log(ratio)
        var += var_i

    res = _iterate(poly, cfg, rng, iterations, cfg.checks_cap, on_samples=on_samples)
    est.rel_error = math.sqrt(var)
    est.checks_used = res.checks_used
    if not res.succeeded:
        est.succeeded, est.reason = False, res.reason
    return est


def volume_rescale(vol_rounded: float, amap: AffineMap, scale: float = 1.0) -> float:
    """``scale^-n * det(F) * vol_rounded`` evaluated in log space."""
    if not vol_rounded > 0:
        raise ContractError(f"vol_rounded must be > 0, got {vol_rounded}")
    if not scale > 0:
        raise ContractError(f"scale must be > 0, got {scale}")
    return math.exp(math.log(vol_rounded) + amap.log_det_factor - amap.n * math.log(scale))
