"""Polytope representation, exact membership and affine frames.

A :class:`Polytope` is the body ``{x : A x <= b}``, optionally intersected with
the origin-centred ball of radius ``rho``.  Slacks are raw ``b_j - A_j x``;
Euclidean distances divide by the cached row norms.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

#: ``first_violated`` value reported when only the ball cap fails.
CAP_VIOLATED = -1


class ContractError(ValueError):
    """Raised when an operation's preconditions are not met."""


def _as_vector(x, n: int, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != n:
        raise ContractError(f"{name} must be a vector of length {n}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} must be finite")
    return x


class Polytope:
    """The body ``{x : A x <= b} ∩ rho B`` (cap omitted when ``rho`` is None).

    Arrays are copied and frozen on construction; instances are safe to share
    read-only.
    """

    def __init__(self, A, b, rho: float | None = None):
        A = np.array(A, dtype=float, ndmin=2)
        b = np.array(b, dtype=float, ndmin=1)
        if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
            raise ContractError(f"A must be a non-empty m x n matrix, got shape {A.shape}")
        if b.shape != (A.shape[0],):
            raise ContractError(f"b must have length {A.shape[0]}, got shape {b.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ContractError("A and b must be finite")
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms == 0.0):
            bad = np.flatnonzero(norms == 0.0).tolist()
            raise ContractError(f"all-zero constraint rows: {bad}")
        if rho is not None:
            rho = float(rho)
            if not (rho > 0 and math.isfinite(rho)):
                raise ContractError(f"rho must be positive and finite, got {rho}")
        for arr in (A, b, norms):
            arr.setflags(write=False)
        self._A = A
        self._b = b
        self._norms = norms
        self._rho = rho

    A = property(lambda self: self._A)
    b = property(lambda self: self._b)
    rho = property(lambda self: self._rho)
    row_norms = property(lambda self: self._norms)

    @property
    def m(self) -> int:
        return self._A.shape[0]

    @property
    def n(self) -> int:
        return self._A.shape[1]

    def __repr__(self) -> str:
        return f"Polytope(m={self.m}, n={self.n}, rho={self.rho})"

    def with_rho(self, rho: float | None) -> "Polytope":
        return Polytope(self._A, self._b, rho)

    @cached_property
    def normalized(self) -> "Polytope":
        """Same body with unit-norm rows, so raw slack equals Euclidean distance."""
        return Polytope(self._A / self._norms[:, None], self._b / self._norms, self._rho)

    def slacks(self, x) -> np.ndarray:
        x = _as_vector(x, self.n)
        return self._b - self._A @ x

    def contains(self, x) -> bool:
        return membership_full(self, x)[0]

    # serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "A": self._A.tolist(),
            "b": self._b.tolist(),
            "rho": self._rho,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Polytope":
        try:
            A, b = data["A"], data["b"]
        except (KeyError, TypeError) as exc:
            raise ContractError(f"polytope JSON needs 'A' and 'b': {exc}") from None
        poly = cls(A, b, data.get("rho"))
        for key, actual in (("n", poly.n), ("m", poly.m)):
            if key in data and data[key] != actual:
                raise ContractError(f"declared {key}={data[key]} but A implies {actual}")
        return poly


def load_polytope(path) -> Polytope:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: invalid JSON ({exc})") from None
    return Polytope.from_dict(data)


def save_polytope(poly: Polytope, path) -> None:
    Path(path).write_text(json.dumps(poly.to_dict()) + "\n")


@dataclass(frozen=True)
class AffineMap:
    """Frame map ``y -> sigma_factor @ y + mu``.

    A body ``K`` in original coordinates is seen in the frame as
    ``sigma_factor^{-1} (K - mu)``.  ``sigma_factor`` is a square root of the
    estimated covariance (``Sigma = F F^T``); it need not be symmetric.
    """

    sigma_factor: np.ndarray
    sigma_inv_factor: np.ndarray
    mu: np.ndarray
    log_det_factor: float

    @classmethod
    def from_factor(cls, factor, mu=None) -> "AffineMap":
        factor = np.array(factor, dtype=float, ndmin=2)
        n = factor.shape[0]
        if factor.shape != (n, n):
            raise ContractError(f"factor must be square, got {factor.shape}")
        mu = np.zeros(n) if mu is None else _as_vector(mu, n, "mu").copy()
        sign, logdet = np.linalg.slogdet(factor)
        if sign == 0 or not np.isfinite(logdet):
            raise ContractError("affine factor is singular")
        inv = np.linalg.inv(factor)
        return cls(factor, inv, mu, float(logdet))

    @classmethod
    def identity(cls, n: int) -> "AffineMap":
        return cls(np.eye(n), np.eye(n), np.zeros(n), 0.0)

    @classmethod
    def scaling(cls, n: int, s: float) -> "AffineMap":
        return cls(s * np.eye(n), np.eye(n) / s, np.zeros(n), n * math.log(s))

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    def forward(self, y) -> np.ndarray:
        """Frame coordinates to original coordinates (works on row batches)."""
        return np.asarray(y) @ self.sigma_factor.T + self.mu

    def inverse(self, x) -> np.ndarray:
        """Original coordinates to frame coordinates (works on row batches)."""
        return (np.asarray(x) - self.mu) @ self.sigma_inv_factor.T

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """Map equal to ``self.forward(inner.forward(.))``."""
        return AffineMap(
            self.sigma_factor @ inner.sigma_factor,
            inner.sigma_inv_factor @ self.sigma_inv_factor,
            self.sigma_factor @ inner.mu + self.mu,
            self.log_det_factor + inner.log_det_factor,
        )

    def inverted(self) -> "AffineMap":
        return AffineMap(
            self.sigma_inv_factor,
            self.sigma_factor,
            -self.sigma_inv_factor @ self.mu,
            -self.log_det_factor,
        )

    @property
    def sigma(self) -> np.ndarray:
        return self.sigma_factor @ self.sigma_factor.T


def membership_full(poly: Polytope, x) -> tuple[bool, int | None]:
    """Exact membership; returns ``(inside, first_violated)``.

    ``first_violated`` is the smallest violated row, :data:`CAP_VIOLATED` if only
    the ball cap fails, or None when inside.  Costs m dot products.
    """
    s = poly.slacks(x)
    bad = np.flatnonzero(s < 0)
    if bad.size:
        return False, int(bad[0])
    if poly.rho is not None and float(np.dot(x, x)) > poly.rho ** 2:
        return False, CAP_VIOLATED
    return True, None


def slack(poly: Polytope, j: int, x) -> float:
    if not 0 <= j < poly.m:
        raise ContractError(f"constraint index {j} out of range [0, {poly.m})")
    x = _as_vector(x, poly.n)
    return float(poly.b[j] - poly.A[j] @ x)


def apply_affine(poly: Polytope, amap: AffineMap) -> Polytope:
    """The body ``amap^{-1}(K)``: ``{y : (A F) y <= b - A mu}``.

    The ball cap is dropped; callers re-cap explicitly.
    """
    if amap.n != poly.n:
        raise ContractError(f"map dimension {amap.n} != polytope dimension {poly.n}")
    if not np.isfinite(amap.log_det_factor):
        raise ContractError("affine map is singular")
    return Polytope(poly.A @ amap.sigma_factor, poly.b - poly.A @ amap.mu)


def distance_to_boundary(poly: Polytope, x) -> float:
    """Signed Euclidean distance to the nearest facet or the cap (negative outside)."""
    d = float(np.min(poly.slacks(x) / poly.row_norms))
    if poly.rho is not None:
        d = min(d, poly.rho - float(np.linalg.norm(x)))
    return d


def interior_point(poly: Polytope) -> np.ndarray:
    """The origin if it is strictly inside, else the Chebyshev centre (largest inscribed ball)."""
    origin = np.zeros(poly.n)
    if np.all(poly.b > 0):
        return origin
    from scipy.optimize import linprog

    # maximise t subject to A x + t |A_j| <= b
    c = np.zeros(poly.n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([poly.A, poly.row_norms[:, None]])
    res = linprog(c, A_ub=A_ub, b_ub=poly.b, bounds=[(None, None)] * poly.n + [(0, None)])
    if res.status != 0 or res.x[-1] <= 0:
        raise ContractError("body has empty interior (or is unbounded without a cap)")
    x = res.x[:-1]
    if poly.rho is not None and np.linalg.norm(x) >= poly.rho:
        raise ContractError("Chebyshev centre lies outside the ball cap")
    return x


def make_body(kind: str, n: int, *, scales=None, m: int | None = None, seed: int | None = None,
              rho: float | None = None) -> Polytope:
    """Standard test bodies.

    ``cube``: [-1,1]^n; ``scaled_cube``: prod [-s_i, s_i]; ``simplex``:
    {x >= 0, sum x <= 1}; ``cross_polytope``: {sum |x_i| <= 1} (n <= 20);
    ``random_rows``: m random unit normals at distance 1 from the origin.
    """
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    eye = np.eye(n)
    if kind == "cube":
        A, b = np.vstack([eye, -eye]), np.ones(2 * n)
    elif kind == "scaled_cube":
        s = np.asarray(scales if scales is not None else np.ones(n), dtype=float)
        if s.shape != (n,) or np.any(s <= 0):
            raise ContractError("scaled_cube needs n positive scales")
        A, b = np.vstack([eye, -eye]), np.concatenate([s, s])
    elif kind == "simplex":
        A = np.vstack([-eye, np.ones((1, n))])
        b = np.concatenate([np.zeros(n), [1.0]])
    elif kind == "cross_polytope":
        if n > 20:
            raise ContractError("cross_polytope is limited to n <= 20 (2^n rows)")
        signs = np.array(np.meshgrid(*[[1.0, -1.0]] * n, indexing="ij")).reshape(n, -1).T
        A, b = signs, np.ones(signs.shape[0])
    elif kind == "random_rows":
        if m is None or m < 1:
            raise ContractError("random_rows needs m >= 1")
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((m, n))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        b = np.ones(m)
    else:
        raise ContractError(f"unknown body kind {kind!r}")
    return Polytope(A, b, rho)


def ball_log_volume(n: int, r: float = 1.0) -> float:
    """log Vol(r B_n)."""
    return n * math.log(r) + 0.5 * n * math.log(math.pi) - math.lgamma(0.5 * n + 1)
