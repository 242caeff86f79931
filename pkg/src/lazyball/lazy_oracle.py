"""Deadline ledger: lazy recheck scheduling of linear constraints.

After constraint ``j`` is measured with slack ``h`` at step ``i`` it is not
looked at again until step ``i + max(floor(h * sqrt(n) / (alpha * eta)), 1)``.
Deadlines live in a circular array of one-step buckets, each bucket an
intrusive singly linked list (``head[bucket]`` -> ``nxt[j]`` -> ... -> -1), so
collecting the constraints due at the current step is O(1 + #due) and
advancing the clock is a pointer increment.

The bucket arrays are plain numpy arrays so the compiled walk kernel in
:mod:`lazyball.walks` manipulates the very same state through the
``_ledger_*`` helpers below.
"""
from __future__ import annotations

import json
import math
from typing import NamedTuple

import numba
import numpy as np

from .geometry import ContractError, Polytope

#: Upper bound on the bucket-array length; longer waits are clamped (always safe).
MAX_BINS = 1 << 18

EMPTY = -1


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _wait(h, sqrt_n, alpha_eta, capacity):
    if h <= 0.0:
        return 1
    t = h * sqrt_n / alpha_eta
    if t >= capacity - 1:
        return capacity - 1
    # snap rounding noise (e.g. sqrt(2) / (0.1 sqrt(2)) = 9.999...98) to the integer
    r = math.floor(t + 0.5)
    w = int(r) if abs(t - r) <= 1e-9 * t else int(math.floor(t))
    return w if w > 1 else 1


@numba.njit(cache=True, nogil=True)
def _ledger_schedule(head, nxt, deadline, last_check, j, step, w):
    capacity = head.shape[0]
    d = step + w
    deadline[j] = d
    last_check[j] = step
    bucket = d % capacity
    nxt[j] = head[bucket]
    head[bucket] = j


@numba.njit(cache=True, nogil=True)
def _ledger_pop(head, nxt, step, out):
    """Unlink the bucket for ``step`` into ``out``; returns the count."""
    bucket = step % head.shape[0]
    j = head[bucket]
    head[bucket] = -1
    k = 0
    while j != -1:
        out[k] = j
        k += 1
        j = nxt[j]
    return k


@numba.njit(cache=True, nogil=True)
def _ledger_fill(head, nxt, deadline, last_check, slacks, sqrt_n, alpha_eta, step):
    head[:] = -1
    capacity = head.shape[0]
    for j in range(slacks.shape[0]):
        _ledger_schedule(head, nxt, deadline, last_check, j, step,
                         _wait(slacks[j], sqrt_n, alpha_eta, capacity))


class LedgerEvent(NamedTuple):
    step: int
    constraint: int
    slack: float
    wait: int


def write_event_log(events, fh) -> int:
    """Write events as JSON lines ``{"step", "constraint", "slack", "wait"}``; returns the count."""
    k = 0
    for ev in events:
        fh.write(json.dumps(ev._asdict()) + "\n")
        k += 1
    return k


def ledger_capacity(diameter: float, alpha: float, eta: float, n: int) -> int:
    """``ceil(D * sqrt(n) / (alpha * eta)) + 2``, clamped to [3, MAX_BINS]."""
    if alpha <= 0 or eta < 0:
        raise ContractError(f"need alpha > 0 and eta >= 0, got alpha={alpha}, eta={eta}")
    if eta == 0:
        return 3
    raw = diameter * math.sqrt(n) / (alpha * eta)
    if not math.isfinite(raw) or raw > MAX_BINS - 2:
        return MAX_BINS
    return max(3, math.ceil(raw) + 2)


class DeadlineLedger:
    """Per-constraint recheck deadlines for one walk.

    ``step`` is the absolute step counter N; the current bucket is
    ``step % capacity``.  ``n_checks[j]`` counts rechecks of ``j`` after
    initialisation (the N_j of the frequency analysis).
    """

    def __init__(self, m: int, n: int, alpha: float, eta: float, capacity: int):
        if alpha <= 0 or eta < 0:
            raise ContractError(f"need alpha > 0 and eta >= 0, got alpha={alpha}, eta={eta}")
        self.m, self.n = m, n
        self.alpha, self.eta = float(alpha), float(eta)
        self.budget_per_step = self.alpha * self.eta / math.sqrt(n)
        self.sqrt_n = math.sqrt(n)
        self.alpha_eta = self.alpha * self.eta
        self.head = np.full(capacity, EMPTY, dtype=np.int64)
        self.nxt = np.full(m, EMPTY, dtype=np.int64)
        self.deadline = np.zeros(m, dtype=np.int64)
        self.last_check = np.zeros(m, dtype=np.int64)
        self.n_checks = np.zeros(m, dtype=np.int64)
        self.step = 0
        self.events: list[LedgerEvent] | None = None

    @property
    def capacity(self) -> int:
        return self.head.shape[0]

    @property
    def pointer(self) -> int:
        return self.step % self.capacity

    @property
    def total_steps(self) -> int:
        return self.step

    @classmethod
    def for_polytope(cls, poly: Polytope, alpha: float, eta: float, slacks: np.ndarray) -> "DeadlineLedger":
        pos = slacks[slacks > 0]
        diameter = 2 * poly.rho if poly.rho is not None else 2 * float(pos.max(initial=1.0))
        return cls(poly.m, poly.n, alpha, eta, ledger_capacity(diameter, alpha, eta, poly.n))

    def wait_for(self, h: float) -> int:
        return int(_wait(float(h), self.sqrt_n, self.alpha_eta, self.capacity))

    def reset(self, slacks: np.ndarray) -> None:
        """Restart the clock at step 0 and schedule every row from ``slacks``."""
        self.step = 0
        self.n_checks[:] = 0
        _ledger_fill(self.head, self.nxt, self.deadline, self.last_check,
                     np.ascontiguousarray(slacks, dtype=float), self.sqrt_n, self.alpha_eta, 0)
        if self.events is not None:
            self.events.clear()

    def enable_event_log(self) -> None:
        self.events = []

    # the four ledger operations ------------------------------------------
    def advance_pointer(self) -> None:
        self.step += 1

    def due_constraints(self, i: int) -> np.ndarray:
        if i != self.step:
            raise ContractError(f"ledger is at step {self.step}, asked for step {i}")
        out = np.empty(self.m, dtype=np.int64)
        k = _ledger_pop(self.head, self.nxt, i, out)
        return out[:k]

    def recheck_and_reschedule(self, poly: Polytope, j: int, x, i: int) -> tuple[float, bool]:
        h = float(poly.b[j] - poly.A[j] @ np.asarray(x, dtype=float))
        self.n_checks[j] += 1
        violated = h < 0
        w = 1 if violated else self.wait_for(h)
        _ledger_schedule(self.head, self.nxt, self.deadline, self.last_check, j, i, w)
        if self.events is not None:
            self.events.append(LedgerEvent(i, int(j), h, w))
        return h, violated

    # introspection -------------------------------------------------------
    def buckets(self) -> dict[int, list[int]]:
        """Non-empty buckets as ``{bucket_index: [rows]}`` (walks the lists)."""
        out: dict[int, list[int]] = {}
        for bucket in np.flatnonzero(self.head != EMPTY):
            rows, j = [], int(self.head[bucket])
            while j != EMPTY:
                rows.append(j)
                j = int(self.nxt[j])
            out[int(bucket)] = rows
        return out

    def check_invariants(self) -> None:
        seen = np.zeros(self.m, dtype=np.int64)
        for bucket, rows in self.buckets().items():
            for j in rows:
                seen[j] += 1
                if self.deadline[j] % self.capacity != bucket:
                    raise AssertionError(f"row {j} sits in bucket {bucket} but is due at {self.deadline[j]}")
                if not self.step < self.deadline[j] <= self.step + self.capacity - 1:
                    raise AssertionError(f"row {j} deadline {self.deadline[j]} outside window at step {self.step}")
        if not np.all(seen == 1):
            raise AssertionError(f"rows not in exactly one bucket: {np.flatnonzero(seen != 1).tolist()}")


def ledger_init(poly: Polytope, x0, alpha: float, eta: float) -> DeadlineLedger:
    """Measure all m slacks at ``x0`` and schedule each row.

    Raises :class:`ContractError` unless every slack is strictly positive.
    """
    x0 = np.asarray(x0, dtype=float)
    slacks = poly.slacks(x0)
    if np.any(slacks <= 0):
        raise ContractError(f"x0 is not strictly interior (row {int(np.argmin(slacks))} has slack "
                            f"{slacks.min():.3g})")
    ledger = DeadlineLedger.for_polytope(poly, alpha, eta, slacks)
    ledger.reset(slacks)
    return ledger
