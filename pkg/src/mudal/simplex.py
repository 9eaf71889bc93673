"""Similarity-matrix storage, exact Euclidean simplex projection, and the
budget-assignment pipeline that tracks each domain's cumulative labeling share
toward its column importance."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

BUDGET_MODES = ("target_tracking", "paper_literal")


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based, exact).

    Returns argmin_{w >= 0, sum w = 1} ||w - v||_2.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a nonempty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("input must be finite")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def column_importance(alpha: np.ndarray | "SimilarityMatrix") -> np.ndarray:
    """Column means of the similarity matrix: labeled domain j's overall weight."""
    a = alpha.alpha if isinstance(alpha, SimilarityMatrix) else np.asarray(alpha, dtype=np.float64)
    return a.mean(axis=0)


@dataclass
class SimilarityMatrix:
    """Row-stochastic N x N matrix: row i holds the mixture weights of the
    surrogate for original domain i over the labeled domains."""

    alpha: np.ndarray

    def __post_init__(self) -> None:
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 2 or self.alpha.shape[0] != self.alpha.shape[1]:
            raise ValueError("alpha must be square")
        self.validate()

    @classmethod
    def uniform(cls, n: int) -> "SimilarityMatrix":
        return cls(np.full((n, n), 1.0 / n))

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    def validate(self, atol: float = 1e-9) -> None:
        if np.any(self.alpha < -atol):
            raise ValueError("alpha entries must be nonnegative")
        rows = self.alpha.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > atol):
            raise ValueError(f"alpha rows must sum to 1 (got {rows})")

    def column_importance(self) -> np.ndarray:
        return column_importance(self.alpha)

    def project_rows(self) -> "SimilarityMatrix":
        self.alpha = np.stack([project_simplex(row) for row in self.alpha])
        return self

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write(",".join(f"L{j}" for j in range(self.n)) + "\n")
            for row in self.alpha:
                f.write(",".join(format(x, ".9g") for x in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "SimilarityMatrix":
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        mat = cls.__new__(cls)
        mat.alpha = np.asarray(raw, dtype=np.float64)
        mat.validate(atol=1e-6)  # text round-trip loses a little precision
        return mat


@dataclass
class BudgetLedger:
    """Bookkeeping for the total budget m0 + R*m and its per-domain split.

    beta(r) is exactly (initial_counts + sum of increments through round r)
    divided by (m0 + r*m), all in integer arithmetic on counts.
    """

    m0: int
    m: int
    initial_counts: np.ndarray
    increments: list[np.ndarray] = field(default_factory=list)
    clamp_rounds: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.initial_counts = np.asarray(self.initial_counts, dtype=np.int64)
        if self.initial_counts.sum() != self.m0:
            raise ValueError("initial counts must sum to m0")

    @property
    def n_domains(self) -> int:
        return self.initial_counts.size

    @property
    def rounds_recorded(self) -> int:
        return len(self.increments)

    def record(self, incr: np.ndarray, clamped: bool = False) -> None:
        incr = np.asarray(incr, dtype=np.int64)
        if incr.shape != self.initial_counts.shape:
            raise ValueError("increment shape mismatch")
        if np.any(incr < 0):
            raise ValueError("increments must be nonnegative")
        if incr.sum() != self.m:
            raise ValueError(f"increments must sum to m={self.m}, got {incr.sum()}")
        self.increments.append(incr)
        if clamped:
            self.clamp_rounds.append(len(self.increments))

    def labeled_counts(self, r: int | None = None) -> np.ndarray:
        if r is None:
            r = len(self.increments)
        counts = self.initial_counts.copy()
        for incr in self.increments[:r]:
            counts += incr
        return counts

    def beta(self, r: int | None = None) -> np.ndarray:
        if r is None:
            r = len(self.increments)
        total = self.m0 + r * self.m
        return self.labeled_counts(r) / total

    def total_budget(self, r: int | None = None) -> int:
        if r is None:
            r = len(self.increments)
        return self.m0 + r * self.m


def largest_remainder_round(fractions: np.ndarray, m: int) -> np.ndarray:
    """Round nonnegative fractions summing to m onto integers summing to m:
    floor everything, then hand out the remaining units by descending
    fractional part, ties to the lower index."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0):
        raise ValueError("fractions must be nonnegative")
    floors = np.floor(fractions).astype(np.int64)
    remainder = int(m - floors.sum())
    if remainder < 0:
        # only reachable through float drift; trim from the smallest fractional parts
        order = np.lexsort((np.arange(fractions.size), fractions - floors))
        for idx in order:
            if remainder == 0:
                break
            if floors[idx] > 0:
                floors[idx] -= 1
                remainder += 1
        return floors
    fracpart = fractions - floors
    order = np.lexsort((np.arange(fractions.size), -fracpart))
    floors[order[:remainder]] += 1
    return floors


def _round_capped(raw: np.ndarray, m: int, capacities: np.ndarray) -> np.ndarray:
    """Clamp raw desires at 0 and capacity, scale to sum m, round with largest
    remainder, then repair any capacity overshoot deterministically."""
    capacities = np.asarray(capacities, dtype=np.int64)
    if capacities.sum() < m:
        raise ValueError(
            f"infeasible budget: only {capacities.sum()} unlabeled points for m={m}"
        )
    x = np.minimum(np.maximum(raw, 0.0), capacities.astype(np.float64))
    if x.sum() <= 0:
        # no domain wants budget; spread it by remaining capacity
        x = capacities.astype(np.float64).copy()
    incr = largest_remainder_round(x * (m / x.sum()), m)
    while True:
        over = incr - capacities
        excess = int(over[over > 0].sum())
        if excess == 0:
            break
        incr = np.minimum(incr, capacities)
        spare = capacities - incr
        for j in np.argsort(-spare, kind="stable"):
            if excess == 0:
                break
            give = int(min(spare[j], excess))
            incr[j] += give
            excess -= give
    return incr


def assign_budget(alpha_cols: np.ndarray, ledger: BudgetLedger, round_r: int,
                  capacities: np.ndarray, mode: str = "target_tracking",
                  prev_alpha_cols: np.ndarray | None = None) -> np.ndarray:
    """Per-domain increments for query round round_r (>= 1), summing to m.

    target_tracking (default) drives cumulative counts toward
    alpha_cols * (m0 + r*m); paper_literal uses the difference
    (alpha_cols - prev_alpha_cols) * m. Both share the clamp / cap /
    renormalize / largest-remainder pipeline.
    """
    if round_r < 1:
        raise ValueError("query rounds start at 1")
    if mode not in BUDGET_MODES:
        raise ValueError(f"unknown budget mode {mode!r}")
    alpha_cols = np.asarray(alpha_cols, dtype=np.float64)
    capacities = np.asarray(capacities, dtype=np.int64)
    if mode == "target_tracking":
        target = alpha_cols * ledger.total_budget(round_r)
        raw = target - ledger.labeled_counts(round_r - 1)
    else:
        if prev_alpha_cols is None:
            raise ValueError("paper_literal mode needs the previous round's alpha columns")
        raw = (alpha_cols - np.asarray(prev_alpha_cols, dtype=np.float64)) * ledger.m
    clamped = bool(np.any(raw < 0) or np.any(raw > capacities))
    if clamped:
        log.info("budget round %d: clamping triggered (raw=%s)", round_r, np.round(raw, 3))
    return _round_capped(raw, ledger.m, capacities)
