"""Scalarized objective over plan metrics and coordinate-descent tuning of policy tables.

Every metric is scored by a piecewise-linear penalty that is zero at both
acceptable bounds, negative in between (lowest at the midpoint) and rises
ten times faster outside the bounds. The objective is the sum over the
three metrics; lower is better.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .engine import EvalContext, MetricsReport, evaluate_policy
from .errors import EvaluationFailure
from .policy import PolicyTable

logger = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-12
COLUMNS = ("portfolio_id", "payout_level", "target_ratio")
OUTER_FACTOR = 10.0


@dataclass(frozen=True)
class MetricSpec:
    low: float
    high: float
    priority: float = 1.0

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"need low < high, got [{self.low}, {self.high}]")
        if not self.priority > 0:
            raise ValueError(f"priority must be positive, got {self.priority}")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.low + self.high)

    @property
    def inner_slope(self) -> float:
        return 0.5 * (self.high - self.low)

    @property
    def outer_slope(self) -> float:
        return OUTER_FACTOR * self.inner_slope


def eta(x: float, spec: MetricSpec) -> float:
    p = spec.priority
    if x < spec.low:
        return p * spec.outer_slope * (spec.low - x)
    if x < spec.midpoint:
        return p * spec.inner_slope * (spec.low - x)
    if x < spec.high:
        return p * spec.inner_slope * (x - spec.high)
    return p * spec.outer_slope * (x - spec.high)


@dataclass(frozen=True)
class ObjectiveSpec:
    c: MetricSpec
    q_bar: MetricSpec
    delta_q: MetricSpec

    def scaled(self, factor: float) -> "ObjectiveSpec":
        def s(m):
            return MetricSpec(m.low, m.high, m.priority * factor)

        return ObjectiveSpec(s(self.c), s(self.q_bar), s(self.delta_q))


def objective(report: MetricsReport, spec: ObjectiveSpec) -> float:
    return eta(report.c, spec.c) + eta(report.q_bar, spec.q_bar) + eta(report.delta_q, spec.delta_q)


@dataclass(frozen=True)
class ActionGrids:
    """Candidate values per column, in the order they are tried.

    ``call_floor``: rows whose bin lies entirely below this ratio may not
    drop the cash call (``None`` is removed from their target candidates).
    """

    portfolio_ids: tuple[int, ...]
    payout_levels: tuple[float, ...]
    target_ratios: tuple[float | None, ...]
    call_floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "portfolio_ids", tuple(int(p) for p in self.portfolio_ids))
        object.__setattr__(self, "payout_levels", tuple(float(q) for q in self.payout_levels))
        object.__setattr__(self, "target_ratios", tuple(None if r is None else float(r) for r in self.target_ratios))
        if not (self.portfolio_ids and self.payout_levels and self.target_ratios):
            raise ValueError("every grid needs at least one candidate")
        if list(self.payout_levels) != sorted(self.payout_levels):
            raise ValueError("payout levels must be sorted")
        numeric = [r for r in self.target_ratios if r is not None]
        if numeric != sorted(numeric):
            raise ValueError("target ratios must be sorted")

    def check(self, payout_bounds: tuple[float, float]) -> None:
        lo, hi = payout_bounds
        bad = [q for q in self.payout_levels if not lo - 1e-9 <= q <= hi + 1e-9]
        if bad:
            raise ValueError(f"payout grid values {bad} fall outside plan bounds [{lo}, {hi}]")

    def candidates(self, table: PolicyTable, row: int, column: str) -> tuple:
        if column == "portfolio_id":
            return self.portfolio_ids
        if column == "payout_level":
            return self.payout_levels
        if table.bins.bounds(row)[1] <= self.call_floor:
            return tuple(r for r in self.target_ratios if r is not None)
        return self.target_ratios

    def contains(self, table: PolicyTable) -> bool:
        for i, r in enumerate(table.rows):
            if r.portfolio_id not in self.portfolio_ids or r.payout_level not in self.payout_levels:
                return False
            if r.target_ratio not in self.candidates(table, i, "target_ratio"):
                return False
        return True


def payout_grid(bounds: tuple[float, float], step: float = 1.0) -> tuple[float, ...]:
    lo, hi = bounds
    n = int(round((hi - lo) / step))
    return tuple(round(lo + k * step, 10) for k in range(n + 1))


@dataclass
class TuneLogEntry:
    sweep: int
    row: int
    column: str
    candidate: object
    h: float
    accepted: bool

    def to_text(self) -> str:
        cand = "none" if self.candidate is None else repr(self.candidate)
        return f"{self.sweep}\t{self.row}\t{self.column}\t{cand}\t{self.h!r}\t{int(self.accepted)}"


@dataclass
class TuneResult:
    table: PolicyTable
    h: float
    log: list[TuneLogEntry] = field(default_factory=list)
    evaluations: int = 0
    sweeps: int = 0
    one_optimal: bool = False

    @property
    def accepted(self) -> list[TuneLogEntry]:
        return [e for e in self.log if e.accepted]


class Evaluator:
    """Cached h(table) on one fixed context; aborts beyond the allowed share raise."""

    def __init__(self, ctx: EvalContext, spec: ObjectiveSpec, workers: int = 1):
        self.ctx, self.spec, self.workers = ctx, spec, workers
        self.cache: dict = {}
        self.calls = 0

    def report(self, table: PolicyTable) -> MetricsReport:
        rep, _ = evaluate_policy(table, self.ctx)
        limit = self.ctx.config.max_abort_fraction * rep.n_scenarios
        if rep.n_aborted > limit:
            raise EvaluationFailure(f"{rep.n_aborted} of {rep.n_scenarios} scenarios aborted")
        return rep

    def __call__(self, table: PolicyTable) -> float:
        key = table.key()
        if key not in self.cache:
            self.calls += 1
            self.cache[key] = objective(self.report(table), self.spec)
        return self.cache[key]

    def many(self, tables: Sequence[PolicyTable]) -> list[float]:
        if self.workers > 1 and len(tables) > 1:
            todo = [t for t in tables if t.key() not in self.cache]
            with ThreadPoolExecutor(self.workers) as pool:
                vals = list(pool.map(lambda t: objective(self.report(t), self.spec), todo))
            for t, v in zip(todo, vals):
                if t.key() not in self.cache:
                    self.calls += 1
                    self.cache[t.key()] = v
        return [self(t) for t in tables]


def _cells(table: PolicyTable):
    for row in reversed(range(len(table.rows))):
        for column in COLUMNS:
            yield row, column


def tune(
    initial_table: PolicyTable,
    grids: ActionGrids,
    ctx: EvalContext,
    spec: ObjectiveSpec,
    max_sweeps: int = 50,
    workers: int = 1,
    progress: Callable[[TuneLogEntry], None] | None = None,
) -> TuneResult:
    """Cell-by-cell descent until no single-cell change improves h.

    Cells are visited top ratio bin first, columns in ``COLUMNS`` order.
    Every candidate of a cell is evaluated with the rest of the table fixed;
    the best one (earliest on ties) replaces the incumbent only if it lowers
    h by more than ``IMPROVEMENT_TOL``. The run stops once a full cycle of
    cells passes without a change, or after ``max_sweeps`` sweeps.
    """
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be at least 1")
    grids.check(ctx.rules.payout_bounds)
    if not grids.contains(initial_table):
        raise ValueError("initial table has entries outside the action grids")
    ev = Evaluator(ctx, spec, workers)
    table = initial_table
    h = ev(table)
    n_cells = 3 * len(table.rows)
    counter = 0
    log: list[TuneLogEntry] = []
    for sweep in range(1, max_sweeps + 1):
        for row, column in _cells(table):
            current = getattr(table.rows[row], column)
            cands = [v for v in grids.candidates(table, row, column) if v != current]
            trials = [table.with_cell(row, column, v) for v in cands]
            values = ev.many(trials)
            best = min(range(len(values)), key=values.__getitem__) if values else None
            accept = best is not None and values[best] < h - IMPROVEMENT_TOL
            for i, (v, hv) in enumerate(zip(cands, values)):
                entry = TuneLogEntry(sweep, row, column, v, hv, accept and i == best)
                log.append(entry)
                if progress:
                    progress(entry)
            if accept:
                table, h = trials[best], values[best]
                counter = 0
                logger.info("sweep %d: row %d %s -> %r, h = %.6g", sweep, row, column, cands[best], h)
            else:
                counter += 1
            if counter >= n_cells:
                return TuneResult(table, h, log, ev.calls, sweep, True)
    return TuneResult(table, h, log, ev.calls, max_sweeps, False)


@dataclass(frozen=True)
class Violation:
    row: int
    column: str
    value: object
    improvement: float


def verify_one_optimality(
    table: PolicyTable, grids: ActionGrids, ctx: EvalContext, spec: ObjectiveSpec, workers: int = 1
) -> tuple[bool, Violation | None]:
    """Re-test every single-cell change; returns (one-optimal?, largest improving move)."""
    ev = Evaluator(ctx, spec, workers)
    h = ev(table)
    worst = None
    for row, column in _cells(table):
        current = getattr(table.rows[row], column)
        cands = [v for v in grids.candidates(table, row, column) if v != current]
        for v, hv in zip(cands, ev.many([table.with_cell(row, column, v) for v in cands])):
            gain = h - hv
            if gain > IMPROVEMENT_TOL and (worst is None or gain > worst.improvement):
                worst = Violation(row, column, v, gain)
    return worst is None, worst


def exhaustive_search(
    base: PolicyTable, grids: ActionGrids, ctx: EvalContext, spec: ObjectiveSpec, columns=COLUMNS
) -> tuple[PolicyTable, float]:
    """Brute-force minimum of h over all tables varying ``columns`` on the grids.

    Tables are enumerated in lexicographic grid order, so ties go to the
    first one enumerated. Only sensible for a handful of cells.
    """
    cells = [(row, col) for row in range(len(base.rows)) for col in columns]
    choices = [grids.candidates(base, row, col) for row, col in cells]
    ev = Evaluator(ctx, spec)
    best, best_h = None, float("inf")
    for combo in itertools.product(*choices):
        t = base
        for (row, col), v in zip(cells, combo):
            t = t.with_cell(row, col, v)
        hv = ev(t)
        if hv < best_h:
            best, best_h = t, hv
    return best, best_h
