"""Asset-to-liability ratio, bin-indexed action tables and the external-cash rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DivisionByZero, PayoutOutOfRange, SchemaError
from .market import PortfolioSpec
from .population import LiabilityProjection

TABLE_SCHEMA = "# adaptive_pension policy_table v1"

DEFAULT_EDGES = tuple(round(0.2 * k, 10) for k in range(1, 12))  # 0.2 .. 2.2


def extended_ratio(v: float, L: float) -> float:
    """v/L for healthy plans, +inf when nothing is owed, 0 when assets are negative."""
    if v < 0:
        return 0.0
    if L <= 0:
        return math.inf
    return v / L


def extended_ratio_array(v: np.ndarray, L: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(L > 0, v / np.where(L > 0, L, 1.0), np.inf)
    return np.where(v < 0, 0.0, rho)


@dataclass(frozen=True)
class RatioBins:
    """Half-open bins [0, e1), [e1, e2), ..., [ek, inf)."""

    edges: tuple[float, ...] = DEFAULT_EDGES

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if any(e < 0 for e in edges) or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"bin edges must be non-negative and strictly increasing, got {edges}")
        object.__setattr__(self, "edges", edges)

    def __len__(self):
        return len(self.edges) + 1

    def index(self, rho):
        """Bin index of ``rho`` (scalar or array); +inf lands in the top bin."""
        return np.searchsorted(self.edges, rho, side="right")

    def bounds(self, i: int) -> tuple[float, float]:
        lo = 0.0 if i == 0 else self.edges[i - 1]
        hi = math.inf if i == len(self.edges) else self.edges[i]
        return lo, hi


@dataclass(frozen=True)
class Action:
    portfolio_id: int
    payout_level: float
    target_ratio: float | None = None


@dataclass(frozen=True)
class PolicyTable:
    """One action row per ratio bin, bottom bin first."""

    bins: RatioBins
    rows: tuple[Action, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if len(self.rows) != len(self.bins):
            raise ValueError(f"need {len(self.bins)} rows for {len(self.bins)} bins, got {len(self.rows)}")
        for r in self.rows:
            if r.target_ratio is not None and not r.target_ratio >= 0:
                raise ValueError(f"target ratio must be non-negative or None, got {r.target_ratio}")

    def check_payouts(self, bounds: tuple[float, float]) -> None:
        lo, hi = bounds
        for i, r in enumerate(self.rows):
            if not lo - 1e-9 <= r.payout_level <= hi + 1e-9:
                raise PayoutOutOfRange(f"row {i}: payout {r.payout_level}% outside [{lo}, {hi}]")

    def with_cell(self, row: int, column: str, value) -> "PolicyTable":
        rows = list(self.rows)
        rows[row] = replace(rows[row], **{column: value})
        return replace(self, rows=tuple(rows))

    def key(self) -> tuple:
        return tuple((r.portfolio_id, r.payout_level, r.target_ratio) for r in self.rows)

    def as_arrays(self):
        """(portfolio ids, payout levels, targets with NaN for no cash call)."""
        pid = np.array([r.portfolio_id for r in self.rows], dtype=np.int64)
        pay = np.array([r.payout_level for r in self.rows], dtype=float)
        tgt = np.array([np.nan if r.target_ratio is None else r.target_ratio for r in self.rows], dtype=float)
        return pid, pay, tgt

    @classmethod
    def constant(cls, bins: RatioBins, action: Action) -> "PolicyTable":
        return cls(bins, (action,) * len(bins))


def lookup_actions(table: PolicyTable, rho: float) -> Action:
    return table.rows[int(table.bins.index(rho))]


def breach_threshold(table: PolicyTable) -> float:
    """Upper edge of the highest bin that requests cash (0 if none does)."""
    for i in reversed(range(len(table.rows))):
        if table.rows[i].target_ratio is not None:
            return table.bins.bounds(i)[1]
    return 0.0


@dataclass(frozen=True)
class Observation:
    """What the policy sees at the start of a year."""

    assets: float
    baseline_cashflow: float
    projection: LiabilityProjection
    expected_returns: np.ndarray
    fee: float

    @property
    def total_liability(self) -> float:
        return self.projection.total

    @property
    def next_total_liability(self) -> float:
        return self.projection.next_total


def external_cash(
    obs: Observation, portfolio: PortfolioSpec, cashflow: float, target_ratio: float | None
) -> float:
    """Cash needed so that next year's ratio hits ``target_ratio`` if returns and
    liabilities come in as expected; ``cashflow`` is this year's signed net
    cashflow at the chosen payout level."""
    if target_ratio is None:
        return 0.0
    g = (1.0 - obs.fee) * (1.0 + float(portfolio.weights @ obs.expected_returns))
    if g <= 0:
        raise DivisionByZero(f"(1 - m)(1 + w'a) = {g} is not positive")
    return max(target_ratio * obs.next_total_liability / g - (obs.assets + cashflow), 0.0)


# --------------------------------------------------------------------------
# Text format
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def format_table(table: PolicyTable, menu: Sequence[PortfolioSpec] | None = None) -> str:
    vols = {p.id: p.realized_vol for p in menu} if menu else {}
    lines = [TABLE_SCHEMA, "ratio_low\tratio_high\tportfolio_id\tportfolio_vol\tpayout_pct\ttarget_ratio"]
    for i in reversed(range(len(table.rows))):
        lo, hi = table.bins.bounds(i)
        r = table.rows[i]
        vol = vols.get(r.portfolio_id)
        lines.append("\t".join([
            _fmt(lo), _fmt(hi), str(r.portfolio_id),
            "" if vol is None else f"{100 * vol:.3f}%",
            repr(float(r.payout_level)),
            "none" if r.target_ratio is None else repr(float(r.target_ratio)),
        ]))
    return "\n".join(lines) + "\n"


def write_table(path, table: PolicyTable, menu=None) -> None:
    Path(path).write_text(format_table(table, menu))


def parse_table(text: str) -> PolicyTable:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != TABLE_SCHEMA:
        raise SchemaError(f"policy table must start with {TABLE_SCHEMA!r}")
    body = [ln.split("\t") for ln in lines[2:]]
    body.reverse()
    edges = [float(cols[0]) for cols in body[1:]]
    rows = []
    for cols in body:
        target = None if cols[5] == "none" else float(cols[5])
        rows.append(Action(int(cols[2]), float(cols[4]), target))
    return PolicyTable(RatioBins(tuple(edges)), tuple(rows))


def read_table(path) -> PolicyTable:
    return parse_table(Path(path).read_text())


def example_table() -> tuple[PolicyTable, list[PortfolioSpec]]:
    """The illustrative eight-row table with three fixed-income portfolios of
    4.437%, 5.620% and 7.891% volatility (weights are placeholders)."""
    vols = (0.04437, 0.05620, 0.07891)
    menu = [PortfolioSpec(i, 1.0, np.array([1.0]), v, 0.0, label=f"vol={100 * v:.3f}%") for i, v in enumerate(vols)]
    bins = RatioBins((0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0))
    rows = (
        Action(0, 95.0, 1.0),
        Action(0, 97.0, 1.2),
        Action(1, 100.0),
        Action(1, 102.0),
        Action(2, 105.0),
        Action(2, 107.0),
        Action(2, 108.0),
        Action(0, 110.0),
    )
    return PolicyTable(bins, rows), menu
