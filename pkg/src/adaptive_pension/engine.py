"""Fund-value dynamics and Monte Carlo evaluation of a policy table.

Evaluation is split in two stages. ``build_scenarios`` samples everything
that does not depend on the policy: asset returns, yield curves, each
scenario's life paths and the liability projections along those paths.
The payout level only scales the pension part of the cashflow, so the
baseline contribution and pension-due series are enough to price any
payout choice later. ``evaluate_policy`` then runs the yearly loop for all
scenarios at once, which makes re-evaluating many candidate tables on the
same scenario set cheap.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _rng
from .errors import NonpositiveInitialLiabilities, SchemaError
from .market import AssetUniverse, PortfolioSpec, ScenarioSampler, YieldCurveParams, discount_factors
from .mortality import CoxModel
from .policy import Action, PolicyTable, extended_ratio_array
from .population import (
    LifeState,
    PlanRules,
    Population,
    PopulationArrays,
    advance,
    cashflow_components,
    expected_outflows,
    population_arrays,
    project_liabilities,
    shifted_outflows,
    simulate_outflows_mc,
    window_mean_table,
)

METRICS_SCHEMA = "# adaptive_pension metrics v1"
TRAJECTORY_COLUMNS = ("scenario", "year", "v", "rho", "portfolio_id", "payout", "e", "r", "ell")


@dataclass(frozen=True)
class SimulationConfig:
    """``fee`` is the yearly fraction of assets lost to fees.

    ``projection_paths=None`` projects liabilities with the exact expectation;
    an integer uses that many antithetic inner Monte Carlo paths instead.
    """

    years: int = 30
    horizon: int = 30
    n_scenarios: int = 1000
    fee: float = 0.002
    initial_ratio: float = 1.6
    seed: int = 0
    initial_payout: float = 100.0
    projection_paths: int | None = None
    max_abort_fraction: float = 0.0

    def __post_init__(self):
        if self.years < 1 or self.horizon < 1 or self.n_scenarios < 1:
            raise ValueError("years, horizon and n_scenarios must all be at least 1")
        if not 0 <= self.fee < 1:
            raise ValueError(f"fee must lie in [0, 1), got {self.fee}")
        if self.initial_ratio < 0:
            raise ValueError("initial_ratio must be non-negative")
        if self.projection_paths is not None and self.projection_paths < 1:
            raise ValueError("projection_paths must be positive or None")
        if not 0 <= self.max_abort_fraction <= 1:
            raise ValueError("max_abort_fraction must lie in [0, 1]")


# --------------------------------------------------------------------------
# Single-step dynamics
# --------------------------------------------------------------------------


def next_assets(v, ell, e, r, m):
    """Assets at the start of next year; works elementwise on arrays."""
    return (1.0 + r) * (v + ell + e) * (1.0 - m)


@dataclass(frozen=True)
class PlanState:
    year: int
    assets: float
    population: Population | None = None
    previous_payout_level: float = 100.0


def step(
    state: PlanState,
    actions: Action,
    r: float,
    ell: float,
    e: float,
    m: float,
    advance_population: Callable[[Population], Population] | None = None,
) -> PlanState:
    """Apply one year: returns ``r``, net cashflow ``ell``, external cash ``e`` and fee ``m``.

    ``advance_population`` moves the population one year; without it the
    snapshot is carried over unchanged.
    """
    if not r > -1:
        raise ValueError(f"return must exceed -100%, got {r}")
    pop = state.population
    if advance_population is not None and pop is not None:
        pop = advance_population(pop)
    return PlanState(
        year=state.year + 1,
        assets=float(next_assets(state.assets, ell, e, r, m)),
        population=pop,
        previous_payout_level=float(actions.payout_level),
    )


def initial_assets(
    population: Population,
    rules: PlanRules,
    mortality: CoxModel,
    yield_curve: Sequence[float],
    target_ratio: float,
    horizon: int = 30,
    n_inner_paths: int | None = None,
    seed: int = 0,
) -> float:
    proj = project_liabilities(population, rules, mortality, horizon, yield_curve, n_inner_paths, seed)
    return assets_for_ratio(proj.total, target_ratio)


def assets_for_ratio(total_liability: float, target_ratio: float) -> float:
    if not total_liability > 0:
        raise NonpositiveInitialLiabilities(
            f"projected liabilities are {total_liability}; the population is a net contributor"
        )
    return target_ratio * total_liability


# --------------------------------------------------------------------------
# Scenario set
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Policy-independent inputs for S scenarios over ``years`` simulated years.

    Cashflow arrays are (S, years): contributions received and baseline
    pension due. ``liability`` is (S, years + 1), the projected total at the
    start of each year; ``next_liability`` is (S, years), the projection of
    next year's total made at year t.
    """

    returns: np.ndarray
    contributions: np.ndarray
    pension_due: np.ndarray
    has_retiree: np.ndarray
    liability: np.ndarray
    next_liability: np.ndarray
    initial_assets: float
    seed: int = 0

    def __post_init__(self):
        S, T = self.contributions.shape
        if self.returns.shape[:2] != (S, T):
            raise ValueError("returns must be (S, years, n_assets)")
        for name in ("pension_due", "has_retiree", "next_liability"):
            if getattr(self, name).shape != (S, T):
                raise ValueError(f"{name} must be (S, years)")
        if self.liability.shape != (S, T + 1):
            raise ValueError("liability must be (S, years + 1)")

    @property
    def n_scenarios(self) -> int:
        return self.contributions.shape[0]

    @property
    def years(self) -> int:
        return self.contributions.shape[1]


def _life_paths(arrs: PopulationArrays, rules: PlanRules, years: int, rng, wmean):
    """States of every member at years 0..years along one sampled life path."""
    N = arrs.size
    u = rng.random((years, 2, N))
    state, start, base = arrs.state, arrs.work_start, arrs.pension_base
    out = [(state, start, base)]
    for t in range(years):
        state, start, base = advance(state, arrs.age + t, start, base, arrs.income_scale, arrs.death_prob,
                                     u[t, 0], u[t, 1], rules, wmean)
        out.append((state, start, base))
    return out


def _one_scenario(s, key, sampler, arrs, rules, cfg: SimulationConfig):
    T_sim, T, N = cfg.years, cfg.horizon, arrs.size
    scen = sampler.sample(cfg.seed, key)
    wmean = window_mean_table(rules.pension_base_window, arrs.death_prob.shape[1] + T_sim + 2)
    path = _life_paths(arrs, rules, T_sim, _rng.stream(cfg.seed, key, _rng.LIFE), wmean)

    contrib = np.empty(T_sim)
    due = np.empty(T_sim)
    retiree = np.empty(T_sim, dtype=bool)
    for t in range(T_sim):
        state, _, base = path[t]
        c, d = cashflow_components(state, arrs.age + t, base, arrs.income_scale, rules)
        contrib[t], due[t] = c.sum(), d.sum()
        retiree[t] = bool(np.any(state == LifeState.RETIRED))

    if cfg.projection_paths is None:
        state = np.concatenate([p[0] for p in path])
        start = np.concatenate([p[1] for p in path])
        base = np.concatenate([p[2] for p in path])
        age = np.concatenate([arrs.age + t for t in range(T_sim + 1)])
        beta = np.tile(arrs.income_scale, T_sim + 1)
        rows = np.tile(np.arange(N), T_sim + 1)
        per_member = expected_outflows(state, age, start, base, beta, arrs.death_prob, rules, T, rows=rows)
        outflow = per_member.reshape(T_sim + 1, N, T + 1).sum(axis=1)
    else:
        outflow = np.empty((T_sim + 1, T + 1))
        for t, (state, start, base) in enumerate(path):
            snap = replace(arrs, state=state, work_start=start, pension_base=base, age=arrs.age + t)
            outflow[t] = simulate_outflows_mc(snap, rules, T, cfg.projection_paths,
                                              _rng.stream(cfg.seed, key, _rng.PROJECTION, t))

    disc = np.stack([discount_factors(scen.yield_curves[t], T) for t in range(T_sim + 1)])
    L = np.sum(disc * outflow, axis=1)
    L_next = np.sum(disc[:T_sim] * shifted_outflows(outflow[:T_sim]), axis=1)
    return scen.returns, contrib, due, retiree, L, L_next


def build_scenarios(
    population: Population,
    rules: PlanRules,
    mortality: CoxModel,
    universe: AssetUniverse,
    curve_params: YieldCurveParams,
    config: SimulationConfig,
    workers: int = 1,
    scenario_keys: Sequence[int] | None = None,
) -> ScenarioSet:
    """Sample S scenarios; scenario s draws only from streams keyed by (seed, key_s).

    ``scenario_keys`` defaults to 0..S-1; repeating a key repeats the scenario.
    """
    keys = list(range(config.n_scenarios)) if scenario_keys is None else [int(k) for k in scenario_keys]
    if len(keys) != config.n_scenarios:
        raise ValueError("need one scenario key per scenario")
    arrs = population_arrays(population, mortality)
    sampler = ScenarioSampler(universe, curve_params, config.years, config.horizon)

    def run(s):
        return _one_scenario(s, keys[s], sampler, arrs, rules, config)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(len(keys))))
    else:
        parts = [run(s) for s in range(len(keys))]
    ret, contrib, due, retiree, L, L_next = (np.stack(x) for x in zip(*parts))

    curve0 = curve_params.curve(curve_params.initial_rate, config.horizon)
    v0 = initial_assets(population, rules, mortality, curve0, config.initial_ratio, config.horizon,
                        config.projection_paths, config.seed)
    return ScenarioSet(ret, contrib, due, retiree, L, L_next, v0, config.seed)


# --------------------------------------------------------------------------
# Policy evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EvalContext:
    """Everything a policy evaluation needs besides the table itself."""

    scenarios: ScenarioSet
    menu: tuple[PortfolioSpec, ...]
    rules: PlanRules
    config: SimulationConfig
    expected_returns: np.ndarray
    portfolio_returns: np.ndarray = field(init=False)  # (S, years, n_portfolios)
    growth: np.ndarray = field(init=False)  # (1 - m)(1 + w'a) per portfolio
    index_of: dict = field(init=False)

    def __post_init__(self):
        menu = tuple(self.menu)
        if not menu:
            raise ValueError("portfolio menu is empty")
        object.__setattr__(self, "menu", menu)
        W = np.stack([p.weights for p in menu])
        R = self.scenarios.returns
        pr = np.stack([np.sum(R * w, axis=-1) for w in W], axis=-1)
        object.__setattr__(self, "portfolio_returns", pr)
        g = np.array([(1.0 - self.config.fee) * (1.0 + float(w @ self.expected_returns)) for w in W])
        object.__setattr__(self, "growth", g)
        object.__setattr__(self, "index_of", {p.id: i for i, p in enumerate(menu)})


def make_context(scenarios, menu, rules, config, universe: AssetUniverse) -> EvalContext:
    return EvalContext(scenarios, tuple(menu), rules, config, universe.mean_returns)


@dataclass(frozen=True, eq=False)
class TrajectoryLog:
    """Per-(scenario, year) record; years from a scenario's abort year on are NaN."""

    v: np.ndarray
    rho: np.ndarray
    portfolio_id: np.ndarray
    payout: np.ndarray
    target: np.ndarray
    e: np.ndarray
    r: np.ndarray
    ell: np.ndarray
    has_retiree: np.ndarray
    terminal_v: np.ndarray
    terminal_rho: np.ndarray
    abort_year: np.ndarray  # == years when the scenario never aborted
    initial_assets: float
    initial_payout: float

    @property
    def shape(self):
        return self.v.shape

    def write_csv(self, path) -> None:
        S, T = self.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_COLUMNS)
            for s in range(S):
                for t in range(T):
                    w.writerow([s, t, repr(float(self.v[s, t])), repr(float(self.rho[s, t])),
                                int(self.portfolio_id[s, t]), repr(float(self.payout[s, t])),
                                repr(float(self.e[s, t])), repr(float(self.r[s, t])),
                                repr(float(self.ell[s, t]))])
                w.writerow([s, T, repr(float(self.terminal_v[s])), repr(float(self.terminal_rho[s])),
                            "", "", "", "", ""])


def read_ratio_paths(path) -> np.ndarray:
    """(S, years + 1) ratio paths from a trajectory export."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or tuple(rows[0].keys()) != TRAJECTORY_COLUMNS:
        raise SchemaError(f"{path}: not a trajectory export")
    S = max(int(r["scenario"]) for r in rows) + 1
    T = max(int(r["year"]) for r in rows) + 1
    out = np.full((S, T), np.nan)
    for r in rows:
        out[int(r["scenario"]), int(r["year"])] = float(r["rho"])
    return out


@dataclass(frozen=True)
class MetricsReport:
    cash_call_prob: float
    mean_payout: float
    mean_payout_change: float
    breach_prob_1y: float
    breach_prob_horizon: float
    ex_post_breach_value_pct: float
    mean_terminal_ratio: float
    n_scenarios: int
    n_years: int
    n_aborted: int = 0

    @property
    def c(self) -> float:
        return self.cash_call_prob

    @property
    def q_bar(self) -> float:
        return self.mean_payout

    @property
    def delta_q(self) -> float:
        return self.mean_payout_change

    def to_text(self) -> str:
        lines = [METRICS_SCHEMA]
        for f in fields(self):
            val = getattr(self, f.name)
            lines.append(f"{f.name} = {val!r}" if isinstance(val, int) else f"{f.name} = {float(val)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != METRICS_SCHEMA:
            raise SchemaError(f"metrics document must start with {METRICS_SCHEMA!r}")
        vals = {}
        for ln in lines[1:]:
            k, _, v = ln.partition("=")
            vals[k.strip()] = v.strip()
        kw = {}
        for f in fields(cls):
            if f.name not in vals:
                raise SchemaError(f"metrics document lacks {f.name!r}")
            kw[f.name] = int(vals[f.name]) if f.type in ("int", int) else float(vals[f.name])
        return cls(**kw)


def compute_metrics(log: TrajectoryLog) -> MetricsReport:
    S, T = log.shape
    active = np.arange(T)[None, :] < log.abort_year[:, None]
    calls = active & (log.e > 0)
    n_active = int(active.sum())
    c = float(calls.sum()) / n_active if n_active else 0.0

    paying = active & log.has_retiree
    q_bar = float(log.payout[paying].mean()) if paying.any() else float(log.initial_payout)
    prev = np.concatenate([np.full((S, 1), log.initial_payout), log.payout[:, :-1]], axis=1)
    dq = float(np.abs(log.payout - prev)[active].mean()) if n_active else 0.0

    injected = np.where(active, log.e, 0.0).sum(axis=1)
    ex_post = 100.0 * float(injected.mean()) / log.initial_assets if log.initial_assets > 0 else math.inf
    finite = log.terminal_rho[np.isfinite(log.terminal_rho)]
    terminal = float(finite.mean()) if finite.size else math.inf
    return MetricsReport(
        cash_call_prob=c,
        mean_payout=q_bar,
        mean_payout_change=dq,
        breach_prob_1y=c,
        breach_prob_horizon=float(calls.any(axis=1).mean()),
        ex_post_breach_value_pct=ex_post,
        mean_terminal_ratio=terminal,
        n_scenarios=S,
        n_years=T,
        n_aborted=int((log.abort_year < T).sum()),
    )


def _simulate(table: PolicyTable, ctx: EvalContext, sl: slice):
    sc = ctx.scenarios
    cfg, rules = ctx.config, ctx.rules
    T = sc.years
    pid_ids, pay_rows, tgt_rows = table.as_arrays()
    try:
        pid_rows = np.array([ctx.index_of[int(p)] for p in pid_ids])
    except KeyError as exc:
        raise ValueError(f"policy table references portfolio {exc.args[0]} which is not on the menu") from None
    lo, hi = rules.payout_bounds
    cap = rules.max_payout_change

    contrib, due = sc.contributions[sl], sc.pension_due[sl]
    L, L_next = sc.liability[sl], sc.next_liability[sl]
    PR = ctx.portfolio_returns[sl]
    menu_ids = np.array([m.id for m in ctx.menu], dtype=float)
    S = contrib.shape[0]
    idx = np.arange(S)

    v = np.full(S, sc.initial_assets)
    prev = np.full(S, cfg.initial_payout)
    abort = np.full(S, T, dtype=np.int64)
    out = {k: np.full((S, T), np.nan) for k in ("v", "rho", "pid", "payout", "target", "e", "r", "ell")}

    for t in range(T):
        live = abort == T
        rho = extended_ratio_array(v, L[:, t])
        b = table.bins.index(rho)
        p = pid_rows[b]
        q = pay_rows[b]
        if cap is not None:
            q = np.clip(q, prev - cap, prev + cap)
        q = np.clip(q, lo, hi)
        target = tgt_rows[b]
        ell = contrib[:, t] - q / 100.0 * due[:, t]
        g = ctx.growth[p]
        call = ~np.isnan(target)
        failed = live & call & (g <= 0)
        abort[failed] = t
        live &= ~failed
        safe_g = np.where(g > 0, g, 1.0)
        e = np.where(call & live, np.maximum(np.where(call, target, 0.0) * L_next[:, t] / safe_g - (v + ell), 0.0), 0.0)
        r = PR[idx, t, p]
        v_new = np.where(live, next_assets(v, ell, e, r, cfg.fee), v)
        for k, val in (("v", v), ("rho", rho), ("pid", menu_ids[p]),
                       ("payout", q), ("target", target), ("e", e), ("r", r), ("ell", ell)):
            out[k][:, t] = np.where(live, val, np.nan)
        v = v_new
        prev = np.where(live, q, prev)
    terminal_rho = np.where(abort == T, extended_ratio_array(v, L[:, T]), np.nan)
    return out, v, terminal_rho, abort


def evaluate_policy(table: PolicyTable, ctx: EvalContext, workers: int = 1) -> tuple[MetricsReport, TrajectoryLog]:
    """Run ``table`` on every scenario of ``ctx`` and summarize.

    Scenarios are split into contiguous chunks across ``workers`` threads;
    every scenario's arithmetic is independent of the split, and metrics are
    reduced over the reassembled arrays, so results do not depend on it.
    """
    table.check_payouts(ctx.rules.payout_bounds)
    S = ctx.scenarios.n_scenarios
    workers = max(1, min(int(workers), S))
    bounds = np.linspace(0, S, workers + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda sl: _simulate(table, ctx, sl), slices))
    else:
        parts = [_simulate(table, ctx, slices[0])]
    cat = lambda k: np.concatenate([p[0][k] for p in parts])  # noqa: E731
    with np.errstate(invalid="ignore"):
        pid = np.where(np.isnan(cat("pid")), -1, cat("pid")).astype(np.int64)
    log = TrajectoryLog(
        v=cat("v"), rho=cat("rho"), portfolio_id=pid, payout=cat("payout"), target=cat("target"),
        e=cat("e"), r=cat("r"), ell=cat("ell"), has_retiree=ctx.scenarios.has_retiree,
        terminal_v=np.concatenate([p[1] for p in parts]),
        terminal_rho=np.concatenate([p[2] for p in parts]),
        abort_year=np.concatenate([p[3] for p in parts]),
        initial_assets=ctx.scenarios.initial_assets,
        initial_payout=ctx.config.initial_payout,
    )
    return compute_metrics(log), log
