"""Plan members, their yearly life-state transitions, cashflows and liability projections.

Each member moves along NotWorking -> Working -> Retired, and may die from
any living state. Within one simulated year a member's death is resolved
first, then a possible state transition, and the year's cashflow reflects
the resulting state.

Sign conventions: cashflows are signed from the plan's point of view
(positive = the plan receives contributions); projected liabilities are
expected net *outflows* (positive = the plan pays out on net).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _rng
from .errors import PayoutOutOfRange, SchemaError, UnknownBin
from .market import discount_factors
from .mortality import INCOME_BINS, DEFAULT_INCOME_BETAS, CovariateVector, CoxModel

POPULATION_SCHEMA = "# adaptive_pension population v1"


class LifeState(IntEnum):
    NOT_WORKING = 0
    WORKING = 1
    RETIRED = 2
    DEAD = 3


@dataclass(frozen=True)
class PlanRules:
    """Plan parameters; rates are percentages.

    ``max_payout_change`` caps the year-over-year change of the effective
    payout level (percentage points); ``None`` leaves it uncapped.
    """

    min_work_age: int = 18
    mean_years_to_work: float = 4.0
    min_retire_age: int = 63
    mean_years_to_retire: float = 2.0
    contribution_rate: float = 15.0
    baseline_payout_rate: float = 80.0
    max_payout_deviation: float = 10.0
    pension_base_window: int = 20
    max_payout_change: float | None = None

    def __post_init__(self):
        if not self.min_work_age < self.min_retire_age:
            raise ValueError("min_work_age must be below min_retire_age")
        if self.mean_years_to_work < 1 or self.mean_years_to_retire < 1:
            raise ValueError("mean years to work / retire must be at least 1")
        if not (0 < self.contribution_rate <= 100 and 0 < self.baseline_payout_rate <= 100):
            raise ValueError("contribution and payout rates must lie in (0, 100]")
        if not 0 <= self.max_payout_deviation < 100:
            raise ValueError("max_payout_deviation must lie in [0, 100)")
        if self.pension_base_window < 1:
            raise ValueError("pension_base_window must be at least 1")
        if self.max_payout_change is not None and self.max_payout_change < 0:
            raise ValueError("max_payout_change must be non-negative")

    @property
    def payout_bounds(self) -> tuple[float, float]:
        return 100.0 - self.max_payout_deviation, 100.0 + self.max_payout_deviation

    @property
    def work_probability(self) -> float:
        return 1.0 / self.mean_years_to_work

    @property
    def retire_probability(self) -> float:
        return 1.0 / self.mean_years_to_retire

    def check_payout(self, payout_level: float) -> None:
        lo, hi = self.payout_bounds
        if not lo - 1e-9 <= payout_level <= hi + 1e-9:
            raise PayoutOutOfRange(f"payout level {payout_level}% outside [{lo}, {hi}]")


def age_profile(age):
    """Income multiplier: 25 below age 25, the age itself up to 45, then 45."""
    return np.clip(age, 25, 45)


def income_at_age(age: float, income_bin: int | str, betas: Mapping[str, float] = DEFAULT_INCOME_BETAS) -> float:
    key = INCOME_BINS[income_bin] if isinstance(income_bin, (int, np.integer)) else income_bin
    if key not in betas:
        raise UnknownBin(f"no income scale for bin {income_bin!r}")
    return float(age_profile(age) * betas[key])


@dataclass(frozen=True)
class Individual:
    id: int
    birth_year: int
    sex: str
    covariates: CovariateVector
    income_bin: int
    income_scale: float
    state: LifeState = LifeState.NOT_WORKING
    current_income: float = 0.0
    pension_base: float | None = None
    work_start_age: int | None = None
    income_history: tuple[float, ...] = ()

    def age(self, year: int) -> int:
        return year - self.birth_year

    @property
    def alive(self) -> bool:
        return self.state != LifeState.DEAD


@dataclass(frozen=True)
class Population:
    members: tuple[Individual, ...]
    year: int
    closed_to_new_entrants_after: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.closed_to_new_entrants_after is None:
            object.__setattr__(self, "closed_to_new_entrants_after", self.year)

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class DemographicConfig:
    """Marginal distributions used to draw a synthetic population.

    ``age_bands`` holds ``(low, high, weight)`` triples; ages inside a band
    are uniform on ``low..high-1``.
    """

    start_year: int = 2025
    age_bands: tuple[tuple[int, int, float], ...] = (
        (0, 18, 0.22),
        (18, 35, 0.23),
        (35, 50, 0.19),
        (50, 65, 0.19),
        (65, 80, 0.13),
        (80, 95, 0.04),
    )
    sex_probs: Mapping[str, float] = field(default_factory=lambda: {"F": 0.51, "M": 0.49})
    income_probs: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    education_probs: tuple[float, ...] = (0.10, 0.40, 0.35, 0.15)
    region_probs: tuple[float, ...] = (0.17, 0.38, 0.21, 0.24)
    income_betas: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_INCOME_BETAS))

    def __post_init__(self):
        object.__setattr__(self, "age_bands", tuple(tuple(b) for b in self.age_bands))
        for name in ("income_probs", "education_probs", "region_probs"):
            p = np.asarray(getattr(self, name), float)
            if len(p) != 4 or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ValueError(f"{name} must be 4 non-negative probabilities summing to 1")
        sp = np.asarray(list(self.sex_probs.values()), float)
        if np.any(sp < 0) or not np.isclose(sp.sum(), 1.0):
            raise ValueError("sex_probs must sum to 1")
        w = np.asarray([b[2] for b in self.age_bands], float)
        if len(w) == 0 or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("age_bands need non-negative weights with a positive total")
        for lo, hi, _ in self.age_bands:
            if not 0 <= lo < hi:
                raise ValueError(f"invalid age band [{lo}, {hi})")
        missing = [b for b in INCOME_BINS if b not in self.income_betas]
        if missing:
            raise ValueError(f"income_betas missing bins {missing}")


# --------------------------------------------------------------------------
# Array form used by the vectorized simulator
# --------------------------------------------------------------------------


def window_mean_table(window: int, max_age: int) -> np.ndarray:
    """``table[s, a]`` = mean age-profile income over working ages max(s, a-window+1)..a."""
    ages = np.arange(max_age + 1)
    prof = age_profile(ages).astype(float)
    csum = np.concatenate([[0.0], np.cumsum(prof)])
    s = ages[:, None]
    a = ages[None, :]
    lo = np.maximum(s, a - window + 1)
    count = a - lo + 1
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (csum[a + 1] - csum[np.clip(lo, 0, None)]) / count
    return np.where(count > 0, out, 0.0)


@dataclass(frozen=True, eq=False)
class PopulationArrays:
    """Column form of a population at one calendar year."""

    year: int
    state: np.ndarray
    age: np.ndarray
    work_start: np.ndarray
    pension_base: np.ndarray
    income_scale: np.ndarray
    death_prob: np.ndarray  # (N, max_age + 1), by age

    @property
    def size(self) -> int:
        return len(self.state)


def population_arrays(pop: Population, mortality: CoxModel) -> PopulationArrays:
    n = len(pop)
    cache: dict = {}
    qx = np.empty((n, mortality.baseline.max_age + 1))
    for i, m in enumerate(pop.members):
        key = (mortality.baseline._index(m.birth_year, m.sex), m.covariates.values)
        if key not in cache:
            cache[key] = mortality.death_probabilities(m.covariates, m.birth_year, m.sex)
        qx[i] = cache[key]
    return PopulationArrays(
        year=pop.year,
        state=np.array([int(m.state) for m in pop.members], dtype=np.int8),
        age=np.array([m.age(pop.year) for m in pop.members], dtype=np.int64),
        work_start=np.array([-1 if m.work_start_age is None else m.work_start_age for m in pop.members], dtype=np.int64),
        pension_base=np.array([m.pension_base or 0.0 for m in pop.members], dtype=float),
        income_scale=np.array([m.income_scale for m in pop.members], dtype=float),
        death_prob=qx,
    )


def _death_prob_at(qx, age, rows=None):
    if rows is None:
        rows = np.arange(len(age))
    idx = np.minimum(age, qx.shape[1] - 1)
    q = qx[rows, idx]
    return np.where(age >= qx.shape[1] - 1, 1.0, q)


def advance(state, age, work_start, pension_base, income_scale, qx, u_death, u_trans, rules: PlanRules, wmean):
    """One simulated year for arrays of members aged ``age``; returns new (state, work_start, pension_base)."""
    state = state.copy()
    work_start = work_start.copy()
    pension_base = pension_base.copy()
    alive = state != LifeState.DEAD
    dies = alive & (u_death < _death_prob_at(qx, age))
    survivors = alive & ~dies
    starts = survivors & (state == LifeState.NOT_WORKING) & (age >= rules.min_work_age) & (u_trans < rules.work_probability)
    retires = survivors & (state == LifeState.WORKING) & (age >= rules.min_retire_age) & (u_trans < rules.retire_probability)
    state[dies] = LifeState.DEAD
    state[starts] = LifeState.WORKING
    work_start[starts] = age[starts] + 1
    state[retires] = LifeState.RETIRED
    a = np.minimum(age[retires], wmean.shape[1] - 1)
    pension_base[retires] = income_scale[retires] * wmean[work_start[retires], a]
    return state, work_start, pension_base


def cashflow_components(state, age, pension_base, income_scale, rules: PlanRules):
    """Per-member (contribution received, baseline pension due), both >= 0."""
    working = state == LifeState.WORKING
    retired = state == LifeState.RETIRED
    contrib = np.where(working, rules.contribution_rate / 100.0 * income_scale * age_profile(age), 0.0)
    due = np.where(retired, rules.baseline_payout_rate / 100.0 * pension_base, 0.0)
    return contrib, due


def expected_outflows(state, age, work_start, pension_base, income_scale, qx, rules: PlanRules, horizon: int,
                      rows=None):
    """Exact expected baseline net outflow of each member for offsets 0..horizon.

    Propagates state-occupancy probabilities forward instead of sampling, so
    this is the limit of the inner-path Monte Carlo projection as the number
    of paths grows. Offset 0 is the member's current (known) cashflow.
    ``rows`` maps each entry to its row of ``qx`` (default: one row each).
    Returns an array of shape (K, horizon + 1).
    """
    K = len(state)
    T = horizon
    kw = rules.contribution_rate / 100.0
    kr = rules.baseline_payout_rate / 100.0
    pw_rate, pr_rate = rules.work_probability, rules.retire_probability
    max_age = int(age.max(initial=0)) + T + 2
    wmean = window_mean_table(rules.pension_base_window, max(max_age, qx.shape[1]))
    if rows is None:
        rows = np.arange(K)
    surv = np.empty((K, T))
    for tau in range(T):
        surv[:, tau] = 1.0 - _death_prob_at(qx, age + tau, rows)

    out = np.zeros((K, T + 1))
    contrib, due = cashflow_components(state, age, pension_base, income_scale, rules)
    out[:, 0] = due - contrib

    W = (state == LifeState.WORKING).astype(float)
    R = np.where(state == LifeState.RETIRED, pension_base, 0.0)
    s0 = np.where(work_start >= 0, work_start, 0)

    nw = np.flatnonzero(state == LifeState.NOT_WORKING)
    Nmass = np.ones(len(nw))
    Wn = np.zeros((len(nw), T + 1))  # working mass by start offset u (start age = age + u)
    Rn = np.zeros(len(nw))
    age_nw = age[nw]
    beta_nw = income_scale[nw]

    for tau in range(T):
        x = age + tau
        pr = np.where(x >= rules.min_retire_age, pr_rate, 0.0)
        sv = surv[:, tau]
        new_ret = pr * W * income_scale * wmean[s0, np.minimum(x, wmean.shape[1] - 1)]
        R = sv * (R + new_ret)
        W = sv * (1.0 - pr) * W
        if len(nw):
            xn = age_nw + tau
            svn = sv[nw]
            prn = pr[nw]
            pwn = np.where(xn >= rules.min_work_age, pw_rate, 0.0)
            if tau > 0:
                starts = age_nw[:, None] + np.arange(1, tau + 1)[None, :]
                base = wmean[starts, np.minimum(xn, wmean.shape[1] - 1)[:, None]]
                new_ret_n = prn * beta_nw * np.sum(Wn[:, 1 : tau + 1] * base, axis=1)
            else:
                new_ret_n = 0.0
            Rn = svn * (Rn + new_ret_n)
            Wn[:, 1 : tau + 1] *= (svn * (1.0 - prn))[:, None]
            Wn[:, tau + 1] = svn * pwn * Nmass
            Nmass = svn * (1.0 - pwn) * Nmass
        inflow = kw * income_scale * age_profile(x + 1) * W
        outflow = kr * R
        if len(nw):
            inflow[nw] += kw * beta_nw * age_profile(age_nw + tau + 1) * Wn[:, 1 : tau + 2].sum(axis=1)
            outflow[nw] += kr * Rn
        out[:, tau + 1] = outflow - inflow
    return out


def simulate_outflows_mc(arrs: PopulationArrays, rules: PlanRules, horizon: int, n_paths: int, rng, antithetic=True):
    """Monte Carlo mean of the population's baseline net outflow for offsets 0..horizon."""
    N = arrs.size
    wmean = window_mean_table(rules.pension_base_window, arrs.death_prob.shape[1] + horizon + 2)
    if antithetic:
        half = (n_paths + 1) // 2
        u = rng.random((half, horizon, 2, N))
        u = np.concatenate([u, 1.0 - u])[:n_paths]
    else:
        u = rng.random((n_paths, horizon, 2, N))
    P = n_paths
    state = np.tile(arrs.state, P)
    start = np.tile(arrs.work_start, P)
    base = np.tile(arrs.pension_base, P)
    beta = np.tile(arrs.income_scale, P)
    qx = np.tile(arrs.death_prob, (P, 1))
    out = np.zeros(horizon + 1)
    for tau in range(horizon + 1):
        age = np.tile(arrs.age + tau, P)
        contrib, due = cashflow_components(state, age, base, beta, rules)
        out[tau] = (due.sum() - contrib.sum()) / P
        if tau == horizon:
            break
        ud = u[:, tau, 0, :].reshape(-1)
        ut = u[:, tau, 1, :].reshape(-1)
        state, start, base = advance(state, age, start, base, beta, qx, ud, ut, rules, wmean)
    return out


# --------------------------------------------------------------------------
# Object-level operations
# --------------------------------------------------------------------------


def synthesize_population(size: int, config: DemographicConfig, seed: int, rules: PlanRules = PlanRules()) -> Population:
    """Draw members from the configured marginals; adults' work/retirement
    history is drawn from the same transition model the simulator uses
    (ignoring mortality before the start year)."""
    if size < 1:
        raise ValueError("population size must be at least 1")
    rng = _rng.stream(seed, _rng.SYNTHESIS)
    bands = config.age_bands
    w = np.array([b[2] for b in bands], float)
    band = rng.choice(len(bands), size=size, p=w / w.sum())
    ages = np.array([rng.integers(bands[b][0], bands[b][1]) for b in band])
    sexes = list(config.sex_probs)
    sex = rng.choice(len(sexes), size=size, p=np.asarray(list(config.sex_probs.values()), float))
    inc = rng.choice(4, size=size, p=np.asarray(config.income_probs, float))
    edu = rng.choice(4, size=size, p=np.asarray(config.education_probs, float))
    reg = rng.choice(4, size=size, p=np.asarray(config.region_probs, float))

    wmean = window_mean_table(rules.pension_base_window, int(ages.max()) + 2)
    members = []
    for i in range(size):
        beta = float(config.income_betas[INCOME_BINS[inc[i]]])
        state, start, base = LifeState.NOT_WORKING, None, None
        for x in range(rules.min_work_age, int(ages[i])):
            u = rng.random()
            if state == LifeState.NOT_WORKING and u < rules.work_probability:
                state, start = LifeState.WORKING, x + 1
            elif state == LifeState.WORKING and x >= rules.min_retire_age and u < rules.retire_probability:
                state, base = LifeState.RETIRED, beta * float(wmean[start, x])
                break
        age = int(ages[i])
        history = ()
        income = 0.0
        if state == LifeState.WORKING:
            income = beta * float(age_profile(age))
            history = tuple(beta * float(age_profile(a)) for a in range(max(start, age - rules.pension_base_window + 1), age + 1))
        members.append(
            Individual(
                id=i,
                birth_year=config.start_year - age,
                sex=sexes[sex[i]],
                covariates=CovariateVector.from_categories(int(inc[i]), int(edu[i]), int(reg[i])),
                income_bin=int(inc[i]),
                income_scale=beta,
                state=state,
                current_income=income,
                pension_base=base,
                work_start_age=start,
                income_history=history,
            )
        )
    return Population(tuple(members), year=config.start_year)


def step_individual(ind: Individual, rules: PlanRules, mortality: CoxModel, year: int, rng) -> Individual:
    """Advance one member from ``year`` to ``year + 1``.

    Always consumes two uniforms from ``rng`` (death, then transition) so
    that the stream stays aligned with the vectorized simulator.
    """
    u_death, u_trans = rng.random(2)
    if ind.state == LifeState.DEAD:
        return ind
    age = ind.age(year)
    q = mortality.death_probabilities(ind.covariates, ind.birth_year, ind.sex)
    qa = 1.0 if age >= len(q) - 1 else q[age]
    if u_death < qa:
        return replace(ind, state=LifeState.DEAD, current_income=0.0)
    window = rules.pension_base_window
    if ind.state == LifeState.NOT_WORKING:
        if age >= rules.min_work_age and u_trans < rules.work_probability:
            income = ind.income_scale * float(age_profile(age + 1))
            return replace(ind, state=LifeState.WORKING, work_start_age=age + 1, current_income=income, income_history=(income,))
        return ind
    if ind.state == LifeState.WORKING:
        if age >= rules.min_retire_age and u_trans < rules.retire_probability:
            hist = ind.income_history[-window:]
            return replace(ind, state=LifeState.RETIRED, pension_base=float(np.mean(hist)), current_income=0.0)
        income = ind.income_scale * float(age_profile(age + 1))
        return replace(ind, current_income=income, income_history=(ind.income_history + (income,))[-window:])
    return ind


def step_population(pop: Population, rules: PlanRules, mortality: CoxModel, seed: int) -> Population:
    """Advance every member one year; member i draws from the stream (seed, year, i)."""
    members = tuple(
        step_individual(m, rules, mortality, pop.year, _rng.stream(seed, pop.year, m.id)) for m in pop.members
    )
    return replace(pop, members=members, year=pop.year + 1)


def individual_cashflow(ind: Individual, rules: PlanRules, payout_level: float) -> float:
    """Signed cashflow for the plan: contributions positive, pension payments negative."""
    rules.check_payout(payout_level)
    if ind.state == LifeState.WORKING:
        return rules.contribution_rate / 100.0 * ind.current_income
    if ind.state == LifeState.RETIRED:
        return -(payout_level / 100.0) * (rules.baseline_payout_rate / 100.0) * ind.pension_base
    return 0.0


def aggregate_liability(pop: Population, rules: PlanRules, payout_level: float) -> float:
    return float(sum(individual_cashflow(m, rules, payout_level) for m in pop.members))


@dataclass(frozen=True, eq=False)
class LiabilityProjection:
    """Expected net outflows for offsets 0..T and discount factors (both length T + 1)."""

    base_year: int
    expected_net_outflow: np.ndarray
    discount: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.expected_net_outflow) - 1

    @property
    def total(self) -> float:
        return float(self.discount @ self.expected_net_outflow)

    @property
    def next_total(self) -> float:
        """Projection of next year's total: outflows shifted one year, the last one repeated,
        discounted with the current curve re-based to next year."""
        return float(self.discount @ shifted_outflows(self.expected_net_outflow))


def shifted_outflows(outflow: np.ndarray) -> np.ndarray:
    return np.concatenate([outflow[..., 1:], outflow[..., -1:]], axis=-1)


def project_liabilities(
    pop: Population,
    rules: PlanRules,
    mortality: CoxModel,
    horizon: int,
    yield_curve: Sequence[float],
    n_inner_paths: int | None = 200,
    seed: int = 0,
) -> LiabilityProjection:
    """Expected baseline net outflows of ``pop`` over the next ``horizon`` years.

    ``n_inner_paths`` forward simulations (antithetic pairs) are averaged;
    ``None`` computes the exact expectation instead.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    arrs = population_arrays(pop, mortality)
    if n_inner_paths is None:
        outflow = expected_outflows(
            arrs.state, arrs.age, arrs.work_start, arrs.pension_base, arrs.income_scale, arrs.death_prob, rules, horizon
        ).sum(axis=0)
    else:
        if n_inner_paths < 1:
            raise ValueError("n_inner_paths must be at least 1")
        outflow = simulate_outflows_mc(arrs, rules, horizon, n_inner_paths, _rng.stream(seed, pop.year, _rng.PROJECTION))
    return LiabilityProjection(pop.year, outflow, discount_factors(yield_curve, horizon))


# --------------------------------------------------------------------------
# Snapshot file format
# --------------------------------------------------------------------------

_POP_COLUMNS = ("id", "birth_year", "sex", "income_bin", "education", "region", "state",
                "income_scale", "work_start_age", "pension_base")


def write_population(path, pop: Population) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"{POPULATION_SCHEMA} year={pop.year}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_POP_COLUMNS)
        for m in pop.members:
            _, edu, reg = m.covariates.categories()
            w.writerow([m.id, m.birth_year, m.sex, m.income_bin, edu, reg, m.state.name, repr(m.income_scale),
                        "" if m.work_start_age is None else m.work_start_age,
                        "" if m.pension_base is None else repr(m.pension_base)])


def read_population(path, rules: PlanRules = PlanRules()) -> Population:
    lines = Path(path).read_text().splitlines()
    head = lines[0].strip() if lines else ""
    if not head.startswith(POPULATION_SCHEMA + " year="):
        raise SchemaError(f"{path}: first line must be '{POPULATION_SCHEMA} year=<year>'")
    year = int(head.rsplit("=", 1)[1])
    members = []
    for r in csv.DictReader(lines[1:]):
        state = LifeState[r["state"]]
        start = int(r["work_start_age"]) if r["work_start_age"] else None
        beta = float(r["income_scale"])
        birth = int(r["birth_year"])
        age = year - birth
        income, history = 0.0, ()
        if state == LifeState.WORKING:
            income = beta * float(age_profile(age))
            history = tuple(beta * float(age_profile(a)) for a in range(max(start, age - rules.pension_base_window + 1), age + 1))
        members.append(
            Individual(
                id=int(r["id"]),
                birth_year=birth,
                sex=r["sex"],
                covariates=CovariateVector.from_categories(int(r["income_bin"]), int(r["education"]), int(r["region"])),
                income_bin=int(r["income_bin"]),
                income_scale=beta,
                state=state,
                current_income=income,
                pension_base=float(r["pension_base"]) if r["pension_base"] else None,
                work_start_age=start,
                income_history=history,
            )
        )
    return Population(tuple(members), year=year)
