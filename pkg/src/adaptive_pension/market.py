"""Investable universe, return/yield-curve scenarios and constrained Markowitz portfolios."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

from . import _rng
from .errors import InfeasibleConstraints, NonPSDCovariance, SchemaError

REGIONS = ("domestic", "foreign")
GROUPS = ("fixed_income", "equities", "alternatives")
CONSTRAINT_GROUPS = REGIONS + GROUPS

SCENARIO_SCHEMA = "# adaptive_pension scenarios v1"

_PSD_TOL = 1e-10
_KKT_TOL = 1e-8


@dataclass(frozen=True)
class AssetClass:
    name: str
    region: str
    group: str

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValueError(f"asset {self.name!r}: region must be one of {REGIONS}, got {self.region!r}")
        if self.group not in GROUPS:
            raise ValueError(f"asset {self.name!r}: group must be one of {GROUPS}, got {self.group!r}")


@dataclass(frozen=True, eq=False)
class AssetUniverse:
    """Asset classes with per-year expected simple returns and covariance."""

    assets: tuple[AssetClass, ...]
    mean_returns: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean_returns, dtype=float).copy()
        cov = np.asarray(self.covariance, dtype=float).copy()
        n = len(self.assets)
        if mean.shape != (n,) or cov.shape != (n, n):
            raise ValueError(f"universe of {n} assets needs mean of length {n} and a {n}x{n} covariance")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-14):
            raise NonPSDCovariance("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        eig = np.linalg.eigvalsh(cov)
        if eig[0] < -_PSD_TOL * max(eig[-1], 0.0):
            raise NonPSDCovariance(f"covariance has eigenvalue {eig[0]:.3e} < 0")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "assets", tuple(self.assets))
        object.__setattr__(self, "mean_returns", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def n(self) -> int:
        return len(self.assets)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.assets]

    def members(self, tag: str) -> np.ndarray:
        """Boolean mask of assets carrying a region or group tag."""
        if tag in REGIONS:
            return np.array([a.region == tag for a in self.assets])
        if tag in GROUPS:
            return np.array([a.group == tag for a in self.assets])
        raise KeyError(tag)

    @classmethod
    def from_lower_triangle(cls, assets, mean_returns, lower):
        """Build from covariance rows given as a lower triangle (row i has i+1 entries)."""
        n = len(assets)
        if len(lower) != n:
            raise ValueError(f"expected {n} covariance rows, got {len(lower)}")
        cov = np.zeros((n, n))
        for i, row in enumerate(lower):
            if len(row) != i + 1:
                raise ValueError(f"covariance row {i} must have {i + 1} entries, got {len(row)}")
            cov[i, : i + 1] = row
        cov = cov + np.tril(cov, -1).T
        return cls(tuple(assets), np.asarray(mean_returns, float), cov)


@dataclass(frozen=True)
class PortfolioConstraints:
    """Per-asset cap and closed interval bounds on each tag group's total weight."""

    per_asset_cap: float = 1.0
    group_bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.per_asset_cap <= 1.0:
            raise ValueError(f"per_asset_cap must lie in (0, 1], got {self.per_asset_cap}")
        bounds = {}
        for tag, (lo, hi) in dict(self.group_bounds).items():
            if tag not in CONSTRAINT_GROUPS:
                raise ValueError(f"unknown constraint group {tag!r}")
            lo, hi = float(lo), float(hi)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"group {tag!r}: need 0 <= low <= high <= 1, got [{lo}, {hi}]")
            bounds[tag] = (lo, hi)
        object.__setattr__(self, "group_bounds", bounds)

    def bounds(self, tag: str) -> tuple[float, float]:
        return self.group_bounds.get(tag, (0.0, 1.0))


@dataclass(frozen=True, eq=False)
class PortfolioSpec:
    id: int
    risk_aversion: float
    weights: np.ndarray
    realized_vol: float
    expected_return: float
    binding: tuple[str, ...] = ()
    degenerate: bool = False
    kkt: Mapping[str, float] = field(default_factory=dict)
    label: str = ""


@dataclass(frozen=True, eq=False)
class ReturnScenario:
    """One joint trajectory: ``returns[t]`` are asset returns in year t,
    ``yield_curves[t]`` the zero rates for maturities 1..T seen at the start of year t."""

    returns: np.ndarray
    yield_curves: np.ndarray


@dataclass(frozen=True)
class YieldCurveParams:
    """Mean-reverting short rate with a fixed term-premium ladder.

    ``term_premia[k]`` is added to the maturity-(k+1) zero rate; maturities
    past the end of the ladder reuse its last entry.
    """

    initial_rate: float = 0.035
    long_run_rate: float = 0.035
    reversion_speed: float = 0.15
    volatility: float = 0.008
    term_premia: tuple[float, ...] = (0.0, 0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.007, 0.008, 0.009, 0.01)

    def __post_init__(self):
        if self.reversion_speed < 0 or self.volatility < 0:
            raise ValueError("reversion_speed and volatility must be non-negative")
        object.__setattr__(self, "term_premia", tuple(float(p) for p in self.term_premia))

    def premia(self, horizon: int) -> np.ndarray:
        ladder = np.asarray(self.term_premia or (0.0,), float)
        idx = np.minimum(np.arange(horizon), len(ladder) - 1)
        return ladder[idx]

    def curve(self, short_rate: float, horizon: int) -> np.ndarray:
        """Zero rates for maturities 1..horizon: expected mean short rate plus premium."""
        tau = np.arange(1, horizon + 1, dtype=float)
        k = self.reversion_speed
        if k > 0:
            loading = (1.0 - np.exp(-k * tau)) / (k * tau)
        else:
            loading = np.ones_like(tau)
        return self.long_run_rate + (short_rate - self.long_run_rate) * loading + self.premia(horizon)


# --------------------------------------------------------------------------
# Markowitz QP
# --------------------------------------------------------------------------


def check_feasible(universe: AssetUniverse, constraints: PortfolioConstraints) -> np.ndarray:
    """Return some feasible weight vector, or raise InfeasibleConstraints."""
    n = universe.n
    A_ub, b_ub = [], []
    for tag in CONSTRAINT_GROUPS:
        lo, hi = constraints.bounds(tag)
        mask = universe.members(tag).astype(float)
        A_ub.append(mask)
        b_ub.append(hi)
        A_ub.append(-mask)
        b_ub.append(-lo)
    res = linprog(
        np.zeros(n),
        A_ub=np.array(A_ub),
        b_ub=np.array(b_ub),
        A_eq=np.ones((1, n)),
        b_eq=[1.0],
        bounds=[(0.0, constraints.per_asset_cap)] * n,
        method="highs",
    )
    if res.status != 0:
        raise InfeasibleConstraints(f"no portfolio satisfies the constraints ({res.message})")
    return np.asarray(res.x, float)


def _inequalities(universe, constraints, free):
    """Rows a_i'w >= b_i over the free variables, with names; drops redundant rows."""
    nf = int(free.sum())
    rows, rhs, names = [], [], []
    for j in range(nf):
        e = np.zeros(nf)
        e[j] = 1.0
        rows.append(e)
        rhs.append(0.0)
        names.append(f"w[{j}]>=0")
    if constraints.per_asset_cap < 1.0:
        for j in range(nf):
            e = np.zeros(nf)
            e[j] = -1.0
            rows.append(e)
            rhs.append(-constraints.per_asset_cap)
            names.append(f"w[{j}]<=cap")
    for tag in CONSTRAINT_GROUPS:
        lo, hi = constraints.bounds(tag)
        mask = universe.members(tag)[free].astype(float)
        if not mask.any():
            continue
        if lo > 0.0:
            rows.append(mask.copy())
            rhs.append(lo)
            names.append(f"{tag}>=low")
        if hi < 1.0:
            rows.append(-mask)
            rhs.append(-hi)
            names.append(f"{tag}<=high")
    return np.array(rows).reshape(-1, nf), np.array(rhs), names


def _independent_subset(G, candidates, base):
    """Greedy subset of candidate rows linearly independent together with ``base``."""
    chosen = []
    current = base
    for i in candidates:
        trial = np.vstack([current, G[i]])
        if np.linalg.matrix_rank(trial, tol=1e-10) == trial.shape[0]:
            chosen.append(i)
            current = trial
    return chosen


def _active_set_qp(H, g, G, h, x0, max_iter=1000):
    """Primal active-set method for min 0.5 x'Hx + g'x s.t. 1'x = 1, Gx >= h.

    ``x0`` must be feasible. Returns (x, working set, inequality multipliers, nu).
    """
    n = H.shape[0]
    ones = np.ones((1, n))
    x = x0.copy()
    slack = G @ x - h
    active = np.flatnonzero(np.abs(slack) <= 1e-12)
    W = _independent_subset(G, active, ones)
    lam = np.zeros(len(h))
    nu = 0.0
    for _ in range(max_iter):
        A = np.vstack([ones, G[W]]) if W else ones
        m = A.shape[0]
        grad = H @ x + g
        K = np.block([[H, A.T], [A, np.zeros((m, m))]])
        sol = np.linalg.solve(K, np.concatenate([-grad, np.zeros(m)]))
        p = sol[:n]
        if np.max(np.abs(p)) <= _KKT_TOL * max(1.0, np.max(np.abs(x))):
            # multipliers at the current point: grad = A' y
            y = -sol[n:]
            nu = y[0]
            mult = y[1:]
            if len(mult) == 0 or mult.min() >= -1e-12:
                lam[:] = 0.0
                lam[W] = np.maximum(mult, 0.0)
                return x, W, lam, nu
            W.pop(int(np.argmin(mult)))
            continue
        Gp = G @ p
        step = 1.0
        blocking = None
        for i in range(len(h)):
            if i in W or Gp[i] >= -1e-15:
                continue
            t = (h[i] - G[i] @ x) / Gp[i]
            if t < step:
                step, blocking = max(t, 0.0), i
        x = x + step * p
        if blocking is not None:
            W.append(blocking)
    raise RuntimeError("active-set QP did not converge")


def solve_markowitz(
    universe: AssetUniverse, constraints: PortfolioConstraints, risk_aversion: float
) -> PortfolioSpec:
    """Maximize ``mean'w - (mu/2) w'Cw`` under budget, long-only, cap and group bounds."""
    if not risk_aversion > 0:
        raise ValueError(f"risk_aversion must be positive, got {risk_aversion}")
    start = check_feasible(universe, constraints)
    n = universe.n
    C = universe.covariance
    alpha = universe.mean_returns

    # variables forced to zero by a [*, 0] group upper bound are eliminated
    fixed = np.zeros(n, bool)
    for tag in CONSTRAINT_GROUPS:
        if constraints.bounds(tag)[1] == 0.0:
            fixed |= universe.members(tag)
    free = ~fixed
    Cf = C[np.ix_(free, free)]
    eig = np.linalg.eigvalsh(Cf) if free.any() else np.array([0.0])
    degenerate = bool(eig[0] <= _PSD_TOL * max(eig[-1], 0.0))
    ridge = 0.0
    if degenerate:
        ridge = 1e-10 * max(np.trace(Cf) / max(len(Cf), 1), 1e-12)
    H = risk_aversion * (Cf + ridge * np.eye(len(Cf)))
    gvec = -alpha[free]
    G, h, names = _inequalities(universe, constraints, free)

    x0 = start[free]
    x0 = np.clip(x0, 0.0, constraints.per_asset_cap)
    x0 = x0 / x0.sum()
    x, W, lam, nu = _active_set_qp(H, gvec, G, h, x0)

    w = np.zeros(n)
    w[free] = x
    w[np.abs(w) < 1e-15] = 0.0
    # KKT certificate on the reduced problem, against the unregularized Hessian
    stat = risk_aversion * Cf @ x - alpha[free] - nu - G.T @ lam
    slack = G @ x - h
    kkt = {
        "stationarity": float(np.max(np.abs(stat))) if len(x) else 0.0,
        "primal": float(max(abs(x.sum() - 1.0), max(0.0, -slack.min()) if len(slack) else 0.0)),
        "dual": float(max(0.0, -lam.min())) if len(lam) else 0.0,
        "complementarity": float(np.max(np.abs(lam * slack))) if len(lam) else 0.0,
    }
    binding = tuple(sorted(names[i] for i in W if not names[i].startswith("w[") and lam[i] > 1e-12))
    vol = float(np.sqrt(max(w @ C @ w, 0.0)))
    return PortfolioSpec(
        id=0,
        risk_aversion=float(risk_aversion),
        weights=w,
        realized_vol=vol,
        expected_return=float(alpha @ w),
        binding=binding,
        degenerate=degenerate,
        kkt=kkt,
    )


def build_portfolio_menu(
    universe: AssetUniverse,
    constraints: PortfolioConstraints,
    risk_aversions: Sequence[float],
    label: str = "",
) -> list[PortfolioSpec]:
    """One portfolio per risk aversion, sorted by realized volatility, ids 0..k-1."""
    mus = sorted(set(float(m) for m in risk_aversions), reverse=True)
    specs = [solve_markowitz(universe, constraints, mu) for mu in mus]
    return merge_menus([specs], labels=[label])


def merge_menus(menus: Sequence[Sequence[PortfolioSpec]], labels: Sequence[str] | None = None) -> list[PortfolioSpec]:
    """Concatenate portfolio lists, drop duplicate weight vectors, sort by volatility and renumber."""
    labels = list(labels) if labels is not None else [""] * len(menus)
    pool = []
    for menu, lab in zip(menus, labels):
        for spec in menu:
            spec_label = spec.label or (f"{lab}:mu={spec.risk_aversion:g}" if lab else f"mu={spec.risk_aversion:g}")
            pool.append((spec, spec_label))
    unique = []
    for spec, lab in pool:
        if any(np.allclose(spec.weights, u.weights, rtol=0, atol=1e-10) for u, _ in unique):
            continue
        unique.append((spec, lab))
    unique.sort(key=lambda t: (t[0].realized_vol, -t[0].risk_aversion))
    out = []
    for i, (spec, lab) in enumerate(unique):
        out.append(
            PortfolioSpec(
                id=i,
                risk_aversion=spec.risk_aversion,
                weights=spec.weights,
                realized_vol=spec.realized_vol,
                expected_return=spec.expected_return,
                binding=spec.binding,
                degenerate=spec.degenerate,
                kkt=spec.kkt,
                label=lab,
            )
        )
    return out


# --------------------------------------------------------------------------
# Scenarios
# --------------------------------------------------------------------------


def lognormal_parameters(universe: AssetUniverse) -> tuple[np.ndarray, np.ndarray]:
    """Log-return mean and covariance whose simple returns have the universe's moments."""
    gross = 1.0 + universe.mean_returns
    if np.any(gross <= 0):
        raise ValueError("expected returns must exceed -100%")
    sigma = np.log1p(universe.covariance / np.outer(gross, gross))
    sigma = 0.5 * (sigma + sigma.T)
    mu = np.log(gross) - 0.5 * np.diag(sigma)
    return mu, sigma


def _sqrt_psd(sigma):
    vals, vecs = np.linalg.eigh(sigma)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def generate_return_scenarios(
    universe: AssetUniverse,
    curve_params: YieldCurveParams,
    horizon: int,
    n_scenarios: int,
    seed: int,
    curve_horizon: int = 30,
) -> list[ReturnScenario]:
    """Sample ``n_scenarios`` independent return/yield-curve paths over ``horizon`` years.

    Scenario s draws from streams keyed by (seed, s), so any subset of
    scenarios can be regenerated on its own. ``yield_curves`` has
    ``horizon + 1`` rows (the curve is also needed at the end of the run).
    """
    if horizon < 1 or n_scenarios < 1:
        raise ValueError("horizon and n_scenarios must be at least 1")
    sampler = ScenarioSampler(universe, curve_params, horizon, curve_horizon)
    return [sampler.sample(seed, s) for s in range(n_scenarios)]


class ScenarioSampler:
    """Draws scenario ``s`` for a given seed independently of all other scenarios."""

    def __init__(self, universe, curve_params, horizon, curve_horizon=30):
        self.mu, sigma = lognormal_parameters(universe)
        self.root = _sqrt_psd(sigma)
        self.curve_params = curve_params
        self.horizon = horizon
        self.curve_horizon = curve_horizon

    def sample(self, seed, s) -> ReturnScenario:
        return _one_scenario(self.mu, self.root, self.curve_params, self.horizon, self.curve_horizon, seed, s)


def _one_scenario(mu, root, curve_params, horizon, curve_horizon, seed, s):
    rng = _rng.stream(seed, s, _rng.RETURNS)
    z = rng.standard_normal((horizon, len(mu)))
    returns = np.expm1(mu + z @ root.T)
    crng = _rng.stream(seed, s, _rng.CURVE)
    eps = crng.standard_normal(horizon)
    rates = np.empty(horizon + 1)
    rates[0] = curve_params.initial_rate
    k, m, vol = curve_params.reversion_speed, curve_params.long_run_rate, curve_params.volatility
    for t in range(horizon):
        rates[t + 1] = rates[t] + k * (m - rates[t]) + vol * eps[t]
    curves = np.array([curve_params.curve(r, curve_horizon) for r in rates])
    return ReturnScenario(returns=returns, yield_curves=curves)


def discount_factors(yield_curve: Sequence[float], horizon: int) -> np.ndarray:
    """gamma[0] = 1 and gamma[tau] = (1 + y[tau])^-tau for tau = 1..horizon."""
    y = np.asarray(yield_curve, float)[:horizon]
    if len(y) < horizon:
        raise ValueError(f"yield curve has {len(y)} maturities, need {horizon}")
    if np.any(y <= -1):
        raise ValueError("yields must exceed -100%")
    tau = np.arange(1, horizon + 1, dtype=float)
    return np.concatenate([[1.0], (1.0 + y) ** (-tau)])


def write_scenarios(path, scenarios: Sequence[ReturnScenario], universe: AssetUniverse) -> None:
    """Columnar export: scenario, year, asset, return."""
    with open(path, "w", newline="") as fh:
        fh.write(SCENARIO_SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "year", "asset", "return"])
        for s, sc in enumerate(scenarios):
            for t in range(sc.returns.shape[0]):
                for a, name in enumerate(universe.names):
                    w.writerow([s, t, name, repr(float(sc.returns[t, a]))])


def read_scenario_returns(path, universe: AssetUniverse) -> np.ndarray:
    """Read a scenario export back into an (S, T, n) array."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != SCENARIO_SCHEMA:
        raise SchemaError(f"{path}: expected header {SCENARIO_SCHEMA!r}")
    rows = list(csv.DictReader(text[1:]))
    S = max(int(r["scenario"]) for r in rows) + 1
    T = max(int(r["year"]) for r in rows) + 1
    col = {name: i for i, name in enumerate(universe.names)}
    out = np.full((S, T, universe.n), np.nan)
    for r in rows:
        out[int(r["scenario"]), int(r["year"]), col[r["asset"]]] = float(r["return"])
    return out
