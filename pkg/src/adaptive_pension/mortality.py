"""Baseline hazard tables, Cox proportional-hazards mortality and its maximum-likelihood fit.

Ages are in years. A baseline table holds a per-year hazard rate for
integer ages; between integer ages the hazard is taken as constant, so the
cumulative hazard is a running sum at integer ages and linear in between.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _rng
from .errors import AgeOutOfRange, EmptyBin, NonIdentifiable, SchemaError

logger = logging.getLogger(__name__)

LIFE_TABLE_SCHEMA = "# adaptive_pension life_table v1"
RECORDS_SCHEMA = "# adaptive_pension survival_records v1"
MODEL_SCHEMA = "# adaptive_pension cox_model v1"

INCOME_BINS = ("poor", "lower_middle", "upper_middle", "rich")
EDUCATION_LEVELS = ("hs_dropout", "hs_degree", "college_degree", "advanced_degree")
REGIONS = ("northeast", "south", "midwest", "west")

# reference level (index 0) of each block is dropped
COVARIATE_NAMES = tuple(
    [f"income_{b}" for b in INCOME_BINS[1:]]
    + [f"education_{e}" for e in EDUCATION_LEVELS[1:]]
    + [f"region_{r}" for r in REGIONS[1:]]
)

DEFAULT_INCOME_BETAS = {"poor": 322.0, "lower_middle": 748.0, "upper_middle": 1394.0, "rich": 2880.0}

BUNDLED_LIFE_TABLE = Path(__file__).with_name("data") / "life_table_v1.txt"


@dataclass(frozen=True)
class CovariateVector:
    """One-hot income quartile, education level and census region (9 entries)."""

    values: tuple[int, ...]

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if len(vals) != len(COVARIATE_NAMES) or any(v not in (0, 1) for v in vals):
            raise ValueError(f"covariate vector must be {len(COVARIATE_NAMES)} zeros/ones, got {self.values}")
        for block in range(3):
            if sum(vals[3 * block : 3 * block + 3]) > 1:
                raise ValueError("at most one level per categorical block may be set")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_categories(cls, income_bin: int, education: int, region: int) -> "CovariateVector":
        vals = [0] * 9
        for block, level in enumerate((income_bin, education, region)):
            if not 0 <= level < 4:
                raise ValueError(f"categorical level must be in 0..3, got {level}")
            if level > 0:
                vals[3 * block + level - 1] = 1
        return cls(tuple(vals))

    def categories(self) -> tuple[int, int, int]:
        out = []
        for block in range(3):
            chunk = self.values[3 * block : 3 * block + 3]
            out.append(chunk.index(1) + 1 if 1 in chunk else 0)
        return tuple(out)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, float)


@dataclass(frozen=True, eq=False)
class BaselineHazard:
    """Per-year hazard by (birth cohort, sex, integer age).

    ``rates[c, s, a]`` is the hazard for cohort ``cohorts[c]`` (a birth year
    applies the latest cohort not after it), sex ``sexes[s]``, age ``a``.
    """

    cohorts: tuple[int, ...]
    sexes: tuple[str, ...]
    rates: np.ndarray

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        if rates.ndim != 3 or rates.shape[:2] != (len(self.cohorts), len(self.sexes)):
            raise ValueError("rates must have shape (cohorts, sexes, ages)")
        if np.any(np.isnan(rates)) or np.any(rates < 0):
            raise ValueError("hazard rates must be non-negative")
        if list(self.cohorts) != sorted(set(self.cohorts)):
            raise ValueError("cohorts must be strictly increasing")
        rates.flags.writeable = False
        cum = np.concatenate([np.zeros(rates.shape[:2] + (1,)), np.cumsum(rates, axis=2)], axis=2)
        cum.flags.writeable = False
        object.__setattr__(self, "cohorts", tuple(int(c) for c in self.cohorts))
        object.__setattr__(self, "sexes", tuple(self.sexes))
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "_cum", cum)

    @property
    def max_age(self) -> int:
        return self.rates.shape[2] - 1

    def _index(self, birth_year, sex):
        if birth_year is None:
            c = 0
        else:
            c = max(int(np.searchsorted(self.cohorts, birth_year, side="right")) - 1, 0)
        s = 0 if sex is None else self.sexes.index(sex)
        return c, s

    def rate_curve(self, birth_year=None, sex=None) -> np.ndarray:
        c, s = self._index(birth_year, sex)
        return self.rates[c, s]

    def rate(self, age: float, birth_year=None, sex=None) -> float:
        if not 0 <= age <= self.max_age + 1 - 1e-12 or np.isnan(age):
            raise AgeOutOfRange(f"age {age} outside table range 0..{self.max_age}")
        c, s = self._index(birth_year, sex)
        return float(self.rates[c, s, int(np.floor(age))])

    def cumulative(self, age, birth_year=None, sex=None):
        """Integrated hazard from age 0 to ``age`` (scalar or array)."""
        age = np.asarray(age, float)
        if np.any(age < 0) or np.any(age > self.max_age + 1) or np.any(np.isnan(age)):
            raise AgeOutOfRange(f"age outside table range 0..{self.max_age + 1}")
        c, s = self._index(birth_year, sex)
        cum = self._cum[c, s]
        lower = np.minimum(np.floor(age).astype(int), self.max_age)
        frac = age - lower
        with np.errstate(invalid="ignore"):
            out = cum[lower] + np.where(frac > 0, frac * self.rates[c, s][lower], 0.0)
        return out if out.ndim else float(out)

    @classmethod
    def flat(cls, rate: float, max_age: int = 120) -> "BaselineHazard":
        return cls((0,), ("F", "M"), np.full((1, 2, max_age + 1), float(rate)))

    @classmethod
    def gompertz(cls, a: float = 1e-4, b: float = 0.085, max_age: int = 120) -> "BaselineHazard":
        """lambda(age) = a * exp(b * age), identical for both sexes and all cohorts."""
        ages = np.arange(max_age + 1, dtype=float)
        curve = a * np.exp(b * ages)
        return cls((0,), ("F", "M"), np.broadcast_to(curve, (1, 2, max_age + 1)))

    @classmethod
    def from_curves(cls, curves: Mapping[tuple[int, str], Sequence[float]]) -> "BaselineHazard":
        cohorts = sorted({c for c, _ in curves})
        sexes = sorted({s for _, s in curves})
        length = {len(v) for v in curves.values()}
        if len(length) != 1:
            raise ValueError("all hazard curves need the same age range")
        rates = np.full((len(cohorts), len(sexes), length.pop()), np.nan)
        for (c, s), v in curves.items():
            rates[cohorts.index(c), sexes.index(s)] = v
        if np.isnan(rates).any():
            raise ValueError("life table must cover every (cohort, sex) pair")
        return cls(tuple(cohorts), tuple(sexes), rates)


def synthetic_life_table(
    cohorts: Sequence[int] = tuple(range(1920, 2030, 10)),
    max_age: int = 120,
    improvement: float = 0.01,
) -> BaselineHazard:
    """Gompertz-Makeham cohort table used to produce the bundled life table.

    Senescent mortality falls by ``improvement`` per birth year after 1950;
    the first year of life carries a fixed infant hazard.
    """
    params = {"F": (3e-4, 1.8e-5, 0.097), "M": (5e-4, 3.5e-5, 0.095)}
    ages = np.arange(max_age + 1, dtype=float)
    curves = {}
    for c in cohorts:
        factor = (1.0 - improvement) ** (c - 1950)
        for sex, (makeham, a, b) in params.items():
            h = makeham + a * factor * np.exp(b * ages)
            h[0] = 0.005
            curves[(c, sex)] = np.round(np.minimum(h, 4.0), 8)
    return BaselineHazard.from_curves(curves)


def load_life_table(path=BUNDLED_LIFE_TABLE) -> BaselineHazard:
    """Read rows ``sex,cohort_year,age,hazard`` under a schema header line."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != LIFE_TABLE_SCHEMA:
        raise SchemaError(f"{path}: first line must be {LIFE_TABLE_SCHEMA!r}")
    rows = list(csv.DictReader(lines[1:]))
    if not rows:
        raise ValueError(f"{path}: life table has no rows")
    curves: dict[tuple[int, str], dict[int, float]] = {}
    for r in rows:
        curves.setdefault((int(r["cohort_year"]), r["sex"]), {})[int(r["age"])] = float(r["hazard"])
    dense = {}
    for key, by_age in curves.items():
        ages = sorted(by_age)
        if ages != list(range(len(ages))):
            raise ValueError(f"{path}: ages for {key} must run 0..max without gaps")
        dense[key] = [by_age[a] for a in ages]
    return BaselineHazard.from_curves(dense)


def write_life_table(path, baseline: BaselineHazard) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(LIFE_TABLE_SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sex", "cohort_year", "age", "hazard"])
        for ci, c in enumerate(baseline.cohorts):
            for si, s in enumerate(baseline.sexes):
                for a, h in enumerate(baseline.rates[ci, si]):
                    w.writerow([s, c, a, repr(float(h))])


@dataclass(frozen=True, eq=False)
class CoxModel:
    coefficients: np.ndarray
    baseline: BaselineHazard
    names: tuple[str, ...] = ()

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=float).reshape(-1)
        if not np.all(np.isfinite(coef)):
            raise ValueError("Cox coefficients must be finite")
        coef.flags.writeable = False
        object.__setattr__(self, "coefficients", coef)

    def risk_score(self, X) -> float:
        x = X.as_array() if isinstance(X, CovariateVector) else np.asarray(X, float)
        return float(np.exp(self.coefficients @ x))

    def death_probabilities(self, X, birth_year=None, sex=None) -> np.ndarray:
        """One-year death probability for each integer age; certain death at the last age."""
        q = -np.expm1(-self.baseline.rate_curve(birth_year, sex) * self.risk_score(X))
        q = np.array(q)
        q[-1] = 1.0
        return q


def hazard(model: CoxModel, age: float, X, birth_year=None, sex=None) -> float:
    return model.baseline.rate(age, birth_year, sex) * model.risk_score(X)


def survival(model: CoxModel, t: float, X, t0: float, birth_year=None, sex=None) -> float:
    """Probability of surviving from tracking-start age ``t0`` to age ``t``."""
    if t < t0:
        raise AgeOutOfRange(f"t={t} precedes tracking start t0={t0}")
    b = model.baseline
    exposure = b.cumulative(t, birth_year, sex) - b.cumulative(t0, birth_year, sex)
    if exposure == 0:
        return 1.0
    return float(np.exp(-exposure * model.risk_score(X)))


def death_probability(model: CoxModel, age: int, X, birth_year=None, sex=None) -> float:
    """1 - S(age + 1) / S(age)."""
    return float(-np.expm1(-model.baseline.rate(age, birth_year, sex) * model.risk_score(X)))


# --------------------------------------------------------------------------
# Maximum likelihood
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SurvivalRecord:
    t0: float
    T: float
    delta: int
    covariates: object
    birth_year: int | None = None
    sex: str | None = None
    income: float | None = None
    income_bin: int | None = None

    def __post_init__(self):
        if self.T < self.t0:
            raise ValueError(f"exit age {self.T} precedes entry age {self.t0}")
        if self.delta not in (0, 1):
            raise ValueError("delta must be 0 or 1")

    def x(self) -> np.ndarray:
        c = self.covariates
        return c.as_array() if isinstance(c, CovariateVector) else np.atleast_1d(np.asarray(c, float))


def cox_objective(theta, exposure, X, delta):
    """Negated log-likelihood without baseline terms, with gradient and Hessian."""
    eta = X @ theta
    w = exposure * np.exp(eta)
    f = float(np.sum(w) - delta @ eta)
    g = X.T @ (w - delta)
    H = (X * w[:, None]).T @ X
    return f, g, H


def _design(records, baseline):
    X = np.array([r.x() for r in records], dtype=float)
    delta = np.array([r.delta for r in records], dtype=float)
    exposure = np.array(
        [baseline.cumulative(r.T, r.birth_year, r.sex) - baseline.cumulative(r.t0, r.birth_year, r.sex) for r in records]
    )
    return X, delta, exposure


def fit_cox(
    records: Sequence[SurvivalRecord],
    baseline: BaselineHazard,
    names: Sequence[str] | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> CoxModel:
    """Damped Newton on the convex negated log-likelihood."""
    if not records:
        raise ValueError("no survival records")
    X, delta, exposure = _design(records, baseline)
    d = X.shape[1]
    names = tuple(names) if names is not None else (COVARIATE_NAMES if d == len(COVARIATE_NAMES) else tuple(f"x{j}" for j in range(d)))
    if delta.sum() == 0:
        raise NonIdentifiable("no observed deaths: every coefficient diverges to -inf", names)
    # a non-negative covariate never present at a death pushes its coefficient to -inf
    nonneg = np.all(X >= 0, axis=0)
    dead_mass = delta @ X
    bad = [names[j] for j in range(d) if nonneg[j] and X[:, j].any() and dead_mass[j] == 0]
    if bad:
        raise NonIdentifiable(f"no observed deaths with covariate(s) {', '.join(bad)}", bad)

    theta = np.zeros(d)
    f, g, H = cox_objective(theta, exposure, X, delta)
    for it in range(max_iter):
        if np.linalg.norm(g) <= tol:
            break
        try:
            step = np.linalg.solve(H, -g)
            if not np.all(np.isfinite(step)) or g @ step >= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = -g / max(np.linalg.norm(g), 1.0)
        t = 1.0
        while True:
            cand = theta + t * step
            fc, gc, Hc = cox_objective(cand, exposure, X, delta)
            if np.isfinite(fc) and fc <= f + 1e-4 * t * (g @ step):
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            # no further descent possible at double precision
            break
        theta, f, g, H = cand, fc, gc, Hc
        if np.max(np.abs(theta)) > 50:
            diverging = [names[j] for j in range(d) if abs(theta[j]) > 50]
            raise NonIdentifiable(f"coefficient(s) diverging: {', '.join(diverging)}", diverging)
    logger.debug("fit_cox: %d iterations, |grad| = %.3e", it, np.linalg.norm(g))
    return CoxModel(theta, baseline, names)


def fit_income_betas(
    observations: Iterable[tuple[int | str, float, float]], bins: Sequence[str] = INCOME_BINS
) -> dict[str, float]:
    """Least-squares income scale per bin, given (bin, age, income) observations.

    The regressor is the clipped age min(max(age, 25), 45).
    """
    num = {b: 0.0 for b in bins}
    den = {b: 0.0 for b in bins}
    for b, age, income in observations:
        key = bins[b] if isinstance(b, (int, np.integer)) else b
        if key not in num:
            raise EmptyBin(f"unknown income bin {b!r}")
        m = min(max(float(age), 25.0), 45.0)
        num[key] += m * float(income)
        den[key] += m * m
    empty = [b for b in bins if den[b] == 0]
    if empty:
        raise EmptyBin(f"no income observations for bin(s) {', '.join(empty)}")
    return {b: num[b] / den[b] for b in bins}


# --------------------------------------------------------------------------
# Synthetic cohorts and file formats
# --------------------------------------------------------------------------


def simulate_survival_records(
    theta: Sequence[float],
    baseline: BaselineHazard,
    n: int,
    seed: int,
    censor_fraction: float = 0.3,
    entry_age: tuple[int, int] = (50, 70),
    covariate_prob: float = 0.5,
) -> list[SurvivalRecord]:
    """Cohort with independent Bernoulli covariates and uniform random censoring.

    Death ages are drawn by inverting the cumulative hazard; the censoring
    window is calibrated by bisection so that roughly ``censor_fraction`` of
    the records end censored.
    """
    theta = np.asarray(theta, float)
    rng = _rng.stream(seed, _rng.SYNTHESIS)
    X = (rng.random((n, len(theta))) < covariate_prob).astype(float)
    t0 = rng.integers(entry_age[0], entry_age[1] + 1, size=n).astype(float)
    T, delta = _death_or_censoring(X @ theta, t0, baseline, rng, censor_fraction)
    return [SurvivalRecord(float(t0[i]), float(T[i]), int(delta[i]), tuple(X[i])) for i in range(n)]


def simulate_cohort_records(
    theta: Sequence[float],
    baseline: BaselineHazard,
    n: int,
    seed: int,
    betas: Mapping[str, float] = DEFAULT_INCOME_BETAS,
    censor_fraction: float = 0.3,
    entry_age: tuple[int, int] = (50, 70),
) -> list[SurvivalRecord]:
    """Records with uniformly drawn income/education/region categories.

    Each record also carries its income at the entry age under ``betas``,
    so the same file exercises both the hazard fit and the income fit.
    """
    theta = np.asarray(theta, float)
    if theta.shape != (len(COVARIATE_NAMES),):
        raise ValueError(f"need {len(COVARIATE_NAMES)} coefficients, got {theta.shape}")
    rng = _rng.stream(seed, _rng.SYNTHESIS)
    cats = rng.integers(0, 4, size=(n, 3))
    covs = [CovariateVector.from_categories(*map(int, c)) for c in cats]
    X = np.array([c.as_array() for c in covs])
    t0 = rng.integers(entry_age[0], entry_age[1] + 1, size=n).astype(float)
    T, delta = _death_or_censoring(X @ theta, t0, baseline, rng, censor_fraction)
    return [
        SurvivalRecord(float(t0[i]), float(T[i]), int(delta[i]), covs[i], income_bin=int(cats[i, 0]),
                       income=float(betas[INCOME_BINS[cats[i, 0]]] * min(max(t0[i], 25.0), 45.0)))
        for i in range(n)
    ]


def _death_or_censoring(risk_log, t0, baseline, rng, censor_fraction):
    n = len(t0)
    e = rng.exponential(size=n)
    u = rng.random(n)
    cum = baseline._cum[0, 0]
    ages = np.arange(len(cum), dtype=float)
    target = np.interp(t0, ages, cum) + e / np.exp(risk_log)
    death_age = np.interp(target, cum, ages, right=ages[-1])

    def censored_share(width):
        return np.mean(t0 + u * width < death_age)

    lo, hi = 1e-6, 200.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if censored_share(mid) > censor_fraction:
            lo = mid
        else:
            hi = mid
    cens_age = t0 + u * 0.5 * (lo + hi)
    T = np.minimum(death_age, cens_age)
    delta = (death_age <= cens_age).astype(int)
    return T, delta


RECORD_COLUMNS = ("id", "t0", "T", "delta", "income_q", "education", "region", "sex", "birth_year", "income")


def write_survival_records(path, records: Sequence[SurvivalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(RECORDS_SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for i, r in enumerate(records):
            if not isinstance(r.covariates, CovariateVector):
                raise ValueError("only categorical covariate records can be written")
            inc, edu, reg = r.covariates.categories()
            w.writerow([i, repr(r.t0), repr(r.T), r.delta, inc, edu, reg, r.sex or "",
                        "" if r.birth_year is None else r.birth_year,
                        "" if r.income is None else repr(r.income)])


def read_survival_records(path) -> list[SurvivalRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != RECORDS_SCHEMA:
        raise SchemaError(f"{path}: first line must be {RECORDS_SCHEMA!r}")
    reader = csv.DictReader(lines[1:])
    out = []
    for lineno, r in enumerate(reader, start=3):
        try:
            inc = int(r["income_q"])
            cov = CovariateVector.from_categories(inc, int(r["education"]), int(r["region"]))
            out.append(
                SurvivalRecord(
                    t0=float(r["t0"]),
                    T=float(r["T"]),
                    delta=int(r["delta"]),
                    covariates=cov,
                    birth_year=int(r["birth_year"]) if r.get("birth_year") else None,
                    sex=r.get("sex") or None,
                    income=float(r["income"]) if r.get("income") else None,
                    income_bin=inc,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad survival record ({exc})") from exc
    if not out:
        raise ValueError(f"{path}: no survival records")
    return out


def write_model(path, model: CoxModel, betas: Mapping[str, float] | None = None, provenance: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(MODEL_SCHEMA + "\n")
        if provenance:
            fh.write(f"# {provenance}\n")
        for name, c in zip(model.names, model.coefficients):
            fh.write(f"theta.{name} = {float(c)!r}\n")
        for b, v in (betas or {}).items():
            fh.write(f"beta.{b} = {float(v)!r}\n")


def read_model(path) -> tuple[dict[str, float], dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != MODEL_SCHEMA:
        raise SchemaError(f"{path}: first line must be {MODEL_SCHEMA!r}")
    theta, betas = {}, {}
    for line in lines[1:]:
        if not line.strip() or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        kind, _, name = key.strip().partition(".")
        (theta if kind == "theta" else betas)[name] = float(val)
    return theta, betas
