from __future__ import annotations

import numpy as np
import pytest

from adaptive_pension.engine import SimulationConfig, build_scenarios, make_context
from adaptive_pension.market import (
    AssetClass,
    AssetUniverse,
    PortfolioConstraints,
    YieldCurveParams,
    build_portfolio_menu,
)
from adaptive_pension.mortality import COVARIATE_NAMES, BaselineHazard, CoxModel, load_life_table
from adaptive_pension.population import DemographicConfig, PlanRules, synthesize_population

# lines collected by the acceptance suite, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def two_asset_universe() -> AssetUniverse:
    assets = (AssetClass("bonds", "domestic", "fixed_income"), AssetClass("stocks", "domestic", "equities"))
    return AssetUniverse(assets, np.array([0.03, 0.07]), np.array([[0.0025, 0.001], [0.001, 0.03]]))


def zero_mortality() -> CoxModel:
    return CoxModel(np.zeros(len(COVARIATE_NAMES)), BaselineHazard.flat(0.0), COVARIATE_NAMES)


def bundled_mortality() -> CoxModel:
    return CoxModel(np.zeros(len(COVARIATE_NAMES)), load_life_table(), COVARIATE_NAMES)


class SmallWorld:
    """A 100-member plan on a two-asset universe, 10 simulated years."""

    def __init__(self, n_scenarios=60, seed=5, rules=None, years=10, size=100):
        self.universe = two_asset_universe()
        self.rules = rules or PlanRules(max_payout_change=2.0)
        self.mortality = bundled_mortality()
        self.population = synthesize_population(size, DemographicConfig(), 3, self.rules)
        self.curve = YieldCurveParams()
        self.config = SimulationConfig(years=years, horizon=10, n_scenarios=n_scenarios, seed=seed)
        self.menu = build_portfolio_menu(self.universe, PortfolioConstraints(), [50.0, 10.0, 2.0])
        self.scenarios = build_scenarios(self.population, self.rules, self.mortality, self.universe, self.curve,
                                         self.config)

    def context(self, rules=None):
        return make_context(self.scenarios, self.menu, rules or self.rules, self.config, self.universe)


@pytest.fixture(scope="session")
def small_world() -> SmallWorld:
    return SmallWorld()
