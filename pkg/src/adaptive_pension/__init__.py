"""Monte Carlo simulation and table-policy tuning for adaptive pension plans."""

__version__ = "0.1.0"

from .engine import (
    EvalContext,
    MetricsReport,
    PlanState,
    ScenarioSet,
    SimulationConfig,
    TrajectoryLog,
    build_scenarios,
    evaluate_policy,
    initial_assets,
    step,
)
from .market import (
    AssetClass,
    AssetUniverse,
    PortfolioConstraints,
    PortfolioSpec,
    YieldCurveParams,
    build_portfolio_menu,
    discount_factors,
    generate_return_scenarios,
    solve_markowitz,
)
from .mortality import BaselineHazard, CovariateVector, CoxModel, SurvivalRecord, fit_cox, fit_income_betas
from .policy import Action, Observation, PolicyTable, RatioBins, external_cash, extended_ratio, lookup_actions
from .population import Individual, LiabilityProjection, PlanRules, Population, project_liabilities
from .tuning import ActionGrids, MetricSpec, ObjectiveSpec, eta, objective, tune, verify_one_optimality
