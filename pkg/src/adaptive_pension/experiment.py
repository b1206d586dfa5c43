"""Wiring from an experiment config to populations, scenario sets and tuned plans."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from .config import ExperimentConfig, with_preset
from .engine import EvalContext, MetricsReport, ScenarioSet, TrajectoryLog, build_scenarios, evaluate_policy
from .market import PortfolioSpec
from .policy import PolicyTable
from .population import Population, synthesize_population
from .tuning import TuneResult, objective, tune

logger = logging.getLogger(__name__)


@dataclass
class Experiment:
    config: ExperimentConfig
    population: Population
    menu: list[PortfolioSpec]
    ids: dict[str, tuple[int, ...]]
    _scenarios: dict = field(default_factory=dict, repr=False)

    @classmethod
    def prepare(cls, config: ExperimentConfig) -> "Experiment":
        pop = synthesize_population(config.population_size, config.demographics, config.population_seed, config.rules)
        menu, ids = config.menus()
        return cls(config, pop, menu, ids)

    def scenarios(self, seed: int | None = None) -> ScenarioSet:
        seed = self.config.simulation.seed if seed is None else seed
        if seed not in self._scenarios:
            cfg = self.config
            sim = replace(cfg.simulation, seed=seed)
            self._scenarios[seed] = build_scenarios(self.population, cfg.rules, cfg.mortality, cfg.universe, cfg.curve,
                                                    sim, workers=cfg.workers)
        return self._scenarios[seed]

    def context(self, seed: int | None = None, config: ExperimentConfig | None = None) -> EvalContext:
        """Evaluation context on the scenario set for ``seed``; ``config`` swaps in another
        plan's rules while keeping the same scenarios."""
        cfg = config or self.config
        seed = self.config.simulation.seed if seed is None else seed
        sim = replace(cfg.simulation, seed=seed)
        return EvalContext(self.scenarios(seed), tuple(self.menu), cfg.rules, sim, cfg.universe.mean_returns)

    def evaluate(self, table: PolicyTable, seed: int | None = None,
                 config: ExperimentConfig | None = None) -> tuple[MetricsReport, TrajectoryLog]:
        return evaluate_policy(table, self.context(seed, config), workers=self.config.workers)


@dataclass
class PlanOutcome:
    preset: str
    config: ExperimentConfig
    result: TuneResult
    in_sample: MetricsReport
    out_of_sample: MetricsReport
    out_of_sample_log: TrajectoryLog


def tune_plan(exp: Experiment, config: ExperimentConfig, warm_start: PolicyTable | None = None) -> PlanOutcome:
    """Tune one plan on the shared tuning scenarios, then score it on fresh ones."""
    ctx = exp.context(config=config)
    grids = config.grids(exp.menu, exp.ids)
    start = warm_start if warm_start is not None else config.initial_table(exp.menu, exp.ids)
    result = tune(start, grids, ctx, config.objective, config.max_sweeps, workers=config.workers)
    in_sample, _ = evaluate_policy(result.table, ctx, workers=config.workers)
    oos, log = exp.evaluate(result.table, seed=config.out_of_sample_seed, config=config)
    return PlanOutcome(config.preset, config, result, in_sample, oos, log)


def plan_chain(base: ExperimentConfig, presets: Sequence[str] = ("A", "B", "C", "D")
               ) -> tuple[Experiment, list[PlanOutcome]]:
    """Tune the plans in order, each starting from the previous plan's result.

    Each plan's admissible tables contain the previous plan's, so starting
    there means the tuned objective can only stay level or improve.
    """
    exp = Experiment.prepare(base)
    outcomes: list[PlanOutcome] = []
    table = None
    for p in presets:
        out = tune_plan(exp, with_preset(base, p), warm_start=table)
        logger.info("plan %s: h = %.6g after %d evaluations", p, out.result.h, out.result.evaluations)
        outcomes.append(out)
        table = out.result.table
    return exp, outcomes


def plan_objective(outcome: PlanOutcome) -> float:
    return objective(outcome.in_sample, outcome.config.objective)
