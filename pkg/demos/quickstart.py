"""Score the default plan's starting table, then tune it briefly on a small instance."""

from adaptive_pension.config import default_config
from adaptive_pension.experiment import Experiment, tune_plan
from adaptive_pension.policy import format_table

cfg = default_config("C", ["demographics.size=200", "simulation.n_scenarios=200", "grids.payout_step=2",
                           "tuning.max_sweeps=3"])
exp = Experiment.prepare(cfg)

start = cfg.initial_table(exp.menu, exp.ids)
report, _ = exp.evaluate(start)
print("starting table")
print(report.to_text())

outcome = tune_plan(exp, cfg)
print(f"tuned after {outcome.result.evaluations} evaluations, h = {outcome.result.h:.4f}")
print(format_table(outcome.result.table, exp.menu))
print("fresh scenarios")
print(outcome.out_of_sample.to_text())
