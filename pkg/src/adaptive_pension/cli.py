"""Command-line entry point: simulate, tune, fit-mortality, report, validate.

Exit codes: 0 success, 1 invalid input (config, files, arguments), 2 failure
while running (non-identifiable fit, too many aborted scenarios, ...).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .engine import MetricsReport, read_ratio_paths
from .errors import InfeasibleConstraints, NonPSDCovariance, PensionError, SchemaError
from .experiment import Experiment, tune_plan
from .mortality import (
    COVARIATE_NAMES,
    fit_cox,
    fit_income_betas,
    load_life_table,
    read_survival_records,
    write_model,
)
from .policy import breach_threshold, read_table, write_table

logger = logging.getLogger("adaptive_pension")

ARTIFACT_SCHEMA = "# adaptive_pension artifact v1"
PERCENTILES = (5, 25, 50, 75, 95)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Artifacts
# --------------------------------------------------------------------------


def _write_manifest(out: Path, kind: str, cfg: ExperimentConfig, seed: int) -> None:
    (out / "artifact.txt").write_text(
        f"{ARTIFACT_SCHEMA}\nkind = {kind}\npreset = {cfg.preset}\nseed = {seed}\n"
    )
    (out / "VERSION").write_text(__version__ + "\n")
    (out / "config.yaml").write_text(cfg.snapshot())


@dataclass
class Artifact:
    path: Path
    kind: str
    preset: str
    seed: int
    metrics: MetricsReport

    @classmethod
    def read(cls, path) -> "Artifact":
        path = Path(path)
        manifest = path / "artifact.txt"
        if not manifest.exists():
            raise SchemaError(f"{path}: not an artifact directory (no artifact.txt)")
        lines = manifest.read_text().splitlines()
        if not lines or lines[0].strip() != ARTIFACT_SCHEMA:
            found = lines[0].strip() if lines else "<empty>"
            raise SchemaError(f"{path}: artifact schema {found!r} is not supported (expected {ARTIFACT_SCHEMA!r})")
        meta = dict((k.strip(), v.strip()) for k, _, v in (ln.partition("=") for ln in lines[1:] if "=" in ln))
        metrics = MetricsReport.from_text((path / "metrics.txt").read_text())
        return cls(path, meta.get("kind", ""), meta.get("preset", ""), int(meta.get("seed", 0)), metrics)

    @property
    def label(self) -> str:
        return f"Plan {self.preset}" if self.preset in ("A", "B", "C", "D") else self.path.name

    def threshold(self) -> float:
        return breach_threshold(read_table(self.path / "policy.txt"))


def cmd_simulate(config_path, overrides: Sequence[str], out, policy_path=None) -> Path:
    cfg = load_config(config_path, overrides)
    exp = Experiment.prepare(cfg)
    table = read_table(policy_path) if policy_path else cfg.initial_table(exp.menu, exp.ids)
    report, log = exp.evaluate(table)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "simulate", cfg, cfg.simulation.seed)
    (out / "metrics.txt").write_text(report.to_text())
    write_table(out / "policy.txt", table, exp.menu)
    log.write_csv(out / "trajectory.csv")
    return out


def cmd_tune(config_path, overrides: Sequence[str], out, warm_start=None) -> Path:
    cfg = load_config(config_path, overrides)
    exp = Experiment.prepare(cfg)
    start = read_table(warm_start) if warm_start else None
    outcome = tune_plan(exp, cfg, warm_start=start)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "tune", cfg, cfg.out_of_sample_seed)
    (out / "metrics.txt").write_text(outcome.out_of_sample.to_text())
    (out / "metrics_in_sample.txt").write_text(outcome.in_sample.to_text())
    write_table(out / "policy.txt", outcome.result.table, exp.menu)
    write_table(out / "initial_policy.txt", start or cfg.initial_table(exp.menu, exp.ids), exp.menu)
    with open(out / "tuning_log.txt", "w") as fh:
        fh.write("# adaptive_pension tuning_log v1\nsweep\trow\tcolumn\tcandidate\th\taccepted\n")
        for e in outcome.result.log:
            fh.write(e.to_text() + "\n")
        fh.write(f"# final h = {outcome.result.h!r}; one_optimal = {outcome.result.one_optimal}; "
                 f"evaluations = {outcome.result.evaluations}\n")
    outcome.out_of_sample_log.write_csv(out / "trajectory.csv")
    return out


def cmd_fit_mortality(records_path, life_table_path, out, provenance: str = "") -> Path:
    records = read_survival_records(records_path)
    baseline = load_life_table(life_table_path) if life_table_path else load_life_table()
    model = fit_cox(records, baseline, COVARIATE_NAMES)
    obs = [(r.income_bin, r.t0, r.income) for r in records if r.income is not None and r.income_bin is not None]
    betas = fit_income_betas(obs) if obs else {}
    note = provenance or f"fitted from {Path(records_path).name} ({len(records)} records)"
    write_model(out, model, betas, note)
    return Path(out)


def percentile_bands(paths: np.ndarray) -> np.ndarray:
    """(years, 5) order-statistic percentiles per year, ignoring aborted (NaN) entries."""
    out = np.empty((paths.shape[1], len(PERCENTILES)))
    for t in range(paths.shape[1]):
        col = paths[:, t]
        col = col[~np.isnan(col)]
        out[t] = np.quantile(col, np.array(PERCENTILES) / 100.0, method="inverted_cdf") if col.size else np.nan
    return out


def _pct(x: float) -> str:
    return f"{100 * x:.2f}%"


def comparison_table(artifacts: Sequence[Artifact]) -> str:
    rows = [
        ("Mean percent of target benefit", lambda a: f"{a.metrics.mean_payout:.2f}%"),
        ("Probability of breaching A:L floor in one year (horizon)",
         lambda a: f"{_pct(a.metrics.breach_prob_1y)} ({_pct(a.metrics.breach_prob_horizon)})"),
        ("Sum of ex post value of breaches as a percentage of initial funds",
         lambda a: f"{a.metrics.ex_post_breach_value_pct:.2f}%"),
        ("Learned breach A:L threshold", lambda a: f"{a.threshold():g}"),
    ]
    header = ["metric"] + [a.label for a in artifacts]
    lines = ["\t".join(header)]
    for name, fn in rows:
        lines.append("\t".join([name] + [fn(a) for a in artifacts]))
    return "\n".join(lines) + "\n"


def cmd_report(artifact_dirs: Sequence, out=None) -> str:
    arts = [Artifact.read(p) for p in artifact_dirs]
    if not arts:
        raise UsageError("report needs at least one artifact directory")
    text = comparison_table(arts)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.tsv").write_text(text)
        for a in arts:
            bands = percentile_bands(read_ratio_paths(a.path / "trajectory.csv"))
            name = a.label.replace(" ", "_")
            with open(out / f"ratio_bands_{name}.csv", "w") as fh:
                fh.write("year," + ",".join(f"p{p}" for p in PERCENTILES) + "\n")
                for t, row in enumerate(bands):
                    fh.write(f"{t}," + ",".join(repr(float(x)) for x in row) + "\n")
    return text


def cmd_validate(config_path, overrides: Sequence[str]) -> str:
    cfg = load_config(config_path, overrides)
    menu, ids = cfg.menus()
    grids = cfg.grids(menu, ids)
    grids.check(cfg.rules.payout_bounds)
    if not grids.contains(cfg.initial_table(menu, ids)):
        raise ConfigError("initial policy table is not on the action grids", section="grids")
    return (f"ok: preset {cfg.preset}, {cfg.universe.n} assets, {len(menu)} portfolios "
            f"({len(grids.portfolio_ids)} admissible), {len(cfg.bins)} ratio bins\n")


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptive-pension", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="experiment YAML file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable)")

    sp = sub.add_parser("simulate", help="evaluate one policy table by Monte Carlo")
    with_config(sp)
    sp.add_argument("--policy", help="policy table file (default: the preset's initial table)")
    sp.add_argument("--out", required=True, help="artifact directory")

    sp = sub.add_parser("tune", help="tune a policy table, then score it on fresh scenarios")
    with_config(sp)
    sp.add_argument("--warm-start", help="policy table file to start from")
    sp.add_argument("--out", required=True, help="artifact directory")

    sp = sub.add_parser("fit-mortality", help="fit Cox coefficients and income scales")
    sp.add_argument("records", help="survival records file")
    sp.add_argument("--life-table", help="baseline life table (default: bundled)")
    sp.add_argument("--out", required=True, help="model file to write")
    sp.add_argument("--provenance", default="", help="note stored in the model header")

    sp = sub.add_parser("report", help="compare artifacts and emit ratio percentile bands")
    sp.add_argument("artifacts", nargs="+")
    sp.add_argument("--out", help="directory for comparison.tsv and band files")

    sp = sub.add_parser("validate", help="check a config without running anything")
    with_config(sp)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            print(cmd_simulate(args.config, args.overrides, args.out, args.policy))
        elif args.command == "tune":
            print(cmd_tune(args.config, args.overrides, args.out, args.warm_start))
        elif args.command == "fit-mortality":
            print(cmd_fit_mortality(args.records, args.life_table, args.out, args.provenance))
        elif args.command == "report":
            sys.stdout.write(cmd_report(args.artifacts, args.out))
        elif args.command == "validate":
            sys.stdout.write(cmd_validate(args.config, args.overrides))
    except (ConfigError, SchemaError, InfeasibleConstraints, NonPSDCovariance, UsageError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PensionError as exc:
        names = getattr(exc, "coefficients", ())
        detail = f" (coefficients: {', '.join(names)})" if names else ""
        print(f"error: {type(exc).__name__}: {exc}{detail}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
