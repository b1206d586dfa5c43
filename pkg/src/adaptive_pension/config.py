"""Experiment configuration: one YAML document with named sections.

Validation errors carry the section and the source line of the offending
entry. Plan presets A-D rewrite the ``plan`` section before anything is
built, so a preset and the equivalent hand-written ``custom`` plan yield
the same experiment.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .engine import SimulationConfig
from .errors import ConfigError, InfeasibleConstraints, NonPSDCovariance
from .market import (
    AssetClass,
    AssetUniverse,
    PortfolioConstraints,
    PortfolioSpec,
    YieldCurveParams,
    build_portfolio_menu,
    check_feasible,
    merge_menus,
)
from .mortality import BUNDLED_LIFE_TABLE, COVARIATE_NAMES, CoxModel, load_life_table, read_model
from .policy import Action, PolicyTable, RatioBins
from .population import DemographicConfig, PlanRules
from .tuning import ActionGrids, MetricSpec, ObjectiveSpec, payout_grid

SCHEMA_VERSION = 1
DEFAULT_CONFIG = Path(__file__).with_name("data") / "default_experiment.yaml"

PRESETS: dict[str, dict[str, Any]] = {
    "A": {"assets": "fixed_income", "allocation": "static", "payout_deviation": 0.0, "max_payout_change": 0.0},
    "B": {"assets": "fixed_income", "allocation": "static", "payout_deviation": 10.0, "max_payout_change": 2.0},
    "C": {"assets": "fixed_income", "allocation": "adaptive", "payout_deviation": 10.0, "max_payout_change": 2.0},
    "D": {"assets": "with_equities", "allocation": "adaptive", "payout_deviation": 10.0, "max_payout_change": 2.0},
}
REQUIRED_SECTIONS = ("plan", "universe", "yield_curve", "constraints", "menu", "demographics", "mortality",
                     "rules", "simulation", "objective", "grids", "tuning")


# --------------------------------------------------------------------------
# Raw document handling
# --------------------------------------------------------------------------


def _line_map(node, prefix=(), out=None) -> dict[tuple, int]:
    """Dotted key path -> 1-based source line, from a composed YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            _line_map(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[prefix + (i,)] = v.start_mark.line + 1
            _line_map(v, prefix + (i,), out)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, _, value = text.partition("=")
    keys = [k for k in path.strip().split(".") if k]
    if len(keys) < 2:
        raise ConfigError(f"override {text!r} must name a section and a key")
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value: {exc}") from None
    return keys, parsed


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides:
        keys, value = parse_override(text)
        node = raw
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = value
    return raw


def load_raw(path=DEFAULT_CONFIG) -> tuple[dict, dict]:
    text = Path(path).read_text()
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{path}: invalid YAML: {getattr(exc, 'problem', exc)}",
                          line=None if mark is None else mark.line + 1) from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections", line=1)
    return raw, _line_map(node) if node is not None else {}


# --------------------------------------------------------------------------
# Typed config
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    raw: dict
    preset: str
    universe: AssetUniverse
    curve: YieldCurveParams
    constraints: dict[str, PortfolioConstraints]
    risk_aversions: tuple[float, ...]
    asset_set: str
    allocation: str
    static_portfolio: int
    population_size: int
    population_seed: int
    demographics: DemographicConfig
    mortality: CoxModel
    rules: PlanRules
    simulation: SimulationConfig
    workers: int
    objective: ObjectiveSpec
    bins: RatioBins
    payout_step: float
    target_ratios: tuple[float | None, ...]
    call_floor: float
    max_sweeps: int
    out_of_sample_seed: int
    initial_target: float

    def snapshot(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)

    def menus(self) -> tuple[list[PortfolioSpec], dict[str, tuple[int, ...]]]:
        """Merged menu over both asset sets, and the ids admitted by each set.

        Ids are shared across plans so one plan's table can seed another's.
        """
        fi = build_portfolio_menu(self.universe, self.constraints["fixed_income"], self.risk_aversions, "fixed_income")
        eq = build_portfolio_menu(self.universe, self.constraints["with_equities"], self.risk_aversions, "with_equities")
        menu = merge_menus([fi, eq])
        ids = {}
        for name, part in (("fixed_income", fi), ("with_equities", fi + eq)):
            ids[name] = tuple(
                p.id for p in menu if any(np.allclose(p.weights, q.weights, rtol=0, atol=1e-10) for q in part)
            )
        return menu, ids

    def static_id(self, menu, ids) -> int:
        fi = ids["fixed_income"]
        if not 0 <= self.static_portfolio < len(fi):
            raise ConfigError(f"static_portfolio must index the {len(fi)} fixed-income portfolios", section="plan")
        return fi[self.static_portfolio]

    def grids(self, menu, ids) -> ActionGrids:
        if self.allocation == "static":
            pids = (self.static_id(menu, ids),)
        else:
            pids = ids[self.asset_set]
        return ActionGrids(pids, payout_grid(self.rules.payout_bounds, self.payout_step), self.target_ratios,
                           self.call_floor)

    def initial_table(self, menu, ids) -> PolicyTable:
        pid = self.static_id(menu, ids)
        rows = []
        for i in range(len(self.bins)):
            call = self.bins.bounds(i)[1] <= self.call_floor
            rows.append(Action(pid, 100.0, self.initial_target if call else None))
        return PolicyTable(self.bins, tuple(rows))


class _Section:
    """Typed access to one section with line-aware errors."""

    def __init__(self, name: str, data, lines: Mapping[tuple, int]):
        self.name, self.lines = name, lines
        if not isinstance(data, dict):
            raise ConfigError(f"section must be a mapping", section=name, line=lines.get((name,)))
        self.data = data

    def line(self, *keys):
        for n in range(len(keys), -1, -1):
            ln = self.lines.get((self.name,) + tuple(keys[:n]))
            if ln is not None:
                return ln
        return None

    def fail(self, msg, *keys):
        raise ConfigError(msg, section=self.name, line=self.line(*keys))

    def get(self, key, default=..., kind=None):
        if key not in self.data:
            if default is ...:
                self.fail(f"missing required key {key!r}")
            return default
        v = self.data[key]
        if kind is not None and v is not None:
            try:
                if kind is int and (isinstance(v, bool) or float(v) != int(v)):
                    raise ValueError
                v = kind(v)
            except (TypeError, ValueError):
                self.fail(f"{key!r} must be {kind.__name__}, got {v!r}", key)
        return v

    def sub(self, key) -> "_Section":
        if key not in self.data:
            self.fail(f"missing required key {key!r}")
        return _Section(f"{self.name}.{key}", self.data[key], {
            (f"{self.name}.{key}",) + k[2:]: v for k, v in self.lines.items() if k[:2] == (self.name, key)
        } | {(f"{self.name}.{key}",): self.line(key)})


def _build(section: _Section, fn, *keys):
    try:
        return fn()
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError, InfeasibleConstraints, NonPSDCovariance) as exc:
        section.fail(str(exc), *keys)


def _target(v, sec, i):
    if v is None or (isinstance(v, str) and v.lower() == "none"):
        return None
    try:
        return float(v)
    except (TypeError, ValueError):
        sec.fail(f"target ratio {v!r} must be a number or null", "target_ratios", i)


def resolve(raw: dict, lines: Mapping[tuple, int] | None = None, base_dir=None) -> ExperimentConfig:
    lines = lines or {}
    base_dir = Path(base_dir or ".")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}", line=lines.get(("schema_version",)))
    for name in REQUIRED_SECTIONS:
        if name not in raw:
            raise ConfigError(f"missing section {name!r}", section=name)
    raw = copy.deepcopy(raw)
    S = {name: _Section(name, raw[name], lines) for name in REQUIRED_SECTIONS}

    plan = S["plan"]
    preset = str(plan.get("preset", "custom"))
    if preset not in PRESETS and preset != "custom":
        plan.fail(f"preset must be one of A, B, C, D, custom; got {preset!r}", "preset")
    if preset in PRESETS:
        plan.data.update(PRESETS[preset])
    asset_set = plan.get("assets", "fixed_income")
    if asset_set not in ("fixed_income", "with_equities"):
        plan.fail(f"assets must be fixed_income or with_equities, got {asset_set!r}", "assets")
    allocation = plan.get("allocation", "static")
    if allocation not in ("static", "adaptive"):
        plan.fail(f"allocation must be static or adaptive, got {allocation!r}", "allocation")

    # universe
    uni = S["universe"]
    assets_raw = uni.get("assets")
    if not isinstance(assets_raw, list) or not assets_raw:
        uni.fail("'assets' must be a non-empty list", "assets")
    assets, means = [], []
    for i, a in enumerate(assets_raw):
        if not isinstance(a, dict) or not {"name", "region", "group", "mean"} <= set(a):
            uni.fail("each asset needs name, region, group and mean", "assets", i)
        assets.append(_build(uni, lambda: AssetClass(str(a["name"]), a["region"], a["group"]), "assets", i))
        means.append(a["mean"])
    cov = uni.get("covariance")
    universe = _build(uni, lambda: AssetUniverse.from_lower_triangle(assets, means, cov), "covariance")

    curve = _build(S["yield_curve"], lambda: YieldCurveParams(**S["yield_curve"].data))

    cons = S["constraints"]
    constraints = {}
    for name in ("fixed_income", "with_equities"):
        sub = cons.sub(name)
        constraints[name] = _build(sub, lambda: PortfolioConstraints(
            per_asset_cap=float(sub.get("per_asset_cap", 1.0)),
            group_bounds={k: tuple(v) for k, v in (sub.get("group_bounds", {}) or {}).items()},
        ))
        _build(sub, lambda: check_feasible(universe, constraints[name]), "group_bounds")
    mus = S["menu"].get("risk_aversions")
    if not isinstance(mus, list) or not mus or any(not isinstance(m, (int, float)) or m <= 0 for m in mus):
        S["menu"].fail("risk_aversions must be a non-empty list of positive numbers", "risk_aversions")

    demo = S["demographics"]
    size = demo.get("size", kind=int)
    pop_seed = demo.get("seed", 0, kind=int)
    dkw = {k: v for k, v in demo.data.items() if k not in ("size", "seed")}
    if size < 1:
        demo.fail("size must be at least 1", "size")
    demographics = _build(demo, lambda: DemographicConfig(**dkw))

    mort = S["mortality"]
    table_path = mort.get("life_table", "bundled")
    table_file = BUNDLED_LIFE_TABLE if table_path == "bundled" else (base_dir / table_path)
    if "model" in mort.data:
        theta_map, _ = _build(mort, lambda: read_model(base_dir / mort.data["model"]), "model")
    else:
        theta_map = mort.get("coefficients", {}) or {}
    unknown = set(theta_map) - set(COVARIATE_NAMES)
    if unknown:
        mort.fail(f"unknown covariates {sorted(unknown)}", "coefficients")
    theta = [float(theta_map.get(n, 0.0)) for n in COVARIATE_NAMES]
    baseline = _build(mort, lambda: load_life_table(table_file), "life_table")
    mortality = CoxModel(np.array(theta), baseline, COVARIATE_NAMES)

    rsec = S["rules"]
    rkw = dict(rsec.data)
    rkw["max_payout_deviation"] = plan.get("payout_deviation", 10.0, kind=float)
    rkw["max_payout_change"] = plan.get("max_payout_change", None, kind=float)
    rules = _build(rsec, lambda: PlanRules(**rkw))

    sim = S["simulation"]
    skw = {k: v for k, v in sim.data.items() if k != "workers"}
    workers = sim.get("workers", 1, kind=int)
    simulation = _build(sim, lambda: SimulationConfig(**skw))

    obj = S["objective"]
    specs = {}
    for name in ("c", "q_bar", "delta_q"):
        sub = obj.sub(name)
        specs[name] = _build(sub, lambda: MetricSpec(sub.get("low", kind=float), sub.get("high", kind=float),
                                                     sub.get("priority", 1.0, kind=float)))

    g = S["grids"]
    edges = g.get("bins")
    bins = _build(g, lambda: RatioBins(tuple(edges)), "bins")
    targets = tuple(_target(v, g, i) for i, v in enumerate(g.get("target_ratios")))

    tun = S["tuning"]
    cfg = ExperimentConfig(
        raw=raw,
        preset=preset,
        universe=universe,
        curve=curve,
        constraints=constraints,
        risk_aversions=tuple(float(m) for m in mus),
        asset_set=asset_set,
        allocation=allocation,
        static_portfolio=plan.get("static_portfolio", 0, kind=int),
        population_size=size,
        population_seed=pop_seed,
        demographics=demographics,
        mortality=mortality,
        rules=rules,
        simulation=simulation,
        workers=workers,
        objective=ObjectiveSpec(**specs),
        bins=bins,
        payout_step=g.get("payout_step", 1.0, kind=float),
        target_ratios=targets,
        call_floor=g.get("call_floor", 0.0, kind=float),
        max_sweeps=tun.get("max_sweeps", 20, kind=int),
        out_of_sample_seed=tun.get("out_of_sample_seed", simulation.seed + 1, kind=int),
        initial_target=tun.get("initial_target", 1.0, kind=float),
    )
    if cfg.payout_step <= 0 or not math.isfinite(cfg.payout_step):
        g.fail("payout_step must be positive", "payout_step")
    if "model" not in mort.data and table_path != "bundled":
        raw["mortality"]["life_table"] = str(table_file.resolve())
    if "model" in mort.data:
        raw["mortality"]["model"] = str((base_dir / mort.data["model"]).resolve())
    return cfg


def load_config(path=DEFAULT_CONFIG, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw, lines = load_raw(path)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return resolve(raw, lines, Path(path).parent)


def default_config(preset: str | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    extra = [f"plan.preset={preset}"] if preset else []
    return load_config(DEFAULT_CONFIG, extra + list(overrides))


def with_preset(config: ExperimentConfig, preset: str) -> ExperimentConfig:
    """The same experiment under another plan preset."""
    return resolve(apply_overrides(config.raw, [f"plan.preset={preset}"]))
