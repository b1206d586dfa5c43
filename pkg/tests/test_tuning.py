import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_pension.engine import EvalContext, MetricsReport, evaluate_policy
from adaptive_pension.errors import EvaluationFailure
from adaptive_pension.policy import Action, PolicyTable, RatioBins
from adaptive_pension.tuning import (
    ActionGrids,
    Evaluator,
    MetricSpec,
    ObjectiveSpec,
    eta,
    exhaustive_search,
    objective,
    payout_grid,
    tune,
    verify_one_optimality,
)

OBJECTIVE = ObjectiveSpec(MetricSpec(-0.05, 0.05, 50.0), MetricSpec(95.0, 115.0, 1.0), MetricSpec(-2.0, 2.0, 1.0))


def report(c, q, dq):
    return MetricsReport(c, q, dq, c, 0.0, 0.0, 1.0, 1, 1)


# -- eta -------------------------------------------------------------------


def test_eta_examples():
    assert eta(0.0, MetricSpec(0, 1)) == 0.0
    assert eta(0.5, MetricSpec(0, 1)) == -0.25
    assert eta(2.0, MetricSpec(0, 1, 2)) == 10.0
    assert eta(1.0, MetricSpec(0, 1)) == 0.0
    assert eta(-1.0, MetricSpec(0, 1)) == 5.0


@given(st.floats(-100, 100), st.floats(0.01, 100), st.floats(0.01, 10), st.floats(-300, 300))
def test_eta_shape(low, width, priority, x):
    spec = MetricSpec(low, low + width, priority)
    val = eta(x, spec)
    if spec.low < x < spec.high:
        assert val < 0 or abs(val) <= 1e-12 * max(1.0, abs(x))
        assert val >= eta(spec.midpoint, spec) - 1e-9
    elif x < spec.low or x > spec.high:
        assert val > 0 or abs(x - spec.low) < 1e-12 or abs(x - spec.high) < 1e-12


def test_metric_spec_validation():
    with pytest.raises(ValueError):
        MetricSpec(1.0, 1.0)
    with pytest.raises(ValueError):
        MetricSpec(0.0, 1.0, 0.0)
    s = MetricSpec(2.0, 6.0, 3.0)
    assert (s.midpoint, s.inner_slope, s.outer_slope) == (4.0, 2.0, 20.0)


def test_objective_examples():
    spec = ObjectiveSpec(MetricSpec(0, 0.1), MetricSpec(90, 130), MetricSpec(0, 2))
    assert objective(report(0, 90, 0), spec) == 0.0
    mid = objective(report(0.05, 110, 1.0), spec)
    assert mid == pytest.approx(-(0.05 * 0.05 + 20 * 20 + 1 * 1), rel=1e-12)
    r = report(0.3, 101, 5)
    assert objective(r, spec.scaled(2.0)) == pytest.approx(2 * objective(r, spec), rel=1e-12)


# -- grids -------------------------------------------------------------------


def test_payout_grid():
    assert payout_grid((90, 110), 1.0) == tuple(float(q) for q in range(90, 111))
    assert payout_grid((100, 100)) == (100.0,)


def test_call_floor_keeps_cash_calls_in_low_bins():
    g = ActionGrids((0,), (100.0,), (None, 0.8, 1.0), call_floor=0.6)
    t = PolicyTable(RatioBins((0.6, 1.0)), (Action(0, 100.0, 1.0), Action(0, 100.0), Action(0, 100.0)))
    assert g.candidates(t, 0, "target_ratio") == (0.8, 1.0)
    assert g.candidates(t, 1, "target_ratio") == (None, 0.8, 1.0)
    assert g.contains(t)
    assert not g.contains(t.with_cell(0, "target_ratio", None))


def test_grid_validation():
    with pytest.raises(ValueError):
        ActionGrids((0,), (101.0, 100.0), (None,))
    with pytest.raises(ValueError):
        ActionGrids((0,), (), (None,))
    with pytest.raises(ValueError):
        ActionGrids((0,), (100.0, 120.0), (None,)).check((90, 110))


# -- tuning --------------------------------------------------------------------


def two_bin_table(q=(100.0, 100.0)):
    return PolicyTable(RatioBins((1.2,)), (Action(2, q[0], 1.0), Action(2, q[1])))


PAYOUTS = ActionGrids((2,), (96.0, 100.0, 104.0), (1.0, None), call_floor=1.2)


@pytest.fixture(scope="module")
def ctx(small_world):
    return small_world.context()


@pytest.fixture(scope="module")
def tuned(ctx):
    return tune(two_bin_table(), PAYOUTS, ctx, OBJECTIVE, max_sweeps=10)


def test_tune_matches_exhaustive_search(ctx, tuned):
    best, best_h = exhaustive_search(two_bin_table(), PAYOUTS, ctx, OBJECTIVE, columns=("payout_level",))
    assert tuned.table == best
    assert tuned.h == best_h
    assert tuned.one_optimal


def test_one_optimal_is_not_always_global(ctx):
    # with calls weighted heavily the descent stops at a table that no single
    # cell change improves, though a two-cell change would
    spec = ObjectiveSpec(MetricSpec(-0.05, 0.05, 3000.0), OBJECTIVE.q_bar, OBJECTIVE.delta_q)
    res = tune(two_bin_table(), PAYOUTS, ctx, spec, max_sweeps=10)
    best, best_h = exhaustive_search(two_bin_table(), PAYOUTS, ctx, spec, columns=("payout_level",))
    assert res.one_optimal and verify_one_optimality(res.table, PAYOUTS, ctx, spec)[0]
    assert best_h <= res.h
    assert res.table.key() == ((2, 100.0, 1.0), (2, 104.0, None))
    assert best.key() == ((2, 96.0, 1.0), (2, 100.0, None))


def test_single_cell_picks_the_best_payout(ctx):
    start = PolicyTable.constant(RatioBins(()), Action(2, 100.0, 1.0))
    grids = ActionGrids((2,), (96.0, 100.0, 104.0), (1.0,))
    res = tune(start, grids, ctx, OBJECTIVE)
    values = {q: Evaluator(ctx, OBJECTIVE)(start.with_cell(0, "payout_level", q)) for q in grids.payout_levels}
    assert res.table.rows[0].payout_level == min(values, key=values.get)
    assert res.h == min(values.values())


def test_tuned_table_is_a_fixed_point(ctx, tuned):
    again = tune(tuned.table, PAYOUTS, ctx, OBJECTIVE, max_sweeps=10)
    assert again.accepted == [] and again.sweeps == 1
    assert again.table == tuned.table and again.h == tuned.h


def test_accepted_moves_strictly_descend(ctx):
    grids = ActionGrids((0, 1, 2), payout_grid((90, 110), 5.0), (None, 0.8, 1.0, 1.2), call_floor=0.8)
    start = PolicyTable(RatioBins((0.8, 1.2, 1.6)), (Action(0, 100.0, 1.0), Action(0, 100.0), Action(0, 100.0),
                                                     Action(0, 100.0)))
    res = tune(start, grids, ctx, OBJECTIVE, max_sweeps=6)
    hs = [objective(evaluate_policy(start, ctx)[0], OBJECTIVE)] + [e.h for e in res.accepted]
    assert all(b < a - 1e-12 for a, b in zip(hs, hs[1:]))
    cells = 3 * len(start.rows)
    assert res.evaluations <= 1 + res.sweeps * cells * max(3, len(grids.payout_levels), 4)
    # common random numbers: the final table re-scores to the logged value bit for bit
    assert objective(evaluate_policy(res.table, ctx)[0], OBJECTIVE) == res.h
    if res.one_optimal:
        assert verify_one_optimality(res.table, grids, ctx, OBJECTIVE) == (True, None)


def test_perturbed_cell_is_reported(ctx, tuned):
    row = 1
    worse = [q for q in PAYOUTS.payout_levels if q != tuned.table.rows[row].payout_level]
    ev = Evaluator(ctx, OBJECTIVE)
    q = max(worse, key=lambda q: ev(tuned.table.with_cell(row, "payout_level", q)))
    ok, worst = verify_one_optimality(tuned.table.with_cell(row, "payout_level", q), PAYOUTS, ctx, OBJECTIVE)
    assert not ok
    assert (worst.row, worst.column) == (row, "payout_level")
    assert worst.improvement > 0


def test_singleton_grids_are_vacuously_optimal(ctx):
    grids_none = ActionGrids((2,), (100.0,), (None,))
    single = PolicyTable.constant(RatioBins(()), Action(2, 100.0))
    assert verify_one_optimality(single, grids_none, ctx, OBJECTIVE) == (True, None)
    res = tune(single, grids_none, ctx, OBJECTIVE)
    assert res.table == single and res.log == [] and res.one_optimal


def test_parallel_candidates_give_the_same_run(ctx, tuned):
    par = tune(two_bin_table(), PAYOUTS, ctx, OBJECTIVE, max_sweeps=10, workers=3)
    assert par.table == tuned.table
    assert [e.to_text() for e in par.log] == [e.to_text() for e in tuned.log]


def test_tune_input_checks(ctx):
    with pytest.raises(ValueError):
        tune(two_bin_table(), PAYOUTS, ctx, OBJECTIVE, max_sweeps=0)
    with pytest.raises(ValueError):
        tune(two_bin_table((101.0, 100.0)), PAYOUTS, ctx, OBJECTIVE)


def test_aborts_beyond_the_allowed_share_fail(ctx):
    bad = EvalContext(ctx.scenarios, ctx.menu, ctx.rules, ctx.config, np.full(2, -1.5))
    with pytest.raises(EvaluationFailure):
        Evaluator(bad, OBJECTIVE)(two_bin_table())
