import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_pension.errors import DivisionByZero, PayoutOutOfRange, SchemaError
from adaptive_pension.market import PortfolioSpec
from adaptive_pension.policy import (
    Action,
    Observation,
    PolicyTable,
    RatioBins,
    breach_threshold,
    example_table,
    external_cash,
    extended_ratio,
    extended_ratio_array,
    format_table,
    lookup_actions,
    parse_table,
    read_table,
    write_table,
)
from adaptive_pension.population import LiabilityProjection


def portfolio(w=(1.0,), mean=0.0):
    w = np.asarray(w, float)
    return PortfolioSpec(0, 1.0, w, 0.0, mean)


def obs(v, next_total, fee=0.0, mean=(0.0,)):
    # discounting only offset 0 makes the shifted total exactly ``next_total``
    proj = LiabilityProjection(2025, np.array([0.0, next_total]), np.array([1.0, 0.0]))
    return Observation(v, 0.0, proj, np.asarray(mean, float), fee)


# -- ratio ----------------------------------------------------------------------


def test_ratio_cases():
    assert extended_ratio(160, 100) == 1.6
    assert extended_ratio(5, -3) == math.inf
    assert extended_ratio(5, 0) == math.inf
    assert extended_ratio(-1, 100) == 0.0
    assert extended_ratio(0, 100) == 0.0
    assert extended_ratio(-1, -1) == 0.0


@given(st.floats(-1e9, 1e9), st.floats(-1e9, 1e9))
def test_array_ratio_agrees_with_scalar(v, L):
    assert extended_ratio_array(np.array([v]), np.array([L]))[0] == extended_ratio(v, L)


# -- lookup -------------------------------------------------------------------


def test_example_table_lookups():
    table, menu = example_table()
    vols = {p.id: p.realized_vol for p in menu}
    top = lookup_actions(table, 2.5)
    assert (vols[top.portfolio_id], top.payout_level, top.target_ratio) == (0.04437, 110.0, None)
    bottom = lookup_actions(table, 0.5)
    assert (vols[bottom.portfolio_id], bottom.payout_level, bottom.target_ratio) == (0.04437, 95.0, 1.0)
    assert lookup_actions(table, math.inf) == table.rows[-1]
    assert lookup_actions(table, 0.0) == table.rows[0]


def test_edges_belong_to_the_upper_bin():
    table, _ = example_table()
    for i, e in enumerate(table.bins.edges):
        assert lookup_actions(table, e) == table.rows[i + 1]
        assert lookup_actions(table, math.nextafter(e, 0)) == table.rows[i]


def test_example_table_cash_rows():
    table, _ = example_table()
    assert [r.target_ratio for r in table.rows[:2]] == [1.0, 1.2]
    assert all(r.target_ratio is None for r in table.rows[2:])
    assert breach_threshold(table) == 1.0


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=8, unique=True),
       st.one_of(st.floats(0, 1e6), st.just(math.inf)))
def test_every_ratio_maps_to_exactly_one_bin(edges, rho):
    bins = RatioBins(tuple(sorted(edges)))
    i = int(bins.index(rho))
    lo, hi = bins.bounds(i)
    assert lo <= rho < hi or (rho == math.inf and hi == math.inf)


def test_lookup_keeps_payouts_in_bounds():
    table, _ = example_table()
    table.check_payouts((90, 110))
    for rho in np.linspace(0, 3, 301):
        assert 90 <= lookup_actions(table, rho).payout_level <= 110
    with pytest.raises(PayoutOutOfRange):
        table.check_payouts((95, 105))


def test_bad_tables_rejected():
    with pytest.raises(ValueError):
        RatioBins((1.0, 0.5))
    with pytest.raises(ValueError):
        PolicyTable(RatioBins((1.0,)), (Action(0, 100.0),))
    with pytest.raises(ValueError):
        PolicyTable.constant(RatioBins((1.0,)), Action(0, 100.0, -0.5))


# -- external cash ---------------------------------------------------------------


def test_external_cash_examples():
    assert external_cash(obs(100, 100), portfolio(), 0.0, 1.5) == pytest.approx(50.0)
    assert external_cash(obs(200, 100), portfolio(), 0.0, 1.5) == 0.0
    assert external_cash(obs(10, 100), portfolio(), 0.0, None) == 0.0
    # the current year's cashflow counts toward the target
    assert external_cash(obs(100, 100), portfolio(), 20.0, 1.5) == pytest.approx(30.0)


def test_external_cash_nonpositive_growth():
    with pytest.raises(DivisionByZero):
        external_cash(obs(100, 100, mean=(-1.0,)), portfolio(), 0.0, 1.0)


@settings(max_examples=200)
@given(st.floats(-1e6, 1e7), st.floats(1.0, 1e7), st.floats(-1e5, 1e5), st.floats(0.0, 3.0),
       st.floats(0.0, 0.05), st.floats(-0.05, 0.15))
def test_cash_hits_the_target_when_expectations_hold(v, L_next, ell, target, fee, mean):
    o = obs(v, L_next, fee=fee, mean=(mean,))
    e = external_cash(o, portfolio(), ell, target)
    assert e >= 0
    v_next = (1 + mean) * (v + ell + e) * (1 - fee)
    if e > 0:
        assert v_next / L_next == pytest.approx(target, rel=1e-9, abs=1e-12)
    else:
        assert v_next / L_next >= target * (1 - 1e-12) - 1e-12


# -- text format -------------------------------------------------------------------


def test_example_table_round_trip(tmp_path):
    table, menu = example_table()
    text = format_table(table, menu)
    assert "4.437%" in text and "7.891%" in text
    assert parse_table(text) == table
    write_table(tmp_path / "t.txt", table, menu)
    assert read_table(tmp_path / "t.txt") == table


@st.composite
def tables(draw):
    edges = sorted(draw(st.lists(st.floats(0.001, 50, allow_subnormal=False), min_size=0, max_size=6, unique=True)))
    rows = draw(st.lists(st.builds(Action, st.integers(0, 20), st.floats(50, 150),
                                   st.one_of(st.none(), st.floats(0, 5))),
                         min_size=len(edges) + 1, max_size=len(edges) + 1))
    return PolicyTable(RatioBins(tuple(edges)), tuple(rows))


@given(tables())
def test_random_tables_round_trip_exactly(table):
    back = parse_table(format_table(table))
    assert back == table
    assert back.key() == table.key()


def test_schema_line_required():
    with pytest.raises(SchemaError):
        parse_table("ratio_low\tratio_high\n")
