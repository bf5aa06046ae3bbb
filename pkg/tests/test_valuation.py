"""Tests for coalition valuation and the zero-Shapley profit split.

Two independent oracles guard the allocation math:

  * an exact-rational re-evaluation of the clipped-marginal formula
    (Fraction coefficients, itertools subsets), written before the
    library code;
  * for games whose marginals are all nonnegative, the classic
    permutation average, a structurally different algorithm that must
    coincide with the clipped formula there.

Pipeline tests run on a small single-bus hub sized for the synthetic
series so each dispatch solves in milliseconds.
"""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from mesval.config import experiment_config_from_dict
from mesval.data import DayDataset, synth_data
from mesval.hub import HubConfig
from mesval.lstm import TrainingConfig, train_mse
from mesval.valuation import (
    LETTERS,
    ORACLE_FORECASTS,
    Allocation,
    CoalitionLedger,
    ValuationError,
    allocation_rows,
    coalition_label,
    coalition_value,
    evaluate_cost,
    full_valuation,
    ledger_rows,
    normalize_allocation,
    parse_coalition,
    sector_metrics,
    subsets_in_order,
    train_end_to_end,
    zero_shapley,
)

RNG_SEED = 61409


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def oracle_zero_shapley(values, sectors):
    """Clipped-marginal split in exact rational arithmetic."""
    n = len(sectors)
    out = {}
    for player in sectors:
        others = [s for s in sectors if s != player]
        acc = Fraction(0)
        for k in range(len(others) + 1):
            coef = Fraction(1, math.comb(n - 1, k))
            for combo in itertools.combinations(others, k):
                s = frozenset(combo)
                marginal = Fraction(values[s | {player}]) - Fraction(values[s])
                if marginal > 0:
                    acc += coef * marginal
        out[player] = float(acc / n)
    return out


def oracle_permutation_shapley(values, sectors):
    """Classic Shapley value as an average over join orders."""
    acc = {s: Fraction(0) for s in sectors}
    for perm in itertools.permutations(sectors):
        joined = frozenset()
        for player in perm:
            acc[player] += (Fraction(values[joined | {player}])
                            - Fraction(values[joined]))
            joined = joined | {player}
    scale = math.factorial(len(sectors))
    return {s: float(v / scale) for s, v in acc.items()}


def random_map(rng, sectors, monotone=False):
    values = {frozenset(): 0.0}
    for k in range(1, len(sectors) + 1):
        for combo in itertools.combinations(sectors, k):
            values[frozenset(combo)] = float(rng.uniform(-5.0, 10.0))
    if monotone:
        # additive weights plus nonnegative synergies: marginals >= 0
        w = {s: float(rng.uniform(0.0, 4.0)) for s in sectors}
        syn = {frozenset(p): float(rng.uniform(0.0, 1.0))
               for p in itertools.combinations(sectors, 2)}
        for U in values:
            values[U] = sum(w[s] for s in U) + sum(
                v for pair, v in syn.items() if pair <= U)
    return values


# ---------------------------------------------------------------------------
# zero-Shapley against the oracles
# ---------------------------------------------------------------------------

def test_symmetric_additive_game_splits_evenly():
    sectors = ("e", "h", "c")
    values = {frozenset(c): float(k)
              for k in range(4)
              for c in itertools.combinations(sectors, k)}
    got = zero_shapley(values, sectors)
    for s in sectors:
        assert got[s] == pytest.approx(1.0, abs=1e-15)


def test_dummy_sector_gets_zero_raw_value():
    rng = np.random.default_rng(RNG_SEED)
    sectors = ("e", "h", "c")
    values = random_map(rng, ("e", "h"))
    full = {}
    for U, v in values.items():
        full[U] = v
        full[U | {"c"}] = v          # c never changes anything
    got = zero_shapley(full, sectors)
    assert got["c"] == 0.0


def test_matches_rational_oracle_on_random_maps():
    rng = np.random.default_rng(RNG_SEED + 1)
    for sectors in (("e", "h", "c"), ("e", "h", "c", "w")):
        for _ in range(25):
            values = random_map(rng, sectors)
            got = zero_shapley(values, sectors)
            want = oracle_zero_shapley(values, sectors)
            for s in sectors:
                assert got[s] == pytest.approx(want[s], abs=1e-12)


def test_matches_permutation_shapley_on_monotone_games():
    rng = np.random.default_rng(RNG_SEED + 2)
    for sectors in (("e", "h", "c"), ("e", "h", "c", "w")):
        for _ in range(25):
            values = random_map(rng, sectors, monotone=True)
            got = zero_shapley(values, sectors)
            want = oracle_permutation_shapley(values, sectors)
            for s in sectors:
                assert got[s] == pytest.approx(want[s], abs=1e-12)


def test_incomplete_map_rejected():
    sectors = ("e", "h", "c")
    values = {frozenset(): 0.0, frozenset("e"): 1.0}
    with pytest.raises(ValuationError, match="missing"):
        zero_shapley(values, sectors)


def test_nonzero_empty_coalition_rejected():
    rng = np.random.default_rng(RNG_SEED + 3)
    values = random_map(rng, ("e", "h", "c"))
    values[frozenset()] = 0.5
    with pytest.raises(ValuationError, match="empty"):
        zero_shapley(values, ("e", "h", "c"))


def test_sector_count_guard():
    sectors = tuple(f"s{i}" for i in range(21))
    values = {frozenset(): 0.0}
    with pytest.raises(ValuationError, match="20"):
        zero_shapley(values, sectors)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def test_normalization_proportional_splits():
    a = normalize_allocation({"e": 1.0, "h": 1.0, "c": 2.0}, 8.0,
                             ("e", "h", "c"))
    assert a.payouts == pytest.approx((2.0, 2.0, 4.0), abs=1e-12)
    b = normalize_allocation({"e": 5.0, "h": 0.0, "c": 0.0}, 7.0,
                             ("e", "h", "c"))
    assert b.payouts == pytest.approx((7.0, 0.0, 0.0), abs=1e-12)


def test_normalization_degenerate_cases():
    zeros = normalize_allocation({"e": 0.0, "h": 0.0, "c": 0.0}, 0.0,
                                 ("e", "h", "c"))
    assert zeros.payouts == (0.0, 0.0, 0.0)
    # grand coalition that saves nothing (or loses) pays nobody
    losing = normalize_allocation({"e": 1.0, "h": 2.0, "c": 3.0}, -5.0,
                                  ("e", "h", "c"))
    assert losing.payouts == (0.0, 0.0, 0.0)


def test_normalization_rejects_negative_raw():
    with pytest.raises(ValuationError, match="negative"):
        normalize_allocation({"e": -1.0, "h": 2.0, "c": 3.0}, 4.0,
                             ("e", "h", "c"))


def test_budget_balance_on_random_maps():
    rng = np.random.default_rng(RNG_SEED + 4)
    for _ in range(50):
        values = random_map(rng, LETTERS, monotone=True)
        v_n = zero_shapley(values, LETTERS)
        total = values[frozenset(LETTERS)]
        alloc = normalize_allocation(v_n, total, LETTERS)
        assert all(p >= 0.0 for p in alloc.payouts)
        if sum(v_n.values()) > 0.0 and total > 0.0:
            assert sum(alloc.payouts) == pytest.approx(total, abs=1e-9)


# ---------------------------------------------------------------------------
# published cost table
# ---------------------------------------------------------------------------

PUBLISHED_COSTS = {
    "ehc": 31294.04, "eh": 31291.83, "ec": 31311.15, "hc": 31403.95,
    "e": 31412.30, "h": 31314.79, "c": 31410.94, "none": 31418.71,
}
PUBLISHED_VALUES = {
    "ehc": 124.66, "eh": 126.87, "ec": 107.56, "hc": 14.76,
    "e": 6.40, "h": 103.92, "c": 7.77, "none": 0.0,
}


def published_ledger():
    costs = {parse_coalition(label): c for label, c in
             PUBLISHED_COSTS.items()}
    return CoalitionLedger(sectors=LETTERS, costs=costs)


def test_published_cost_row_reproduces_value_row():
    ledger = published_ledger()
    for label, want in PUBLISHED_VALUES.items():
        got = coalition_value(ledger, parse_coalition(label))
        assert got == pytest.approx(want, abs=0.01 + 1e-9), label
    assert coalition_value(ledger, frozenset()) == 0.0


def test_published_value_row_allocation_follows_the_formulas():
    # inputs are the published values themselves; the split must match the
    # rational oracle, and the normalized payouts must exhaust the total
    values = {parse_coalition(k): v for k, v in PUBLISHED_VALUES.items()}
    raw = zero_shapley(values, LETTERS)
    want = oracle_zero_shapley(values, LETTERS)
    for s in LETTERS:
        assert raw[s] == pytest.approx(want[s], abs=1e-12)
    alloc = normalize_allocation(raw, values[frozenset(LETTERS)], LETTERS)
    assert sum(alloc.payouts) == pytest.approx(124.66, abs=1e-9)
    assert all(p >= 0.0 for p in alloc.payouts)
    np.testing.assert_allclose(alloc.payouts, PUBLISHED_ALLOCATION_CHECK,
                               atol=1e-9)


PUBLISHED_ALLOCATION_CHECK = (
    # frozen from the oracle's first audited run on the published values
    # (raw clipped splits 17767/300, 739/12, 389/20 scaled to the total);
    # the published table prints a different split for the same inputs,
    # which does not satisfy its own stated formulas
    52.637645744706134, 54.735211635810536, 17.28714261948333,
)


def test_ledger_requires_all_coalitions():
    costs = {parse_coalition(label): c for label, c in
             PUBLISHED_COSTS.items() if label != "eh"}
    with pytest.raises(ValuationError, match="missing"):
        CoalitionLedger(sectors=LETTERS, costs=costs)


def test_coalition_labels_roundtrip():
    assert coalition_label(frozenset()) == "none"
    assert coalition_label(frozenset(["h", "e"])) == "eh"
    assert parse_coalition("ehc") == frozenset(["e", "h", "c"])
    assert parse_coalition("none") == frozenset()
    assert parse_coalition("") == frozenset()
    with pytest.raises(ValuationError, match="label"):
        parse_coalition("ex")
    order = [coalition_label(u) for u in subsets_in_order(LETTERS)]
    assert order == ["none", "e", "h", "c", "eh", "ec", "hc", "ehc"]


# ---------------------------------------------------------------------------
# pipeline fixtures
# ---------------------------------------------------------------------------

def flat_hub(elec_da=0.5, elec_id=0.75, gas_da=0.4, gas_id=0.6,
             refund=0.7, temp=4000.0):
    """Single-bus hub sized for the synthetic series; no storage."""
    return HubConfig.from_dict({
        "schema_version": 1,
        "name": "val-toy",
        "inputs": [
            {"name": "grid", "carrier": "electricity",
             "capacity_kw": 8000.0, "reserve_up_kw": 2500.0,
             "reserve_down_kw": 2500.0},
            {"name": "gas_supply", "carrier": "gas",
             "capacity_kw": 8000.0, "reserve_up_kw": 3000.0,
             "reserve_down_kw": 3000.0},
        ],
        "outputs": [{"name": "elec_load", "sector": "electricity"},
                    {"name": "heat_load", "sector": "heat"},
                    {"name": "cool_load", "sector": "cooling"}],
        "nodes": [{"name": "elec_bus", "carrier": "electricity"}],
        "converters": [
            {"name": "boiler", "kind": "gas_boiler", "capacity_kw": 4000.0,
             "efficiency_curve": [[0.0, 0.9], [1.0, 0.9]]},
            {"name": "fridge", "kind": "electric_refrigerator",
             "capacity_kw": 2000.0,
             "efficiency_curve": [[0.0, 1.4], [1.0, 1.4]]},
        ],
        "storages": [],
        "branches": [
            {"name": "gas_feed", "from": "gas_supply", "to": "boiler",
             "carrier": "gas"},
            {"name": "heat_out", "from": "boiler", "to": "heat_load",
             "carrier": "heat"},
            {"name": "grid_draw", "from": "grid", "to": "elec_bus",
             "carrier": "electricity"},
            {"name": "elec_out", "from": "elec_bus", "to": "elec_load",
             "carrier": "electricity"},
            {"name": "fridge_feed", "from": "elec_bus", "to": "fridge",
             "carrier": "electricity"},
            {"name": "cool_out", "from": "fridge", "to": "cool_load",
             "carrier": "cooling"},
        ],
        "prices": {
            "refund_fraction": refund,
            "electricity": {"day_ahead": elec_da, "intra_day": elec_id},
            "gas": {"day_ahead": gas_da, "intra_day": gas_id},
        },
        "temporary_purchase_kw": temp,
    })


def tiny_training(**over):
    base = dict(hidden_size=4, mse_epochs=6, e2e_epochs=1, e2e_lr=1e-7,
                window=24)
    base.update(over)
    return TrainingConfig(**base)


def small_dataset(days=6, seed=12):
    return DayDataset.from_series(synth_data(seed=seed, days=days))


def base_models(dataset, training, seed=5):
    models = {}
    for i, sector in enumerate(("electricity", "heat", "cooling")):
        model, _ = train_mse(dataset.loads[:, i, :], dataset.dows, training,
                             seed=seed + i)
        models[sector] = model
    return models


# ---------------------------------------------------------------------------
# cost evaluation
# ---------------------------------------------------------------------------

def test_evaluate_cost_empty_and_single_day_is_zero():
    hub = flat_hub()
    one_day = small_dataset(days=1)
    assert evaluate_cost(ORACLE_FORECASTS, one_day, hub, "joint") == 0.0


def test_oracle_forecasts_match_joint_optimum_in_both_modes():
    # with forecasts identical to actuals the commitment already serves
    # the day, so recourse is free and both protocols coincide
    hub = flat_hub()
    ds = small_dataset(days=3)
    joint = evaluate_cost(ORACLE_FORECASTS, ds, hub, "joint")
    seq = evaluate_cost(ORACLE_FORECASTS, ds, hub, "sequential")
    assert joint > 0.0
    assert seq == pytest.approx(joint, abs=1e-9)


def test_trained_models_never_beat_the_oracle():
    hub = flat_hub()
    ds = small_dataset(days=4)
    models = base_models(ds, tiny_training())
    ideal = evaluate_cost(ORACLE_FORECASTS, ds, hub, "joint")
    for mode in ("joint", "sequential"):
        cost = evaluate_cost(models, ds, hub, mode)
        assert cost >= ideal - 1e-9


def test_evaluate_cost_deterministic():
    hub = flat_hub()
    ds = small_dataset(days=3)
    models = base_models(ds, tiny_training())
    a = evaluate_cost(models, ds, hub, "sequential")
    b = evaluate_cost(models, ds, hub, "sequential")
    assert a == b


def test_evaluate_cost_dispatch_hook_sees_every_solve():
    hub = flat_hub()
    ds = small_dataset(days=3)
    seen = []
    evaluate_cost(ORACLE_FORECASTS, ds, hub, "sequential",
                  on_dispatch=lambda day, prob, res: seen.append(
                      (day, prob.stage)))
    assert seen == [(1, "day_ahead"), (1, "intra_day"),
                    (2, "day_ahead"), (2, "intra_day")]


def test_infeasible_day_names_day_and_stage():
    # no temporary purchase, so actuals far beyond the reserve band make
    # the recourse stage infeasible on the altered day only
    hub = flat_hub(temp=0.0)
    ds = small_dataset(days=3)
    models = base_models(ds, tiny_training())
    loads = ds.loads.copy()
    loads[2, 0, :] += 4000.0
    broken = DayDataset(loads=loads, dows=ds.dows)
    with pytest.raises(ValuationError, match="day 2.*intra-day"):
        evaluate_cost(models, broken, hub, "sequential")
    with pytest.raises(ValuationError, match="day 2.*joint"):
        evaluate_cost(models, broken, hub, "joint")


# ---------------------------------------------------------------------------
# end-to-end training
# ---------------------------------------------------------------------------

def test_empty_coalition_and_zero_epochs_are_identity():
    hub = flat_hub()
    ds = small_dataset(days=4)
    training = tiny_training()
    models = base_models(ds, training)
    same = train_end_to_end(frozenset(), models, ds, hub, training,
                            mode="sequential")
    assert same is models or all(
        same[s] is models[s] for s in models)
    frozen = train_end_to_end(parse_coalition("ehc"), models, ds, hub,
                              tiny_training(e2e_epochs=0),
                              mode="sequential")
    assert all(frozen[s] is models[s] for s in models)
    c_base = evaluate_cost(models, ds, hub, "sequential")
    c_same = evaluate_cost(same, ds, hub, "sequential")
    assert c_base == c_same


def test_training_updates_only_coalition_members():
    hub = flat_hub()
    ds = small_dataset(days=4)
    training = tiny_training(e2e_lr=1e-5)
    models = base_models(ds, training)
    # snapshot="last" keeps the trained weights even if the epoch did not
    # help, which is what lets this test pin the update mechanics
    out = train_end_to_end(parse_coalition("h"), models, ds, hub, training,
                           mode="joint", snapshot="last")
    heat_moved = any(
        not np.array_equal(getattr(out["heat"].params, n),
                           getattr(models["heat"].params, n))
        for n in type(models["heat"].params).field_names())
    assert heat_moved
    for untouched in ("electricity", "cooling"):
        assert out[untouched] is models[untouched]


def test_training_snapshot_never_worse_on_train_split():
    hub = flat_hub()
    ds = small_dataset(days=5)
    # deliberately destructive learning rate: the snapshot rule must still
    # return something no worse than the starting point
    training = tiny_training(e2e_epochs=2, e2e_lr=1.0)
    models = base_models(ds, training)
    base_cost = evaluate_cost(models, ds, hub, "sequential")
    out = train_end_to_end(parse_coalition("ehc"), models, ds, hub, training,
                           mode="sequential")
    after = evaluate_cost(out, ds, hub, "sequential")
    assert after <= base_cost + 1e-9


# ---------------------------------------------------------------------------
# full valuation
# ---------------------------------------------------------------------------

def test_full_valuation_fills_ledger_and_balances_budget():
    config = experiment_config_from_dict({
        "seed": 21, "train_days": 4, "test_days": 2,
        "training": {"hidden_size": 4, "mse_epochs": 6, "e2e_epochs": 1,
                     "e2e_lr": 1e-7},
    })
    ds = small_dataset(days=6, seed=31)
    report = full_valuation(ds, config, hub=flat_hub())
    ledger = report.ledger
    assert len(ledger.costs) == 8
    assert coalition_value(ledger, frozenset()) == 0.0
    v_total = coalition_value(ledger, frozenset(LETTERS))
    if sum(report.allocation.raw) > 0.0 and v_total > 0.0:
        assert sum(report.allocation.payouts) == pytest.approx(
            v_total, abs=1e-9)
    assert all(p >= 0.0 for p in report.allocation.payouts)
    rows = ledger_rows(ledger)
    assert [r[0] for r in rows] == ["none", "e", "h", "c", "eh", "ec",
                                    "hc", "ehc"]
    assert rows[0][1] == pytest.approx(ledger.costs[frozenset()], abs=0)
    arows = allocation_rows(report.allocation)
    assert [r[0] for r in arows] == list(LETTERS)


def test_price_free_hub_values_nothing():
    hub = flat_hub(elec_da=0.0, elec_id=0.0, gas_da=0.0, gas_id=0.0)
    config = experiment_config_from_dict({
        "seed": 23, "train_days": 3, "test_days": 2,
        "training": {"hidden_size": 3, "mse_epochs": 4, "e2e_epochs": 1,
                     "e2e_lr": 1e-7},
    })
    ds = small_dataset(days=5, seed=33)
    report = full_valuation(ds, config, hub=hub)
    for U in subsets_in_order(LETTERS):
        assert coalition_value(report.ledger, U) == pytest.approx(0.0,
                                                                  abs=1e-9)
    assert report.allocation.payouts == (0.0, 0.0, 0.0)


def test_sector_metrics_shapes_and_perfect_forecast():
    ds = small_dataset(days=4)
    models = base_models(ds, tiny_training())
    scored = sector_metrics(models, ds)
    assert set(scored) == {"electricity", "heat", "cooling"}
    for mae, rmse, mape in scored.values():
        assert mae > 0.0 and rmse >= mae and mape > 0.0
    perfect = sector_metrics(ORACLE_FORECASTS, ds)
    for mae, rmse, mape in perfect.values():
        assert mae == 0.0 and rmse == 0.0 and mape == 0.0
