import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meanreflect import benchmarks
from meanreflect.config import build_system, parse_config
from meanreflect.control import (
    ActionSet,
    CostSpec,
    GridMismatchError,
    RelaxedControl,
    StrictControl,
    brute_force_optimal,
    chatter,
    chattering_convergence,
    cost_from_config,
    evaluate_cost,
    relaxed_grid_search,
    slot_counts,
)

ACTIONS = ActionSet([[-1.0], [1.0]])
ZERO_COST = CostSpec({"name": "zero"}, {"name": "zero"}, {"name": "zero"})


def two_action(steps=10):
    return build_system(parse_config(benchmarks.two_action_drift(steps)))


def test_chatter_examples():
    point = RelaxedControl.constant(ACTIONS, [1.0, 0.0], 3)
    for n in (1, 4, 9):
        assert np.all(chatter(point, n).indices == 0)
    half = RelaxedControl.constant(ACTIONS, [0.5, 0.5], 2)
    assert list(chatter(half, 2).indices) == [0, 1, 0, 1]
    three = ActionSet([[0.0], [1.0]])
    third = RelaxedControl.constant(three, [1 / 3, 2 / 3], 1)
    assert np.bincount(chatter(third, 3).indices, minlength=2).tolist() == [1, 2]


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=5), st.integers(1, 50))
def test_chatter_occupation_within_one_slot(raw, n):
    w = np.array(raw) / np.sum(raw)
    counts = slot_counts(w, n)
    assert counts.sum() == n
    assert np.all(np.abs(counts / n - w) <= 1 / n + 1e-12)
    acts = ActionSet(np.arange(len(w), dtype=float))
    strict = chatter(RelaxedControl(acts, w[None, :] / w.sum()), n)
    assert np.array_equal(np.bincount(strict.indices, minlength=len(w)), counts)


def test_largest_remainder_ties_by_index():
    assert slot_counts([0.5, 0.5], 3).tolist() == [2, 1]
    assert slot_counts([0.25, 0.25, 0.5], 2).tolist() == [1, 0, 1]


def test_zero_cost_is_zero():
    spec = two_action()
    q = RelaxedControl.constant(ACTIONS, [0.5, 0.5], spec.grid.steps)
    est = evaluate_cost(spec, ZERO_COST, q, 50, [0, 1])
    assert est.mean == 0 and est.stderr == 0


def test_running_cost_of_relaxed_square():
    spec = two_action()
    cost = CostSpec({"name": "action_square"}, {"name": "zero"}, {"name": "zero"})
    q = RelaxedControl.constant(ACTIONS, [0.5, 0.5], spec.grid.steps)
    est = evaluate_cost(spec, cost, q, 50, [0, 1, 2])
    assert est.mean == pytest.approx(1.0, abs=1e-14)


def test_halfline_reflection_cost_is_variation():
    spec = build_system(parse_config(benchmarks.halfline(steps=500)))
    cost = CostSpec({"name": "zero"}, {"name": "constant", "value": 1.0}, {"name": "zero"})
    ctrl = StrictControl(ACTIONS, np.zeros(spec.grid.steps, dtype=int))
    est = evaluate_cost(spec, cost, ctrl, 2000, [0, 1, 2, 3])
    assert est.mean == pytest.approx(1.0, abs=0.08)


def test_grid_mismatch():
    spec = two_action(10)
    with pytest.raises(GridMismatchError):
        evaluate_cost(spec, ZERO_COST, RelaxedControl.constant(ACTIONS, [0.5, 0.5], 7), 10, [0])


def test_strict_relaxed_gives_zero_gap():
    spec = two_action(5)
    point = RelaxedControl.constant(ACTIONS, [0.0, 1.0], 5)
    cost = cost_from_config(benchmarks.two_action_drift()["cost"])
    rows = chattering_convergence(spec, cost, point, [2, 4], 100, [0, 1])
    assert all(r.gap == 0 for r in rows)


def test_chattering_gap_decreases():
    spec = two_action(10)
    cost = cost_from_config(benchmarks.two_action_drift()["cost"])
    q = RelaxedControl.constant(ACTIONS, [0.5, 0.5], 10)
    rows = chattering_convergence(spec, cost, q, [2, 8, 32], 200, range(4))
    gaps = [r.gap for r in rows]
    assert gaps[0] > gaps[1] > gaps[2]
    slope = np.polyfit(np.log([2, 8, 32]), np.log(gaps), 1)[0]
    print(f"chattering log-log slope {slope:.2f}")


def test_brute_force_finds_best_constant_action():
    spec = two_action(4)
    cost = CostSpec({"name": "zero"}, {"name": "zero"}, {"name": "linear", "vector": [1.0]})
    best, est, table = brute_force_optimal(spec, cost, ACTIONS, 2, 50, [0])
    assert len(table) == 4
    assert list(best.indices) == [0, 0, 0, 0]
    assert est.mean == min(j for _, j in table)
    with pytest.raises(ValueError):
        brute_force_optimal(spec, cost, ActionSet(np.arange(5.0)), 6, 10, [0])


def test_relaxed_search_prefers_mixing():
    spec = two_action(4)
    cost = CostSpec({"name": "zero"}, {"name": "constant", "value": 1.0}, {"name": "square"})
    ctrl, est, table = relaxed_grid_search(spec, cost, ACTIONS, 4, 100, [0, 1])
    assert len(table) == 5
    assert 0 < ctrl.probs[0, 0] < 1


def test_invalid_controls_and_costs():
    with pytest.raises(ValueError):
        RelaxedControl(ACTIONS, [[0.7, 0.7]])
    with pytest.raises(ValueError):
        StrictControl(ACTIONS, [0, 2])
    with pytest.raises(ValueError):
        cost_from_config({"running": {"name": "entropy"}})
    with pytest.raises(ValueError):
        chatter(RelaxedControl.constant(ACTIONS, [0.5, 0.5], 2), 0)
