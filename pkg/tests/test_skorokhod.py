import numpy as np
import pytest

from meanreflect.constraint_map import ConstraintMap, OffsetPath, TimeDomainFamily
from meanreflect.geometry import Ball, Box, Halfspace, Polytope, certify_normal
from meanreflect.grid import TimeGrid
from meanreflect.skorokhod import (
    InitialConditionError,
    ReflectionLedger,
    check_minimality,
    constrained_phi_mean,
    solve_mean_reflection,
    solve_time_dependent,
    stability_gap,
    variation_bound_report,
)

GRID = TimeGrid.uniform(1.0, 100)
HALFLINE = Halfspace([-1.0], 0.0)


def halfline_oracle(y):
    """k_t = sup_{s<=t} (-y_s)^+ for the one-sided map on [0, inf)."""
    return np.maximum.accumulate(np.maximum(-y, 0.0))


def interval_oracle(psi, a):
    """Explicit two-sided Skorokhod map on [0, a] (sup/inf formula), returns x."""
    out = np.empty_like(psi)
    for t in range(psi.size):
        first = min(max(psi[0] - a, 0.0), psi[: t + 1].min())
        second = max(min(psi[s] - a, psi[s: t + 1].min()) for s in range(t + 1))
        out[t] = psi[t] - max(first, second)
    return out


def test_inside_gives_zero_push():
    fam = TimeDomainFamily.static(Ball([0, 0], 2), GRID)
    y = 0.5 * np.stack([np.cos(GRID.times), np.sin(GRID.times)], 1)
    x, led = solve_time_dependent(fam, y)
    assert np.array_equal(x, y)
    assert not led.active.any()


def test_halfline_drift_example():
    fam = TimeDomainFamily.static(HALFLINE, GRID)
    y = -GRID.times
    x, led = solve_time_dependent(fam, y)
    assert np.allclose(x, 0, atol=1e-15)
    assert np.allclose(led.k[:, 0], GRID.times, atol=1e-14)


def test_halfline_matches_sup_formula(rng):
    fam = TimeDomainFamily.static(HALFLINE, GRID)
    for _ in range(20):
        y = np.concatenate([[rng.uniform(0, 0.3)], rng.uniform(0, 0.3) + np.cumsum(
            rng.normal(scale=0.1, size=GRID.steps))])
        _, led = solve_time_dependent(fam, y)
        assert np.allclose(led.k[:, 0], halfline_oracle(y), atol=1e-12)


def test_interval_matches_explicit_formula(rng):
    a = 0.4
    fam = TimeDomainFamily.static(Box([0.0], [a]), TimeGrid.uniform(1.0, 60))
    for _ in range(10):
        y = rng.uniform(0, a) + np.concatenate([[0], np.cumsum(rng.normal(scale=0.15, size=60))])
        x, _ = solve_time_dependent(fam, y)
        assert np.allclose(x[:, 0], interval_oracle(y, a), atol=1e-12)


def test_ball_radial_example():
    fam = TimeDomainFamily.static(Ball([0, 0], 1), GRID)
    y = np.stack([2 * GRID.times, np.zeros(GRID.steps + 1)], 1)
    x, led = solve_time_dependent(fam, y)
    assert np.allclose(x[:, 0], np.minimum(2 * GRID.times, 1), atol=1e-14)
    assert np.allclose(led.k[:, 0], np.minimum(2 * GRID.times, 1) - 2 * GRID.times, atol=1e-14)
    assert np.allclose(led.k[:, 1], 0)


def test_mean_reflection_examples():
    ybar = -GRID.times
    ident = ConstraintMap.identity(1)
    led = solve_mean_reflection(ident, HALFLINE, ybar, GRID)
    _, direct = solve_time_dependent(TimeDomainFamily.static(HALFLINE, GRID), ybar)
    assert np.array_equal(led.k, direct.k)
    assert np.allclose(led.k[:, 0], GRID.times, atol=1e-14)
    scaled = ConstraintMap([[2.0]], OffsetPath.constant([0.0]))
    led2 = solve_mean_reflection(scaled, HALFLINE, ybar, GRID)
    assert np.allclose(led2.k[:, 0], GRID.times, atol=1e-14)


def test_initial_condition_violation():
    fam = TimeDomainFamily.static(HALFLINE, GRID)
    y = 0.5 - GRID.times - 1.0
    with pytest.raises(InitialConditionError):
        solve_time_dependent(fam, y)
    x, led = solve_time_dependent(fam, y, project_initial=True)
    assert led.increments[0, 0] == pytest.approx(0.5)
    assert x[0, 0] == 0.0


def test_minimality_examples():
    zero = ReflectionLedger.zeros(GRID.times, 2)
    assert check_minimality(np.zeros((GRID.steps + 1, 2)), zero, Ball([0, 0], 1)) == 0
    led = solve_mean_reflection(ConstraintMap.identity(1), HALFLINE, -GRID.times, GRID)
    mean = constrained_phi_mean(ConstraintMap.identity(1), GRID, -GRID.times, led)
    probes = np.array([[0.0], [0.5], [2.0]])
    worst = check_minimality(mean, led, HALFLINE, probes)
    assert worst == pytest.approx(0.0, abs=1e-14)
    # -z k_T <= 0 with z=2 at the final node
    inc = led.increments
    assert np.sum((mean - 2.0) * inc) == pytest.approx(-2.0 * led.k[-1, 0])


def test_single_active_step_has_certified_normal():
    box = Box([0, 0], [1, 1])
    grid = TimeGrid.uniform(1.0, 1)
    fam = TimeDomainFamily.static(box, grid)
    _, led = solve_time_dependent(fam, np.array([[0.5, 0.5], [1.4, 0.7]]))
    x1 = np.array([1.0, 0.7])
    eta = led.directions[1]
    assert certify_normal(box, x1, eta)
    mean = np.array([[0.5, 0.5], x1])
    assert check_minimality(mean, led, box, probe_count=64) <= 1e-12


@pytest.mark.parametrize("base", [
    Ball([0, 0], 1), Box([-1, -0.5], [1, 0.5]),
    Polytope([[1, 1], [-1, 0], [0, -1]], [1, 0, 0], [0.25, 0.25])], ids=lambda d: d.kind)
def test_constraint_minimality_activity(base, rng):
    l = np.array([[1.1, 0.3], [-0.2, 0.9]])
    cmap = ConstraintMap(l, OffsetPath.linear([0.0, 0.0], [0.3, -0.2], GRID))
    fam = TimeDomainFamily(base, cmap, GRID)
    tol = 1e-6 if not isinstance(base, Ball) else 1e-8
    for _ in range(5):
        start = cmap.big_phi_inverse(0.0, base.interior_point()) @ np.linalg.inv(l)
        ybar = start + np.concatenate([np.zeros((1, 2)), np.cumsum(
            rng.normal(scale=0.2, size=(GRID.steps, 2)), 0)])
        led = solve_mean_reflection(cmap, base, ybar, GRID)
        phi = constrained_phi_mean(cmap, GRID, ybar, led)
        assert max(base.distance(p) for p in phi) <= tol
        assert check_minimality(phi, led, base) <= 1e-8 * (1 + led.total_variation)
        zbar = cmap.adjoint(ybar + led.k)
        for j in np.flatnonzero(led.active):
            assert abs(fam.domain(j).depth(zbar[j])) <= fam.projector_tol * 10


def test_variation_bound_examples():
    empty = ReflectionLedger.zeros(GRID.times, 1)
    tv, bound = variation_bound_report(empty, np.zeros(GRID.steps + 1))
    assert tv / bound == 0
    led = solve_mean_reflection(ConstraintMap.identity(1), HALFLINE, -GRID.times, GRID)
    tv, bound = variation_bound_report(led, -GRID.times)
    assert (tv, bound) == pytest.approx((1.0, 2.0))
    led = solve_mean_reflection(ConstraintMap.identity(1), HALFLINE, -2 * GRID.times, GRID)
    tv, bound = variation_bound_report(led, -2 * GRID.times)
    assert (tv, bound) == pytest.approx((2.0, 5.0))
    assert tv / bound <= 1


def test_stability_examples():
    fam = TimeDomainFamily.static(Ball([0, 0], 3), GRID)
    y = 0.3 * np.stack([np.sin(GRID.times), GRID.times], 1)
    gap = stability_gap(y, y, fam, fam)
    assert gap.lhs == 0 and gap.rhs == 0
    c = np.array([0.4, -0.2])
    gap = stability_gap(y, y + c, fam, fam)
    assert gap.lhs == 0
    assert 2 * gap.rhs == pytest.approx(2 * c @ c)


def test_stability_halfline_closed_form():
    fam = TimeDomainFamily.static(HALFLINE, GRID)
    t = GRID.times
    gap = stability_gap(-t, -1.5 * t, fam, fam)
    assert gap.lhs == pytest.approx(0.25, abs=1e-12)  # (0.5 T)^2
    # rhs = (0.5t)^2 + sum_j (0.5 t - 0.5 t_j)(-0.5 dt) ... = 0.25 - 0.125 (1 - dt)
    assert gap.rhs == pytest.approx(0.25 - 0.125 * (1 - GRID.mesh), abs=1e-12)
    assert gap.lhs <= 2 * gap.rhs + 1e-8


def test_stability_moving_domains(rng):
    base = Ball([0, 0], 1)
    for _ in range(20):
        v1 = OffsetPath.linear([0, 0], rng.normal(scale=0.5, size=2), GRID)
        v2 = OffsetPath.linear([0, 0], rng.normal(scale=0.5, size=2), GRID)
        f1 = TimeDomainFamily(base, ConstraintMap(np.eye(2), v1), GRID)
        f2 = TimeDomainFamily(base, ConstraintMap(np.eye(2), v2), GRID)
        y = np.concatenate([np.zeros((1, 2)), np.cumsum(rng.normal(scale=0.2, size=(100, 2)), 0)])
        yt = y + np.concatenate([np.zeros((1, 2)), np.cumsum(rng.normal(scale=0.05, size=(100, 2)), 0)])
        gap = stability_gap(y, yt, f1, f2)
        assert gap.lhs <= 2 * gap.rhs + 1e-8


def test_grid_refinement_consistency():
    k_final = []
    for m in (50, 100, 200, 400):
        grid = TimeGrid.uniform(1.0, m)
        y = -grid.times + 0.3 * np.sin(6 * grid.times)
        led = solve_mean_reflection(ConstraintMap.identity(1), HALFLINE, y, grid)
        k_final.append(led.k[-1, 0])
    diffs = np.abs(np.diff(k_final))
    assert np.all(diffs <= 2.0 / np.array([50, 100, 200]))
