import itertools

import numpy as np
import pytest

from meanreflect.grid import TimeGrid
from meanreflect.stochastic import (
    CoefficientError,
    CoefficientSet,
    ConstantDiffusion,
    EmpiricalMeasure,
    LevyJumpSpec,
    LinearJump,
    MeanAttraction,
    NoiseDriver,
    PointMarks,
    ShellMarks,
    coefficients_from_config,
    compensated_jump_integral,
    jumps_from_config,
    lipschitz_audit,
    ordered_mean,
    step_of,
    wasserstein2,
    wasserstein2_detailed,
)

GRID = TimeGrid.uniform(1.0, 10)


def test_brownian_increment_moments():
    grid = TimeGrid.uniform(0.5, 1)
    drv = NoiseDriver(3, grid, 2)
    draws = np.array([drv.brownian_increments(i)[0] for i in range(100_000)])
    assert np.all(np.abs(draws.mean(axis=0)) <= 4 * np.sqrt(0.5) / np.sqrt(1e5))
    assert np.allclose(draws.var(axis=0), 0.5, rtol=0.05)


def test_streams_are_deterministic_and_keyed():
    a = NoiseDriver(11, GRID, 1)
    b = NoiseDriver(11, GRID, 1)
    assert np.array_equal(a.brownian_increments(5), b.brownian_increments(5))
    assert not np.array_equal(a.brownian_increments(5), a.brownian_increments(6))
    other = NoiseDriver(11, GRID, 1, namespace=1)
    assert not np.array_equal(a.brownian_increments(5), other.brownian_increments(5))


def test_jump_stream_properties():
    marks = ShellMarks(2, 0.2, 0.5)
    spec = LevyJumpSpec(3.0, marks)
    drv = NoiseDriver(0, GRID, 2)
    assert drv.jump_stream(LevyJumpSpec(0.0, marks), 0)[0].size == 0
    counts, radii = [], []
    for i in range(10_000):
        times, z = drv.jump_stream(spec, i)
        counts.append(times.size)
        radii.extend(np.linalg.norm(z, axis=1))
        assert np.all((times > 0) & (times <= 1.0))
    counts = np.array(counts)
    se = counts.std(ddof=1) / np.sqrt(counts.size)
    assert abs(counts.mean() - 3.0) <= 3 * se
    radii = np.array(radii)
    assert radii.min() >= 0.2 and radii.max() <= 0.5


def test_step_of_half_open():
    idx = step_of(GRID, np.array([1e-9, 0.1, 0.1 + 1e-9, 1.0]))
    assert list(idx) == [0, 0, 1, 9]


def test_shell_quadrature_matches_moments():
    for d in (1, 2, 3):
        marks = ShellMarks(d, 0.2, 0.6)
        nodes, w = marks.quadrature()
        assert w.sum() == pytest.approx(1)
        assert np.allclose(w @ nodes, 0, atol=1e-12)
        # E|z|^2 for the uniform shell law: d/(d+2) (b^{d+2}-a^{d+2})/(b^d-a^d)
        exact = d / (d + 2) * (0.6 ** (d + 2) - 0.2 ** (d + 2)) / (0.6**d - 0.2**d)
        assert w @ np.sum(nodes**2, axis=1) == pytest.approx(exact, rel=1e-10)
        sample = marks.sample(np.random.default_rng(0), 200_000)
        assert np.mean(np.sum(sample**2, axis=1)) == pytest.approx(exact, rel=0.01)


@pytest.mark.parametrize("beta", [
    LinearJump(np.array([0.7, -0.3])),
    LinearJump(np.zeros(2), mark_scale=1.0),
    LinearJump(np.array([0.1, 0.0]), mark_scale=2.0, state_rate=0.5),
], ids=["constant", "mark", "affine"])
def test_compensated_integral_mean_zero(beta):
    spec = LevyJumpSpec(4.0, ShellMarks(2, 0.3, 1.0))
    coeffs = CoefficientSet((), ConstantDiffusion(np.zeros((2, 2))), beta, 2)
    grid = TimeGrid.uniform(1.0, 1)
    drv = NoiseDriver(1, grid, 2)
    rng = np.random.default_rng(2)
    vals = []
    for i in range(10_000):
        x = rng.normal(size=2)
        _, z = drv.jump_stream(spec, i)
        vals.append(compensated_jump_integral(spec, coeffs, x, None, 0.0, 1.0, z))
    vals = np.array(vals)
    se = vals.std(axis=0, ddof=1) / np.sqrt(len(vals))
    assert np.all(np.abs(vals.mean(axis=0)) <= 3 * se)


def test_point_mass_compensation_exact():
    spec = LevyJumpSpec(2.0, PointMarks([[0.5], [-0.25]]))
    beta = LinearJump(np.array([1.0]))
    coeffs = CoefficientSet((), ConstantDiffusion(np.zeros((1, 1))), beta, 1)
    val = compensated_jump_integral(spec, coeffs, [0.0], None, 0.0, 0.1, np.array([[0.5]] * 3))
    assert val[0] == pytest.approx(3 - 0.2)
    zero = CoefficientSet((), ConstantDiffusion(np.zeros((1, 1))), None, 1)
    assert np.all(compensated_jump_integral(spec, zero, [0.0], None, 0.0, 0.1, [[0.5]]) == 0)


def test_compensated_increments_uncorrelated():
    spec = LevyJumpSpec(3.0, ShellMarks(1, 0.2, 0.6))
    coeffs = CoefficientSet((), ConstantDiffusion(np.zeros((1, 1))), LinearJump(np.array([0.2]), 1.0), 1)
    grid = TimeGrid.uniform(1.0, 2)
    drv = NoiseDriver(4, grid, 1)
    pairs = []
    for i in range(10_000):
        times, z = drv.jump_stream(spec, i)
        steps = step_of(grid, times)
        pairs.append([compensated_jump_integral(spec, coeffs, [0.0], None, 0.0, 0.5, z[steps == s])[0]
                      for s in (0, 1)])
    pairs = np.array(pairs)
    corr = np.corrcoef(pairs.T)[0, 1]
    assert abs(corr) <= 3 / np.sqrt(len(pairs))


def test_w2_examples():
    a = EmpiricalMeasure(np.array([[0.0], [2.0]]))
    assert wasserstein2(a, a) == 0
    assert wasserstein2([[0.0]], [[1.0]]) == 1
    assert wasserstein2(a, [[1.0], [3.0]]) == pytest.approx(1)


def test_w2_matches_permutation_oracle(rng):
    for d in (1, 2, 3):
        for _ in range(10):
            a, b = rng.normal(size=(2, 6, d))
            best = min(np.mean(np.sum((a - b[list(p)]) ** 2, axis=1))
                       for p in itertools.permutations(range(6)))
            assert wasserstein2(a, b) == pytest.approx(np.sqrt(best), abs=1e-12)


def test_w2_metric_properties(rng):
    for _ in range(50):
        a, b, c = rng.normal(size=(3, 40, 2))
        ab = wasserstein2(a, b)
        assert ab == wasserstein2(b, a)
        assert wasserstein2(a, c) <= ab + wasserstein2(b, c) + 1e-10


def test_w2_backends(rng):
    big = rng.normal(size=(600, 2))
    val, exact = wasserstein2_detailed(big, big + [0.3, 0.4])
    assert not exact
    assert 0 < val <= 0.5 + 1e-12
    _, exact = wasserstein2_detailed(big[:100], big[100:200])
    assert exact
    with pytest.raises(ValueError):
        wasserstein2(big[:10], big[:11])
    # unequal sizes in d=1 use the quantile coupling
    assert wasserstein2([[0.0], [1.0]], [[0.0], [0.0], [1.0], [1.0]]) == pytest.approx(0)


def test_ordered_mean_is_permutation_invariant(rng):
    pts = rng.normal(size=(1000, 3)) * 10 ** rng.uniform(-5, 5, size=(1000, 1))
    m = ordered_mean(pts)
    for _ in range(5):
        assert np.array_equal(ordered_mean(pts[rng.permutation(1000)]), m)


def test_lipschitz_audit_respects_declared(rng):
    cfg = {"drift": [{"name": "mean_attraction", "rate": 0.7},
                     {"name": "linear", "matrix": [[0.2, 0.1], [0.0, -0.3]]}],
           "diffusion": {"name": "linear", "base": 1.0, "slope": 0.4},
           "jump": {"name": "linear", "mark_scale": 1.0, "state_rate": 0.2}}
    coeffs = coefficients_from_config(cfg, 2)
    marks = ShellMarks(2, 0.2, 0.5)
    gamma = coeffs.lipschitz(intensity=2.0)
    worst = lipschitz_audit(coeffs, 2, rng, pairs=1000, intensity=2.0, marks=marks)
    assert worst <= gamma * (1 + 1e-12)
    assert isinstance(coeffs.drift[0], MeanAttraction)


def test_registry_errors():
    with pytest.raises(CoefficientError):
        coefficients_from_config({"drift": [{"name": "neural"}]}, 1)
    with pytest.raises(CoefficientError):
        coefficients_from_config({"diffusion": {"name": "constant", "matrix": [[1.0, 0.0]]}}, 2)
    with pytest.raises(CoefficientError):
        jumps_from_config({"intensity": 1.0, "marks": {"kind": "cauchy"}}, 1)
    with pytest.raises(CoefficientError):
        LevyJumpSpec(-1.0, ShellMarks(1, 0.1, 0.2))
    with pytest.raises(CoefficientError):
        PointMarks([[0.0]])
