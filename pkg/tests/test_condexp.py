import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbdsde.condexp import (
    ConditioningError,
    RegressionBasis,
    RegressionEngine,
    TreeEngine,
    exact_condexp,
    make_engine,
    regress_condexp,
)
from rbdsde.noise import enumerate_tree, make_grid, sample_noise


@pytest.fixture(scope="module")
def gauss():
    return sample_noise(make_grid(1.0, 5), 20_000, seed=4)


def _group_means(nb, i, values):
    """Reference conditional mean: average over paths sharing the known increments."""
    keys = [row.tobytes() for row in nb.known_columns(i)]
    sums, counts = {}, {}
    for k, v in zip(keys, values):
        sums[k] = sums.get(k, 0.0) + v
        counts[k] = counts.get(k, 0) + 1
    return np.array([sums[k] / counts[k] for k in keys])


def test_tree_matches_grouped_average(tree4, rng):
    v = rng.normal(size=tree4.P)
    for i in range(tree4.N + 1):
        assert np.allclose(exact_condexp(tree4, i, v), _group_means(tree4, i, v), rtol=0, atol=1e-13)


def test_degenerate_and_zero_mean_targets(tree2, tree4):
    measurable = np.sin(tree4.known_columns(4) @ np.arange(1, 5))
    assert np.array_equal(exact_condexp(tree4, 4, measurable), measurable)
    assert np.all(exact_condexp(tree4, 0, np.full(tree4.P, 2.5)) == 2.5)
    for i in (0, 1):
        assert np.all(exact_condexp(tree2, i, tree2.dW[:, 1, 0]) == 0.0)


def test_tree_output_is_measurable(tree4, rng):
    v = rng.normal(size=tree4.P)
    for i in range(tree4.N + 1):
        out = exact_condexp(tree4, i, v)
        seen = {}
        for key, val in zip(map(bytes, tree4.known_columns(i)), out):
            assert seen.setdefault(key, val) == val


def test_idempotent_and_restricted_tower(tree4, rng):
    v = rng.normal(size=tree4.P)
    eng = TreeEngine(tree4)
    for i in range(tree4.N + 1):
        once = eng.expect(i, v)
        assert np.max(np.abs(eng.expect(i, once) - once)) <= 1e-13
    # targets built from W alone do nest: E_i E_j u = E_i u for j >= i
    u = np.cos(tree4.W(4)[:, 0]) + tree4.dW[:, 1, 0] * tree4.dW[:, 3, 0]
    for i in range(tree4.N + 1):
        for j in range(i, tree4.N + 1):
            assert np.max(np.abs(eng.expect(i, eng.expect(j, u)) - eng.expect(i, u))) <= 1e-13


def test_tower_fails_for_backward_targets(tree2):
    # dB_0 is known at 0 but forgotten at 1, so E_0 E_1 dB_0 = 0 while E_0 dB_0 = dB_0
    eng = TreeEngine(tree2)
    u = tree2.dB[:, 0, 0]
    assert np.array_equal(eng.expect(0, u), u)
    assert np.all(eng.expect(0, eng.expect(1, u)) == 0.0)


def test_known_factors_pull_out(tree4, rng):
    eng = TreeEngine(tree4)
    v = rng.normal(size=tree4.P)
    for i in range(tree4.N + 1):
        c = np.exp(tree4.known_columns(i).sum(axis=1))
        assert np.max(np.abs(eng.expect(i, c * v) - c * eng.expect(i, v))) <= 1e-12


def test_multi_column_values(tree4, rng):
    v = rng.normal(size=(tree4.P, 3))
    out = exact_condexp(tree4, 2, v)
    for c in range(3):
        assert np.array_equal(out[:, c], exact_condexp(tree4, 2, v[:, c]))


def test_tree_engine_rejects_gaussian(gauss):
    with pytest.raises(ValueError):
        TreeEngine(gauss)
    with pytest.raises(IndexError):
        TreeEngine(enumerate_tree(make_grid(1.0, 1))).expect(2, np.zeros(4))


def test_regression_reproduces_span(gauss):
    for i in range(1, gauss.N + 1):
        w = gauss.W(i)[:, 0]
        v = 3.0 * w - 1.25
        fit = regress_condexp(gauss, i, v)
        assert np.max(np.abs(fit - v)) <= 1e-10 * np.max(np.abs(v))
        fit2 = regress_condexp(gauss, i, w**2)
        assert np.max(np.abs(fit2 - w**2)) <= 1e-8


def test_regression_of_unknown_increment_is_small(gauss):
    for i in range(gauss.N):
        fit = regress_condexp(gauss, i, gauss.dW[:, i, 0])
        assert abs(fit.mean()) <= 4 / np.sqrt(gauss.P)


def test_regression_is_thread_independent(gauss, rng):
    v = rng.normal(size=gauss.P) + gauss.W(3)[:, 0] ** 3
    basis = RegressionBasis(degree=3, block=1500)
    a = RegressionEngine(gauss, basis, threads=1).expect(3, v)
    b = RegressionEngine(gauss, basis, threads=6).expect(3, v)
    assert a.tobytes() == b.tobytes()


def test_indicator_basis_matches_tree(tree4, rng):
    v = rng.normal(size=(tree4.P, 2))
    reg = RegressionEngine(tree4, RegressionBasis(kind="indicator"))
    tree = TreeEngine(tree4)
    for i in range(tree4.N + 1):
        assert np.max(np.abs(reg.expect(i, v) - tree.expect(i, v))) <= 1e-10


def test_partition_basis_preserves_order(gauss, rng):
    eng = RegressionEngine(gauss, RegressionBasis(kind="partition", bins=6))
    u = rng.normal(size=gauss.P)
    v = u + np.abs(rng.normal(size=gauss.P))
    for i in range(gauss.N + 1):
        assert np.all(eng.expect(i, v) >= eng.expect(i, u) - 1e-12)
    assert eng.n_features(2) <= 36


def test_rank_deficiency_without_ridge():
    # on a tree W_{t_1}^2 = dt on every path, collinear with the intercept
    nb = enumerate_tree(make_grid(1.0, 4))
    with pytest.raises(ConditioningError, match="ridge"):
        RegressionEngine(nb, RegressionBasis(degree=2, ridge=0.0)).expect(1, np.ones(nb.P))
    out = RegressionEngine(nb, RegressionBasis(degree=2)).expect(1, np.ones(nb.P))
    assert np.allclose(out, 1.0, atol=1e-8)


def test_too_few_paths_rejected():
    nb = sample_noise(make_grid(1.0, 2), 40, seed=0)
    with pytest.raises(ValueError, match="fewer than"):
        regress_condexp(nb, 1, np.zeros(40))


def test_engine_selection(tree2, gauss):
    assert make_engine(tree2).name == "tree"
    assert make_engine(gauss).name == "regression"
    assert make_engine(tree2, "regression", RegressionBasis(kind="indicator")).name == "regression"
    with pytest.raises(ValueError):
        make_engine(gauss, "magic")
    with pytest.raises(ValueError):
        RegressionBasis(kind="spline")


coeffs = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(coeffs, coeffs, st.integers(0, 4), st.integers(0, 2**32 - 1))
def test_linearity_tree(a, b, i, seed):
    nb = enumerate_tree(make_grid(1.0, 4))
    r = np.random.default_rng(seed)
    u, v = r.normal(size=(2, nb.P))
    lhs = exact_condexp(nb, i, a * u + b * v)
    rhs = a * exact_condexp(nb, i, u) + b * exact_condexp(nb, i, v)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * (1 + abs(a) + abs(b))


@settings(max_examples=20, deadline=None)
@given(coeffs, coeffs, st.integers(0, 5), st.integers(0, 2**32 - 1))
def test_linearity_regression(a, b, i, seed):
    nb = sample_noise(make_grid(1.0, 5), 2000, seed=1)
    eng = RegressionEngine(nb)
    r = np.random.default_rng(seed)
    u, v = r.normal(size=(2, nb.P))
    lhs = eng.expect(i, a * u + b * v)
    rhs = a * eng.expect(i, u) + b * eng.expect(i, v)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * (1 + abs(a) + abs(b))
