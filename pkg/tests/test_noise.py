import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbdsde.noise import (
    CapacityError,
    counter_normals,
    enumerate_tree,
    is_known,
    make_grid,
    sample_noise,
    tree_signs,
)


def test_grid_nodes_are_exact_multiples():
    g = make_grid(1.0, 4)
    assert g.dt == 0.25
    assert list(g.nodes) == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert list(make_grid(1.0, 1).nodes) == [0.0, 1.0]
    assert make_grid(2.0, 8).t(5) == 1.25
    assert make_grid(0.7, 3).t(3) == 0.7


@pytest.mark.parametrize("T,N", [(0.0, 4), (-1.0, 2), (1.0, 0), (1.0, -3)])
def test_grid_rejects_bad_parameters(T, N):
    with pytest.raises(ValueError):
        make_grid(T, N)


def test_sampling_is_deterministic_and_thread_independent():
    g = make_grid(1.0, 5)
    a = sample_noise(g, 3000, d=2, l=1, seed=9, chunk=257)
    b = sample_noise(g, 3000, d=2, l=1, seed=9, threads=4, chunk=1000)
    assert a.dW.tobytes() == b.dW.tobytes()
    assert a.dB.tobytes() == b.dB.tobytes()
    c = sample_noise(g, 3000, d=2, l=1, seed=10)
    assert not np.array_equal(a.dW, c.dW)


def test_counter_stream_is_prefix_stable():
    # path p gets the same draws whatever else is sampled alongside it
    full = counter_normals(3, np.arange(100), 4, 2)
    part = counter_normals(3, np.array([17, 63]), 4, 2)
    assert np.array_equal(full[[17, 63]], part)


def test_gaussian_moments_within_clt_bounds():
    g = make_grid(1.0, 4)
    P = 100_000
    nb = sample_noise(g, P, seed=1)
    for i in range(g.N):
        assert abs(nb.dW[:, i, 0].mean()) <= 4 * np.sqrt(g.dt / P)
        assert abs(nb.dB[:, i, 0].var() / g.dt - 1) <= 0.05


def test_disjoint_seeds_look_independent():
    g = make_grid(1.0, 1)
    P = 50_000
    a = sample_noise(g, P, seed=1).dW[:, 0, 0]
    b = sample_noise(g, P, seed=2).dW[:, 0, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(P)


def test_tree_enumeration_small_cases():
    nb = enumerate_tree(make_grid(1.0, 1))
    assert nb.P == 4
    pairs = {(w, b) for w, b in zip(nb.dW[:, 0, 0], nb.dB[:, 0, 0])}
    assert pairs == {(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)}

    g2 = make_grid(1.0, 2)
    nb2 = enumerate_tree(g2)
    assert nb2.P == 16
    assert np.sum(nb2.dW[:, 0, 0] == np.sqrt(g2.dt)) == 8

    nb3 = enumerate_tree(make_grid(1.0, 3))
    assert np.sum(nb3.dW[:, 0, 0] * nb3.dB[:, 2, 0]) == 0.0


def test_tree_patterns_are_unique_with_exact_moments():
    g = make_grid(1.0, 3)
    nb = enumerate_tree(g)
    signs = np.concatenate([nb.dW[:, :, 0], nb.dB[:, :, 0]], axis=1)
    assert len({row.tobytes() for row in signs}) == 4**3
    assert np.all(np.sum(signs > 0, axis=0) == np.sum(signs < 0, axis=0))
    assert np.allclose((signs**2).mean(axis=0), g.dt, rtol=0, atol=1e-15)
    assert np.array_equal(tree_signs(3) * np.sqrt(g.dt), signs)


def test_tree_capacity_guard():
    with pytest.raises(CapacityError):
        enumerate_tree(make_grid(1.0, 13))


@given(st.integers(0, 10), st.integers(0, 9))
def test_information_rule_is_total(i, j):
    # dB_i is known at i, dW_i is not; every increment is classified
    assert is_known(i, "B", i) and not is_known(i, "W", i)
    assert is_known(i, "W", j) == (j < i)
    assert is_known(i, "B", j) == (j >= i)


def test_is_known_rejects_unknown_kind():
    with pytest.raises(ValueError):
        is_known(0, "V", 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(1, 6), st.integers(1, 40))
def test_counter_normals_pure_function(seed, steps, P):
    a = counter_normals(seed, np.arange(P), steps, 2)
    b = counter_normals(seed, np.arange(P)[::-1], steps, 2)[::-1]
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_known_columns_and_positions(tree4):
    i = 2
    k = tree4.known_columns(i)
    assert k.shape == (tree4.P, i + (tree4.N - i))
    assert np.array_equal(tree4.W(i)[:, 0], tree4.dW[:, :i, 0].sum(axis=1))
    assert np.array_equal(tree4.B_future(i)[:, 0], tree4.dB[:, i:, 0].sum(axis=1))
