import numpy as np
import pytest

from rbdsde.model import GeneratorSpec, MinorantSpec, ProblemSpec, builtin_problem, zero_diffusion
from rbdsde.noise import enumerate_tree, make_grid, sample_noise
from rbdsde.scheme import (
    MonotonicityError,
    UnsupportedConfiguration,
    diagnostics,
    iterate_maximal,
    iterate_minimal,
    mirror_problem,
    solve_brackets,
)
from rbdsde.solver import residual_check, solve_lipschitz
from rbdsde.verification import tree_bruteforce


def _zero_xi(W):
    return np.zeros(np.shape(W)[0])


def test_step_brackets(tree4):
    br = solve_brackets(builtin_problem("step-generator"), tree4)
    # floor: y' = 0.1|y| + 1 backwards from 0 goes negative; ceiling mirrors it
    assert br.floor.mean_Y0() < 0 < br.ceiling.mean_Y0()
    assert 0.9 < br.ceiling.mean_Y0() < 1.3
    assert br.margin() >= 0


def test_step_bracket_values_match_scalar_recursion(tree4):
    # deterministic problem: ceiling y_i = (y_{i+1} + dt) / (1 - 0.1 dt) while y >= 0
    dt = tree4.grid.dt
    y = 0.0
    for _ in range(tree4.N):
        y = (y + dt) / (1 - 0.1 * dt)
    br = solve_brackets(builtin_problem("step-generator"), tree4)
    assert br.ceiling.Y[:, 0] == pytest.approx(y, abs=1e-12)
    assert br.floor.Y[:, 0] == pytest.approx(-y, abs=1e-12)


def test_nonnegative_floor_when_phi_vanishes(tree4):
    spec = builtin_problem("lipschitz-markov").with_(
        generator=GeneratorSpec(lambda t, y, z: np.zeros(np.shape(y)), phi=lambda t: 0.0, kappa=0.5),
        terminal=lambda W: np.cos(np.asarray(W)[:, 0]) ** 2,
        obstacle=None,
    )
    assert solve_brackets(spec, tree4).floor.Y.min() >= -1e-12


def test_linear_drift_ceiling_tends_to_constant_bound(tree4):
    spec = builtin_problem("linear-drift", kappa=1e-9)
    assert solve_brackets(spec, tree4).ceiling.mean_Y0() == pytest.approx(3.0, abs=1e-8)


def test_step_generator_selects_zero(tree4):
    spec = builtin_problem("step-generator")
    fld, trace = iterate_minimal(spec, tree4)
    assert np.all(trace[0].current.Y == 0.0)
    assert np.max(np.abs(fld.Y[:, 0])) <= 1e-10
    assert trace[-1].delta < 1e-10 and len(trace) <= 5
    d = diagnostics(trace)
    assert all(m >= -1e-12 for m in d.monotone_margins)
    assert all(m >= -1e-12 for m in d.floor_margins + d.ceiling_margins)
    assert residual_check(spec, tree4, fld).projected_max <= 1e-12


def test_lipschitz_problem_iterates_to_direct_solve(tree4):
    spec = builtin_problem("lipschitz-markov")
    direct = solve_lipschitz(spec, tree4)
    fld, trace = iterate_minimal(spec, tree4, tol=1e-24)
    assert np.max(np.abs(fld.Y - direct.Y)) <= 1e-8
    d = diagnostics(trace)
    assert all(m >= -1e-12 for m in d.monotone_margins)
    assert d.rate is not None and d.rate < 1
    assert d.energy_bounded
    deltas = [s.delta for s in trace if s.delta > 0]
    assert all(b < a for a, b in zip(deltas, deltas[1:]))


def test_max_n_zero_returns_brackets(tree4):
    spec = builtin_problem("step-generator")
    fld, trace = iterate_minimal(spec, tree4, max_n=0)
    assert trace == [] and np.array_equal(fld.Y, solve_brackets(spec, tree4).floor.Y)
    free = spec.with_(obstacle=None)
    up, trace = iterate_maximal(free, tree4, max_n=0)
    assert trace == [] and np.allclose(up.Y, solve_brackets(free, tree4).ceiling.Y, rtol=0, atol=1e-14)


def test_maximal_of_left_step(tree4):
    # f = -1{y <= 0}: the only solution from 0 is -(T - t)
    spec = ProblemSpec(
        GeneratorSpec(lambda t, y, z: -(np.asarray(y) <= 0).astype(float), phi=lambda t: 1.0, kappa=0.1, z_free=True),
        zero_diffusion(), _zero_xi, minorant=MinorantSpec(lambda y, z: np.zeros(np.shape(y)), 0.0))
    fld, trace = iterate_maximal(spec, tree4)
    expected = -(tree4.grid.T - tree4.grid.nodes)
    assert np.allclose(fld.Y, expected, rtol=0, atol=1e-14)
    assert residual_check(spec, tree4, fld).projected_max <= 1e-12
    assert all(s.monotone_margin <= 1e-12 for s in trace)  # iterates decrease in the original variables


def test_maximal_equals_direct_for_lipschitz(tree4):
    spec = builtin_problem("lipschitz-markov", obstacle=None)
    fld, _ = iterate_maximal(spec, tree4, tol=1e-24)
    assert np.max(np.abs(fld.Y - solve_lipschitz(spec, tree4).Y)) <= 1e-8


def test_mirror_flips_z_and_rejects_obstacles(tree4):
    spec = builtin_problem("lipschitz-markov", obstacle=None)
    m = mirror_problem(spec)
    y = np.array([0.3, -1.0])
    z = np.array([[0.2], [-0.4]])
    assert np.array_equal(m.generator.f(0.0, y, z), -spec.generator.f(0.0, -y, -z))
    assert np.array_equal(m.diffusion.g(0.0, y, z), -spec.diffusion.g(0.0, -y, -z))
    assert np.array_equal(m.minorant.h(y, z), spec.minorant.h(y, -z))
    back = solve_lipschitz(m, tree4)
    assert np.allclose(-back.Y, tree_bruteforce(spec, tree4).Y, rtol=0, atol=1e-12)
    with pytest.raises(UnsupportedConfiguration):
        mirror_problem(builtin_problem("step-generator"))


def test_missing_minorant_rejected(tree2):
    spec = builtin_problem("step-generator").with_(minorant=None)
    with pytest.raises(ValueError, match="minorant"):
        iterate_minimal(spec, tree2)


def test_monotonicity_breach_is_reported(tree4):
    # a decreasing generator with a zero "minorant" breaks the monotone scheme
    spec = builtin_problem("step-generator").with_(
        generator=GeneratorSpec(lambda t, y, z: -(np.asarray(y) > 0).astype(float), phi=lambda t: 1.0, kappa=0.1,
                                z_free=True),
        terminal=lambda W: np.full(np.shape(W)[0], 0.5))
    with pytest.raises(MonotonicityError) as info:
        iterate_minimal(spec, tree4)
    p, i = info.value.witness
    assert 0 <= p < tree4.P and 0 <= i <= tree4.N
    fld, trace = iterate_minimal(spec, tree4, strict=False, max_n=4)
    assert any(s.witness is not None for s in trace)


def test_single_entry_trace_diagnostics(tree2):
    _, trace = iterate_minimal(builtin_problem("step-generator"), tree2, max_n=1)
    d = diagnostics(trace)
    assert d.monotone_margins == [] and len(d.delta) == 1


def test_gaussian_iteration_sandwich():
    nb = sample_noise(make_grid(1.0, 8), 4000, seed=5)
    spec = builtin_problem("step-generator", xi=0.0)
    fld, trace = iterate_minimal(spec, nb)
    se = 3 * max(s.current.Y.std(axis=0).max() for s in trace) / np.sqrt(nb.P) + 1e-12
    d = diagnostics(trace)
    assert min(d.floor_margins + d.ceiling_margins) >= -se
    assert abs(fld.mean_Y0()) <= 1e-8
