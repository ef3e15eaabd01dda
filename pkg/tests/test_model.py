import numpy as np
import pytest

from rbdsde.model import (
    HYPOTHESES,
    NOT_CHECKABLE,
    PASS,
    VIOLATED,
    BANK,
    DiffusionSpec,
    GeneratorSpec,
    MinorantSpec,
    ProblemSpec,
    Verdict,
    audit_assumptions,
    builtin_problem,
    zero_diffusion,
)
from rbdsde.noise import enumerate_tree, make_grid


def _spec(f, **gen):
    return ProblemSpec(GeneratorSpec(f, **gen), zero_diffusion(), lambda W: np.zeros(np.shape(W)[0]),
                       minorant=MinorantSpec(lambda y, z: np.zeros(np.shape(y)), 0.0))


def test_step_generator_audit():
    rep = audit_assumptions(builtin_problem("step-generator"), budget=256)
    assert rep.passed("H2", "H3", "H4", "H5", "H6", "H7", "H7-origin")
    # discontinuous at 0 and not right-continuous there
    assert rep["H1"].status == VIOLATED and rep["H1"].witness["y"] == 0.0
    assert rep["H3R"].status == VIOLATED and rep["H3R"].witness["y"] == 0.0
    assert rep["H0"].status == NOT_CHECKABLE


def test_right_continuous_step_fails_left_continuity_near_zero():
    spec = _spec(lambda t, y, z: (np.asarray(y) >= 0).astype(float), phi=lambda t: 1.0, kappa=0.1)
    rep = audit_assumptions(spec, budget=128)
    v = rep["H3"]
    assert v.status == VIOLATED
    assert v.witness["y"] == 0.0
    assert v.witness["value"] == 1.0 and v.witness["limit"] == 0.0
    assert rep.passed("H3R")


def test_zero_generator_passes_everything_it_can():
    spec = _spec(lambda t, y, z: np.zeros(np.shape(y)), kappa=0.3, lipschitz_C=0.3)
    rep = audit_assumptions(spec, budget=128)
    assert rep.passed("H0", "H1", "H2", "H3", "H3R", "H4")


def test_declared_constants_are_falsified():
    lip = _spec(lambda t, y, z: 2.0 * np.asarray(y), phi=lambda t: 0.0, kappa=3.0, lipschitz_C=1.0)
    rep = audit_assumptions(lip, budget=64)
    assert rep["H0"].status == VIOLATED
    w = rep["H0"].witness
    assert abs(2 * (w["y1"] - w["y2"])) > abs(w["y1"] - w["y2"])

    growth = _spec(lambda t, y, z: 2.0 + np.asarray(y), phi=lambda t: 1.0, kappa=0.1)
    assert audit_assumptions(growth, budget=64)["H2"].status == VIOLATED

    neg_phi = _spec(lambda t, y, z: np.zeros(np.shape(y)), phi=lambda t: -1.0)
    assert audit_assumptions(neg_phi, budget=16)["H2"].status == VIOLATED


def test_decreasing_generator_fails_monotonicity():
    spec = _spec(lambda t, y, z: -np.tanh(np.asarray(y)), phi=lambda t: 1.0, kappa=1.0)
    rep = audit_assumptions(spec, budget=64)
    assert rep["H3"].status == VIOLATED and rep["H3"].note == "decreasing in y"


def test_minorant_inequality_checked():
    # f = y is nondecreasing, so h = 0 is a minorant; h = 2|y| is not (f rises only at rate 1)
    good = _spec(lambda t, y, z: np.asarray(y, dtype=float), phi=lambda t: 0.0, kappa=3.0, lipschitz_C=1.0)
    assert audit_assumptions(good, budget=64).passed("H4")
    bad = good.with_(minorant=MinorantSpec(lambda y, z: 2.0 * np.abs(y), 2.0))
    rep = audit_assumptions(bad, budget=64)
    assert rep["H4"].status == VIOLATED and rep["H4"].note == "minorant inequality"


def test_bank_examples():
    assert set(BANK) >= {"step-generator", "snell-only", "additive-backward", "linear-drift", "lipschitz-markov"}
    snell = audit_assumptions(builtin_problem("snell-only"), budget=64)
    assert snell.passed("H6")
    add = audit_assumptions(builtin_problem("additive-backward"), budget=64)
    assert add.passed("H7")
    # a constant backward coefficient is not zero at the origin
    assert add["H7-origin"].status == VIOLATED
    lm = audit_assumptions(builtin_problem("lipschitz-markov"), budget=128)
    assert lm.passed("H0", "H1", "H2", "H4", "H5", "H6", "H7", "H7-origin")


def test_obstacle_above_terminal_is_flagged():
    spec = builtin_problem("snell-only", level=1.5)
    v = audit_assumptions(spec, budget=16)["H6"]
    assert v.status == VIOLATED and v.witness["S_T"] == 0.5


def test_report_rows_and_budget():
    rep = audit_assumptions(builtin_problem("linear-drift"), budget=7)
    rows = list(rep.rows())
    assert [r[0] for r in rows] == list(HYPOTHESES)
    assert rep.budget == 7
    with pytest.raises(ValueError):
        audit_assumptions(builtin_problem("linear-drift"), budget=0)


def test_violated_verdict_requires_witness():
    with pytest.raises(ValueError):
        Verdict(VIOLATED)
    assert Verdict(PASS).witness is None


def test_unknown_problem_and_bad_constants():
    with pytest.raises(KeyError):
        builtin_problem("nope")
    with pytest.raises(ValueError):
        GeneratorSpec(lambda t, y, z: y, kappa=0.0)
    with pytest.raises(ValueError):
        DiffusionSpec(lambda t, y, z: y, alpha=1.0)
    with pytest.raises(ValueError):
        GeneratorSpec(lambda t, y, z: y, regularity="smooth")


def test_spec_evaluation_shapes():
    nb = enumerate_tree(make_grid(1.0, 2))
    spec = builtin_problem("lipschitz-markov")
    assert np.array_equal(spec.xi(nb), np.cos(nb.W(2)[:, 0]))
    S = spec.obstacle_values(nb)
    assert S.shape == (nb.P, 3) and np.all(S == -2.0)
    assert builtin_problem("additive-backward").obstacle_values(nb) is None
    snell = builtin_problem("snell-only").obstacle_values(nb)
    assert np.array_equal(snell[0], [1.0, 0.5, 0.0])
