"""Comparison harnesses, the positivity check, and independent oracles.

The oracles here (``tree_bruteforce``, ``snell_oracle``, ``envelope_bruteforce``)
deliberately share no code with the solver: conditional expectations are
group averages keyed on integer-encoded sign patterns, and the implicit
scalar equation is solved by bisection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envelope import GridFunction1D, envelope_generator
from .model import (
    LEFT_CONTINUOUS,
    RIGHT_CONTINUOUS,
    GeneratorSpec,
    MinorantSpec,
    ProblemSpec,
    audit_assumptions,
    builtin_problem,
    zero_diffusion,
)
from .noise import CapacityError, NoiseBundle
from .scheme import iterate_maximal, iterate_minimal
from .solver import EXPLICIT, IMPLICIT, SolutionField, SolverConfig, solve_lipschitz, spec_driver

BRUTEFORCE_MAX_STEPS = 6


class HypothesisRefused(RuntimeError):
    """A comparison precondition failed, so its conclusion is not expected to hold."""

    def __init__(self, hypothesis, witness, detail=""):
        where = "" if witness is None else f" at {witness}"
        super().__init__(f"hypothesis {hypothesis} fails{where}{': ' + detail if detail else ''}")
        self.hypothesis = hypothesis
        self.witness = witness


class PreconditionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def envelope_bruteforce(fvals: GridFunction1D, n: float, direction: str = "inf") -> GridFunction1D:
    """O(G^2) envelope: ``min_j f[j] + n*|k-j|*dy`` (or the ``max`` mirror)."""
    f = fvals.values
    G = f.size
    # dist[k, j] = n*(|k-j|*dy) depends on |k-j| only: row k is a window of one vector
    d = n * (np.arange(G) * fvals.dy)
    both = np.concatenate([d[::-1], d[1:]])
    dist = np.lib.stride_tricks.sliding_window_view(both, G)[::-1]
    if direction == "inf":
        e = np.min(f[None, :] + dist, axis=1)
    else:
        e = np.max(f[None, :] - dist, axis=1)
    return GridFunction1D(fvals.y_min, fvals.y_max, e)


class _TreeAverager:
    """Exhaustive conditional expectations on a d = l = 1 tree bundle."""

    def __init__(self, noise: NoiseBundle, max_steps: int | None):
        if not noise.is_tree:
            raise ValueError("oracle needs a rademacher-tree bundle")
        if noise.d != 1 or noise.l != 1:
            raise CapacityError("oracle supports d = l = 1 only")
        if max_steps is not None and noise.N > max_steps:
            raise CapacityError(f"oracle limited to N <= {max_steps}, got {noise.N}")
        self.N = noise.N
        self.w_up = (noise.dW[:, :, 0] > 0).astype(np.int64)
        self.b_up = (noise.dB[:, :, 0] > 0).astype(np.int64)

    def groups(self, i):
        known = np.concatenate([self.w_up[:, :i], self.b_up[:, i:]], axis=1)
        weights = 1 << np.arange(known.shape[1], dtype=np.int64)
        return known @ weights, 1 << known.shape[1]

    def average(self, i, values):
        key, size = self.groups(i)
        counts = np.bincount(key, minlength=size)
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            sums = np.bincount(key, weights=v, minlength=size)
            return (sums / np.maximum(counts, 1))[key]
        cols = [np.bincount(key, weights=v[:, c], minlength=size) / np.maximum(counts, 1) for c in range(v.shape[1])]
        return np.stack(cols, axis=1)[key]


def _bisect_fixed_point(F, E, dt, S, tol=1e-14, max_iter=400):
    """Root of ``y - max(S, E + dt F(y))``, increasing in y when dt * Lip(F) < 1."""
    def phi(y):
        c = E + dt * F(y)
        return y - (c if S is None else np.maximum(c, S))

    w = 1.0 + np.abs(E) + (0.0 if S is None else np.abs(S))
    lo, hi = E - w, E + w
    for _ in range(200):
        bad_lo = phi(lo) > 0
        bad_hi = phi(hi) < 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        w = np.where(bad_lo | bad_hi, 2 * w, w)
        lo = np.where(bad_lo, E - w, lo)
        hi = np.where(bad_hi, E + w, hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        pos = phi(mid) > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
        if np.all(hi - lo <= tol * np.maximum(1.0, np.abs(mid))):
            break
    return 0.5 * (lo + hi)


def tree_bruteforce(spec: ProblemSpec, noise: NoiseBundle, cfg: SolverConfig | None = None,
                    driver: Callable | None = None) -> SolutionField:
    """Gold-standard discrete solution on a small tree (N <= 6)."""
    cfg = cfg or SolverConfig()
    avg = _TreeAverager(noise, BRUTEFORCE_MAX_STEPS)
    driver = driver or spec_driver(spec)
    grid = noise.grid
    N, P, dt = grid.N, noise.P, grid.dt
    dW = noise.dW[:, :, 0]
    dB = noise.dB[:, :, 0]
    Y = np.zeros((P, N + 1))
    Z = np.zeros((P, N + 1, 1))
    dK = np.zeros((P, N + 1))
    Y[:, N] = spec.xi(noise)
    S = spec.obstacle_values(noise)
    for i in reversed(range(N)):
        G = np.asarray(spec.diffusion.g(grid.t(i + 1), Y[:, i + 1], Z[:, i + 1]), dtype=float).reshape(P)
        X = Y[:, i + 1] + G * dB[:, i]
        Z[:, i, 0] = avg.average(i, X * dW[:, i]) / dt
        Si = None if S is None else S[:, i]
        if cfg.y_update == IMPLICIT:
            E = avg.average(i, X)
            y = _bisect_fixed_point(lambda v: driver(i, grid.t(i), v, Z[:, i]), E, dt, Si)
            c = E + dt * driver(i, grid.t(i), y, Z[:, i])
        else:
            c = avg.average(i, X + dt * driver(i, grid.t(i), Y[:, i + 1], Z[:, i]))
        if Si is None:
            Y[:, i] = c
        else:
            Y[:, i] = np.maximum(c, Si)
            dK[:, i] = np.where(Y[:, i] > Si, 0.0, Y[:, i] - c)
    return SolutionField(Y, Z, dK, S, grid, engine="bruteforce", y_update=cfg.y_update)


def snell_oracle(obstacle: Callable | None, xi: Callable, noise: NoiseBundle) -> SolutionField:
    """Dynamic programme ``Y_i = max(S_i, E_i[Y_{i+1}])`` for f = 0, g = 0."""
    avg = _TreeAverager(noise, None)
    grid = noise.grid
    N, P = grid.N, noise.P
    Y = np.zeros((P, N + 1))
    Z = np.zeros((P, N + 1, 1))
    dK = np.zeros((P, N + 1))
    Y[:, N] = np.asarray(xi(noise.W(N)), dtype=float).reshape(P)
    S = None
    if obstacle is not None:
        S = np.stack([np.broadcast_to(obstacle(grid.t(i), noise.W(i)), (P,)) for i in range(N + 1)], axis=1)
    for i in reversed(range(N)):
        cont = avg.average(i, Y[:, i + 1])
        Z[:, i, 0] = avg.average(i, Y[:, i + 1] * noise.dW[:, i, 0]) / grid.dt
        if S is None:
            Y[:, i] = cont
        else:
            Y[:, i] = np.maximum(S[:, i], cont)
            dK[:, i] = np.where(S[:, i] > cont, S[:, i] - cont, 0.0)
    return SolutionField(Y, Z, dK, S, grid, engine="snell-oracle")


# ---------------------------------------------------------------------------
# comparison of two problems on shared noise
# ---------------------------------------------------------------------------

LIPSCHITZ_FIRST = "lipschitz-first"
LIPSCHITZ_SECOND = "lipschitz-second"
MINIMAL_FIRST = "minimal-first"
MAXIMAL_SECOND = "maximal-second"
VARIANTS = (LIPSCHITZ_FIRST, LIPSCHITZ_SECOND, MINIMAL_FIRST, MAXIMAL_SECOND)


@dataclass
class Side:
    """One problem of a comparison and how to solve it."""

    spec: ProblemSpec
    method: str = "lipschitz"  # lipschitz | minimal | maximal | envelope
    n: float | None = None
    direction: str | None = None

    def generator(self) -> GeneratorSpec:
        if self.method == "envelope":
            return envelope_generator(self.spec.generator, self.n, direction=self.direction)
        return self.spec.generator


@dataclass
class ComparisonCase:
    name: str
    first: Side
    second: Side
    variant: str
    y_update: str | None = None
    note: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class ViolationReport:
    case: str
    max_positive: float
    count: int
    witness: tuple | None
    tol: float
    Y0_first: float
    Y0_second: float
    extra: dict = field(default_factory=dict)


def _solve_side(side: Side, gen: GeneratorSpec, noise, cfg):
    if side.method in ("lipschitz", "envelope"):
        return solve_lipschitz(side.spec.with_(generator=gen), noise, cfg)
    if side.method == "minimal":
        return iterate_minimal(side.spec, noise, cfg)[0]
    if side.method == "maximal":
        return iterate_maximal(side.spec, noise, cfg)[0]
    raise ValueError(f"unknown solve method {side.method!r}")


def _gen_values(gen: GeneratorSpec, field: SolutionField, grid):
    return np.stack([np.asarray(gen.f(grid.t(i), field.Y[:, i], field.Z[:, i]), dtype=float).reshape(field.P)
                     for i in range(grid.N)], axis=1)


def _audit_regularity(case: ComparisonCase, gen1, gen2, budget, horizon):
    def audit(side, gen):
        return audit_assumptions(side.spec.with_(generator=gen), budget=budget, horizon=horizon)

    if case.variant in (LIPSCHITZ_FIRST, LIPSCHITZ_SECOND):
        side, gen = (case.first, gen1) if case.variant == LIPSCHITZ_FIRST else (case.second, gen2)
        if gen.lipschitz_C is None:
            raise HypothesisRefused("(iii)", None, "Lipschitz side has no declared constant")
        v = audit(side, gen)["H0"]
        if v.status != "pass":
            raise HypothesisRefused("(iii) H0", v.witness)
    elif case.variant == MINIMAL_FIRST:
        if case.first.method != "minimal":
            raise HypothesisRefused("(iii)", None, "first side must be solved for its minimal solution")
        rep = audit(case.first, gen1)
        if not (rep.passed("H2") and (rep.passed("H1") or rep.passed("H3"))):
            raise HypothesisRefused("(iii) H1/H3-H2", rep["H2"].witness or rep["H3"].witness)
    else:
        if case.second.method != "maximal":
            raise HypothesisRefused("(iii)", None, "second side must be solved for its maximal solution")
        rep = audit(case.second, gen2)
        if not (rep.passed("H2") and (rep.passed("H1") or rep.passed("H3R"))):
            raise HypothesisRefused("(iii) H1/H3R-H2", rep["H2"].witness or rep["H3R"].witness)


def compare(case: ComparisonCase, noise: NoiseBundle, cfg: SolverConfig | None = None,
            tol: float | None = None, audit_budget: int = 256) -> ViolationReport:
    """Solve both problems on the same noise and count violations of ``Y1 <= Y2``.

    On a tree a violation is ``Y1 - Y2 > tol`` (default 1e-10) at a single
    (path, node). On Gaussian paths the tolerance at node ``i`` is three Monte
    Carlo standard errors of ``Y1_i - Y2_i``.
    """
    cfg = cfg or SolverConfig()
    grid = noise.grid
    a, b = case.first, case.second
    xi1, xi2 = a.spec.xi(noise), b.spec.xi(noise)
    if np.any(xi1 > xi2):
        raise HypothesisRefused("(i)", (int(np.argmax(xi1 > xi2)), grid.N))
    S1, S2 = a.spec.obstacle_values(noise), b.spec.obstacle_values(noise)
    if S1 is not None:
        lower2 = np.full_like(S1, -np.inf) if S2 is None else S2
        if np.any(S1 > lower2):
            p, i = np.unravel_index(int(np.argmax(S1 > lower2)), S1.shape)
            raise HypothesisRefused("(ii)", (int(p), int(i)))

    gen1, gen2 = a.generator(), b.generator()
    _audit_regularity(case, gen1, gen2, audit_budget, grid.T)

    y_update = case.y_update
    if y_update is None:
        levels = [s.n for s in (a, b) if s.method == "envelope"]
        y_update = EXPLICIT if any(grid.dt * n >= 1.0 for n in levels) else cfg.y_update
    run_cfg = SolverConfig(y_update=y_update, picard_tol=cfg.picard_tol, picard_max=cfg.picard_max,
                           engine=cfg.engine, basis=cfg.basis, threads=cfg.threads)
    Y1 = _solve_side(a, gen1, noise, run_cfg)
    Y2 = _solve_side(b, gen2, noise, run_cfg)

    # generator ordering along the relevant solution
    at = Y2 if case.variant in (LIPSCHITZ_FIRST, MINIMAL_FIRST) else Y1
    f1, f2 = _gen_values(gen1, at, grid), _gen_values(gen2, at, grid)
    bad = f1 > f2 + 1e-12 * (1.0 + np.abs(f2))
    if bad.any():
        p, i = np.unravel_index(int(np.argmax(bad)), bad.shape)
        raise HypothesisRefused("(iii) ordering", (int(p), int(i)),
                                f"f1={f1[p, i]:.6g} > f2={f2[p, i]:.6g}")

    diff = Y1.Y - Y2.Y
    if noise.is_tree:
        tol = 1e-10 if tol is None else tol
        thresh = np.full(grid.N + 1, tol)
    else:
        se = diff.std(axis=0) / np.sqrt(noise.P)
        tol = 3.0 if tol is None else tol
        thresh = tol * se + 1e-10
    over = diff > thresh[None, :]
    pos = np.maximum(diff, 0.0)
    witness = None
    if pos.max() > 0:
        p, i = np.unravel_index(int(np.argmax(pos)), pos.shape)
        witness = (int(p), int(i))
    return ViolationReport(case.name, float(pos.max()), int(over.sum()), witness, float(tol),
                           Y1.mean_Y0(), Y2.mean_Y0(), {"y_update": y_update})


def _with_terminal(spec, xi):
    return spec.with_(terminal=xi)


def _const_obstacle(level):
    return lambda t, W: np.full(np.shape(W)[0], float(level))


def _half_sine(W):
    return 0.5 * np.sin(np.asarray(W)[:, 0])


def comparison_bank() -> list:
    """Shipped comparison cases; every one satisfies the hypotheses of its variant."""
    cases = []
    zero = builtin_problem("linear-drift", c=0.0, xi=0.0).with_(obstacle=_const_obstacle(-5.0))
    unit = builtin_problem("linear-drift", c=1.0, xi=0.0).with_(obstacle=_const_obstacle(-5.0))
    cases.append(ComparisonCase("lip1-constant-drifts", Side(zero), Side(unit), LIPSCHITZ_FIRST,
                                note="f1 = 0 <= f2 = 1; Y2_0 - Y1_0 = T"))

    lm = builtin_problem("lipschitz-markov")
    lm_f = lm.generator.f
    lm_low = lm.with_(
        generator=GeneratorSpec(lambda t, y, z: lm_f(t, y, z) - 0.5, phi=lambda t: 0.5, kappa=1.0, lipschitz_C=1.0),
        terminal=lambda W: np.cos(np.asarray(W)[:, 0]) - 0.2,
        name="lipschitz-markov-shifted",
    )
    lm_high = builtin_problem("lipschitz-markov", obstacle=-1.5)
    cases.append(ComparisonCase("lip1-markov-shifted", Side(lm_low), Side(lm_high), LIPSCHITZ_FIRST,
                                note="shifted generator, terminal and obstacle, shared g = 0.3y"))

    cases.append(ComparisonCase("lip1-snell-raised", Side(builtin_problem("snell-only")),
                                Side(builtin_problem("snell-only", xi=0.125, level=1.125)), LIPSCHITZ_FIRST,
                                note="active reflection on both sides"))

    step = builtin_problem("step-generator")
    unit_step_box = unit
    cases.append(ComparisonCase("lip2-step-minimal-vs-unit", Side(step, "minimal"), Side(unit_step_box),
                                LIPSCHITZ_SECOND, note="discontinuous f1 against Lipschitz f2 = 1"))
    cases.append(ComparisonCase("min1-step-minimal-vs-unit", Side(step, "minimal"), Side(unit_step_box),
                                MINIMAL_FIRST, note="minimal solution of the discontinuous side"))

    step_sine = _with_terminal(step, _half_sine)
    unit_sine = _with_terminal(unit, _half_sine)
    for n in (2, 8, 32):
        cases.append(ComparisonCase(f"env-inf-n{n}", Side(step_sine, "envelope", n=n), Side(unit_sine),
                                    LIPSCHITZ_FIRST, note=f"lower envelope at level {n} below f2 = 1"))

    zero_sine = _with_terminal(zero, _half_sine)
    right_step = step_sine.with_(generator=GeneratorSpec(
        lambda t, y, z: (np.asarray(y) >= 0).astype(float), phi=lambda t: 1.0, kappa=0.1,
        regularity=RIGHT_CONTINUOUS, z_free=True))
    cases.append(ComparisonCase("env-sup-n8", Side(zero_sine), Side(right_step, "envelope", n=8),
                                LIPSCHITZ_SECOND, note="upper envelope of a right-continuous f2 above f1 = 0"))
    return cases


def comparison_case(name: str) -> ComparisonCase:
    for case in comparison_bank():
        if case.name == name:
            return case
    raise KeyError(f"unknown comparison case {name!r}")


# ---------------------------------------------------------------------------
# positivity
# ---------------------------------------------------------------------------

@dataclass
class LemmaReport:
    name: str
    min_free: float
    min_reflected: float
    field_free: SolutionField = field(repr=False)
    field_reflected: SolutionField = field(repr=False)

    @property
    def minimum(self) -> float:
        return min(self.min_free, self.min_reflected)


def lemma_positivity(phi: Callable, xi: Callable, h: MinorantSpec, noise: NoiseBundle,
                     cfg: SolverConfig | None = None, g=None, name: str = "lemma") -> LemmaReport:
    """Solve with generator ``h(y, z) + phi(t)`` and report ``min Y``.

    Two choices of the finite-variation term: none at all, and the push of a
    reflection at zero (which increases only where ``Y = 0``).
    """
    grid = noise.grid
    phis = np.array([phi(grid.t(i)) for i in range(grid.N + 1)])
    if np.any(phis < 0):
        raise PreconditionError(f"phi is negative at t = {grid.t(int(np.argmax(phis < 0)))}")
    xis = np.asarray(xi(noise.W(grid.N)), dtype=float).reshape(noise.P)
    if np.any(xis < 0):
        raise PreconditionError(f"terminal value is negative on path {int(np.argmax(xis < 0))}")
    hh = h.h

    def f(t, y, z):
        return np.asarray(hh(y, z), dtype=float) + phi(t)

    spec = ProblemSpec(
        generator=GeneratorSpec(f, phi=phi, kappa=max(h.h_lipschitz, 1e-12), lipschitz_C=h.h_lipschitz),
        diffusion=g or zero_diffusion(),
        terminal=xi,
        name=name,
    )
    free = solve_lipschitz(spec, noise, cfg)
    refl = solve_lipschitz(spec.with_(obstacle=_const_obstacle(0.0)), noise, cfg)
    return LemmaReport(name, float(free.Y.min()), float(refl.Y.min()), free, refl)


def lemma_scenarios() -> list:
    """(name, phi, xi, h) for the shipped positivity scenarios."""
    zero_h = MinorantSpec(lambda y, z: np.zeros(np.shape(y)), 0.0)
    return [
        ("h0-phi1-xi0", lambda t: 1.0, lambda W: np.zeros(np.shape(W)[0]), zero_h),
        ("absy-phi05-xi0", lambda t: 0.5, lambda W: np.zeros(np.shape(W)[0]),
         MinorantSpec(lambda y, z: -0.1 * np.abs(y), 0.1)),
        ("normz-phi0-abscos", lambda t: 0.0, lambda W: np.abs(np.cos(np.asarray(W)[:, 0])),
         MinorantSpec(lambda y, z: -0.2 * np.linalg.norm(z, axis=1), 0.0)),
    ]


__all__ = [
    "ComparisonCase", "HypothesisRefused", "LemmaReport", "PreconditionError", "Side", "ViolationReport",
    "compare", "comparison_bank", "comparison_case", "envelope_bruteforce", "lemma_positivity",
    "lemma_scenarios", "snell_oracle", "tree_bruteforce", "LEFT_CONTINUOUS",
]
