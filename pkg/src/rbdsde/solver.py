"""Backward induction for reflected BDSDEs with a Lipschitz generator.

On each step ``i = N-1, ..., 0`` with ``X = Y_{i+1} + g(t_{i+1}, Y_{i+1}, Z_{i+1}) . dB_i``::

    Z_i = E_i[(X - E_i[X]) dW_i] / dt
    Y_i = max(S_i, E_i[X] + dt f(t_i, Y_i, Z_i))        (implicit in y)
    dK_i = Y_i - E_i[X] - dt f(t_i, Y_i, Z_i)  where Y_i = S_i, else 0

The explicit variant evaluates the generator at ``Y_{i+1}`` inside the
conditional expectation instead. ``dK_i`` is the push applied over
``[t_i, t_{i+1}]`` and ``K_{t_i} = sum_{j<i} dK_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .condexp import RegressionBasis, make_engine
from .model import ProblemSpec
from .noise import NoiseBundle

IMPLICIT = "implicit"
EXPLICIT = "explicit"

_FIELD_HOOKS: list = []


class ContractionError(ValueError):
    """The implicit step is not a contraction (dt * C >= 1)."""


class ConvergenceError(RuntimeError):
    """The scalar fixed point did not converge within the iteration cap."""


def register_field_hook(fn: Callable) -> None:
    """Call ``fn(field)`` on every SolutionField constructed from now on."""
    _FIELD_HOOKS.append(fn)


def unregister_field_hook(fn: Callable) -> None:
    if fn in _FIELD_HOOKS:
        _FIELD_HOOKS.remove(fn)


@dataclass(eq=False)
class SolutionField:
    Y: np.ndarray
    Z: np.ndarray
    dK: np.ndarray
    S: np.ndarray | None
    grid: object
    engine: str = "tree"
    y_update: str = IMPLICIT
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        P, n1 = self.Y.shape
        if self.Z.shape[:2] != (P, n1) or self.dK.shape != (P, n1):
            raise ValueError("inconsistent field shapes")
        if self.S is not None and self.S.shape != (P, n1):
            raise ValueError("obstacle shape does not match Y")
        for hook in list(_FIELD_HOOKS):
            hook(self)

    @property
    def reflect(self) -> bool:
        return self.S is not None

    @property
    def P(self) -> int:
        return self.Y.shape[0]

    @property
    def N(self) -> int:
        return self.Y.shape[1] - 1

    @property
    def K(self) -> np.ndarray:
        K = np.zeros_like(self.dK)
        K[:, 1:] = np.cumsum(self.dK[:, :-1], axis=1)
        return K

    def mean_Y0(self) -> float:
        return float(self.Y[:, 0].mean())


def definition_invariants(field: SolutionField) -> dict:
    """Discrete solution properties: obstacle, push monotonicity, Skorokhod identity.

    Every check is exact (no tolerance). Returns name -> (ok, measured value).
    """
    K = field.K
    out = {
        "K0_zero": (bool(np.all(K[:, 0] == 0.0)), float(np.max(np.abs(K[:, 0])))),
        "dK_nonnegative": (bool(np.all(field.dK >= 0.0)), float(np.min(field.dK))),
        "K_nondecreasing": (bool(np.all(np.diff(K, axis=1) >= 0.0)), float(np.min(np.diff(K, axis=1), initial=0.0))),
    }
    if field.S is None:
        out["no_push_without_obstacle"] = (bool(np.all(field.dK == 0.0)), float(np.max(np.abs(field.dK))))
    else:
        gap = field.Y - field.S
        skor = np.sum(field.dK * gap, axis=1)
        out["Y_above_obstacle"] = (bool(np.all(gap >= 0.0)), float(np.min(gap)))
        out["skorokhod_sum_zero"] = (bool(np.all(skor == 0.0)), float(np.max(np.abs(skor))))
    return out


@dataclass
class SolverConfig:
    y_update: str = IMPLICIT
    picard_tol: float = 1e-12
    picard_max: int = 50
    engine: str | None = None
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    threads: int = 1

    def __post_init__(self):
        if self.y_update not in (IMPLICIT, EXPLICIT):
            raise ValueError(f"y_update must be {IMPLICIT!r} or {EXPLICIT!r}")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max < 1:
            raise ValueError("picard_max must be >= 1")


def spec_driver(spec: ProblemSpec) -> Callable:
    f = spec.generator.f
    return lambda i, t, y, z: np.asarray(f(t, y, z), dtype=float).reshape(np.shape(y))


def _reflected_fixed_point(F, EX, dt, S, tol, max_iter):
    y = EX if S is None else np.maximum(EX, S)
    for _ in range(max_iter):
        c = EX + dt * F(y)
        y_new = c if S is None else np.maximum(c, S)
        err = np.max(np.abs(y_new - y), initial=0.0)
        y = y_new
        if err <= tol * max(1.0, np.max(np.abs(y), initial=0.0)):
            break
    else:
        raise ConvergenceError(f"scalar fixed point not converged after {max_iter} iterations (err={err:.3e})")
    c = EX + dt * F(y)
    if S is None:
        return c, np.zeros_like(c)
    Y = np.maximum(c, S)
    return Y, np.where(Y > S, 0.0, Y - c)


def solve_lipschitz(spec: ProblemSpec, noise: NoiseBundle, cfg: SolverConfig | None = None, *,
                    driver: Callable | None = None, lipschitz: float | None = None,
                    reflect: bool = True, engine=None) -> SolutionField:
    """Solve the discretised reflected equation for a Lipschitz generator.

    Parameters
    ----------
    spec : ProblemSpec
        ``g``, ``xi`` and the obstacle are taken from here; so is ``f`` unless
        ``driver`` is given.
    noise : NoiseBundle
    cfg : SolverConfig, optional
    driver : callable, optional
        ``driver(i, t, y, z) -> (P,)`` replacing ``f``. It may depend on the
        path through ``i`` (frozen coefficients of an outer iteration).
    lipschitz : float, optional
        Lipschitz constant of the driver in ``y``; defaults to
        ``spec.generator.lipschitz_C``.
    reflect : bool
        Ignore the obstacle when False.
    engine : optional
        Prebuilt conditional-expectation engine to reuse across solves.
    """
    cfg = cfg or SolverConfig()
    grid = noise.grid
    N, P, dt = grid.N, noise.P, grid.dt
    C = spec.generator.lipschitz_C if lipschitz is None else lipschitz
    if driver is None:
        if C is None:
            raise ValueError(f"generator of {spec.name!r} is not declared Lipschitz; use an envelope")
        driver = spec_driver(spec)
    if cfg.y_update == IMPLICIT:
        if C is None:
            raise ValueError("an implicit step needs the driver's Lipschitz constant")
        if dt * C >= 1.0:
            raise ContractionError(f"dt*C = {dt * C:.3g} >= 1; refine the grid or use the explicit update")
    picard_max = cfg.picard_max
    if cfg.y_update == IMPLICIT and dt * C > 0:
        # enough sweeps for a contraction of rate dt*C to reach picard_tol
        picard_max = max(picard_max, int(np.ceil(np.log(cfg.picard_tol) / np.log(dt * C))) + 5)
    if engine is None:
        engine = make_engine(noise, cfg.engine, cfg.basis, cfg.threads)

    xi = spec.xi(noise)
    S = spec.obstacle_values(noise) if reflect else None
    if S is not None and np.any(S[:, N] > xi):
        p = int(np.argmax(S[:, N] > xi))
        raise ValueError(f"terminal value below the obstacle on path {p}")

    Y = np.zeros((P, N + 1))
    Z = np.zeros((P, N + 1, spec.d))
    dK = np.zeros((P, N + 1))
    Y[:, N] = xi
    g = spec.diffusion.g
    for i in range(N - 1, -1, -1):
        t_i, t_next = grid.t(i), grid.t(i + 1)
        G = np.asarray(g(t_next, Y[:, i + 1], Z[:, i + 1]), dtype=float).reshape(P, spec.l)
        X = Y[:, i + 1] + np.sum(G * noise.dB[:, i, :], axis=1)
        dW = noise.dW[:, i, :]
        S_i = None if S is None else S[:, i]
        # E_i[X dW_i] written as E_i[(X - E_i X) dW_i]: equal for exact conditioning,
        # and a constant continuation gives Z = 0 under regression too
        EX = engine.expect(i, X)
        Z[:, i] = engine.expect(i, (X - EX)[:, None] * dW) / dt
        if cfg.y_update == IMPLICIT:
            Zi = Z[:, i]
            Y[:, i], dK[:, i] = _reflected_fixed_point(
                lambda y: driver(i, t_i, y, Zi), EX, dt, S_i, cfg.picard_tol, picard_max)
        else:
            Yt = engine.expect(i, X + dt * driver(i, t_i, Y[:, i + 1], Z[:, i]))
            if S_i is None:
                Y[:, i] = Yt
            else:
                Y[:, i] = np.maximum(Yt, S_i)
                dK[:, i] = Y[:, i] - Yt
    return SolutionField(Y, Z, dK, S, grid, engine=engine.name, y_update=cfg.y_update)


@dataclass
class ResidualReport:
    projected_max: float
    raw_max: float
    projected_by_index: np.ndarray
    invariants: dict

    @property
    def invariants_ok(self) -> bool:
        return all(ok for ok, _ in self.invariants.values())


def residual_check(spec: ProblemSpec, noise: NoiseBundle, field: SolutionField, cfg: SolverConfig | None = None,
                   *, driver: Callable | None = None, engine=None) -> ResidualReport:
    """Plug a field into the discrete equation.

    The one-step residual ``r_i = Y_i - (Y_{i+1} + dt f + G.dB_i + dK_i - Z_i.dW_i)``
    is projected with ``E_i``; a field solving the scheme has zero projected
    residual. ``f`` is evaluated at ``Y_i`` for the implicit update and at
    ``Y_{i+1}`` for the explicit one.
    """
    cfg = cfg or SolverConfig(y_update=field.y_update)
    driver = driver or spec_driver(spec)
    if engine is None:
        engine = make_engine(noise, cfg.engine, cfg.basis, cfg.threads)
    grid = noise.grid
    N, P, dt = grid.N, noise.P, grid.dt
    g = spec.diffusion.g
    proj = np.zeros(N)
    raw = 0.0
    for i in range(N):
        G = np.asarray(g(grid.t(i + 1), field.Y[:, i + 1], field.Z[:, i + 1]), dtype=float).reshape(P, spec.l)
        y_eval = field.Y[:, i] if cfg.y_update == IMPLICIT else field.Y[:, i + 1]
        drift = dt * driver(i, grid.t(i), y_eval, field.Z[:, i])
        r = field.Y[:, i] - (field.Y[:, i + 1] + drift + np.sum(G * noise.dB[:, i, :], axis=1)
                             + field.dK[:, i] - np.sum(field.Z[:, i] * noise.dW[:, i, :], axis=1))
        raw = max(raw, float(np.max(np.abs(r))))
        proj[i] = np.max(np.abs(engine.expect(i, r)))
    return ResidualReport(float(proj.max(initial=0.0)), raw, proj, definition_invariants(field))
