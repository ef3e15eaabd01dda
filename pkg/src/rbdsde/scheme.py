"""Monotone construction of the minimal solution for a discontinuous generator.

Start from the floor equation (generator ``-kappa|y| - kappa|z| - phi_t``) and
solve, for ``n = 1, 2, ...``, the reflected equation whose generator is

    f(t, y^{n-1}_t, z^{n-1}_t) + h(y - y^{n-1}_t, z - z^{n-1}_t)

with the previous iterate frozen path by path. The iterates increase in ``n``
and stay below the ceiling equation (generator ``+kappa|y| + kappa|z| + phi_t``).
Maximal solutions are obtained by running the same scheme on the mirrored
problem ``y -> -y``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .condexp import make_engine
from .model import LEFT_CONTINUOUS, RIGHT_CONTINUOUS, GeneratorSpec, MinorantSpec, ProblemSpec
from .noise import NoiseBundle
from .solver import SolutionField, SolverConfig, solve_lipschitz

logger = logging.getLogger(__name__)

TREE_SLACK = 1e-12


class MonotonicityError(RuntimeError):
    def __init__(self, message, witness):
        super().__init__(f"{message} at (path, index) = {witness}")
        self.witness = witness


class UnsupportedConfiguration(ValueError):
    pass


@dataclass
class BracketPair:
    floor: SolutionField
    ceiling: SolutionField

    def margin(self) -> float:
        return float(np.min(self.ceiling.Y - self.floor.Y))


@dataclass
class IterationState:
    n: int
    current: SolutionField
    previous: SolutionField
    theta_norm: float
    delta: float
    z_energy: float
    monotone_margin: float
    floor_margin: float
    ceiling_margin: float
    witness: tuple | None = None

    @property
    def Y0_mean(self) -> float:
        return self.current.mean_Y0()


def _engine_for(noise, cfg, engine):
    return engine if engine is not None else make_engine(noise, cfg.engine, cfg.basis, cfg.threads)


def _bracket_generator(gen: GeneratorSpec, sign: float) -> GeneratorSpec:
    kappa, phi = gen.kappa, gen.phi

    def f(t, y, z):
        return sign * (kappa * np.abs(y) + kappa * np.linalg.norm(z, axis=1) + phi(t))

    return GeneratorSpec(f, phi=phi, kappa=kappa, lipschitz_C=kappa)


def solve_brackets(spec: ProblemSpec, noise: NoiseBundle, cfg: SolverConfig | None = None,
                   engine=None) -> BracketPair:
    """Solve the floor and ceiling equations, both reflected on the obstacle."""
    cfg = cfg or SolverConfig()
    engine = _engine_for(noise, cfg, engine)
    floor = solve_lipschitz(spec.with_(generator=_bracket_generator(spec.generator, -1.0)), noise, cfg,
                            engine=engine)
    ceiling = solve_lipschitz(spec.with_(generator=_bracket_generator(spec.generator, 1.0)), noise, cfg,
                              engine=engine)
    return BracketPair(floor, ceiling)


def _slack(noise, Y):
    if noise.is_tree:
        return TREE_SLACK
    # three Monte Carlo standard errors of the worst grid node
    return TREE_SLACK + 3.0 * float(np.max(Y.std(axis=0))) / np.sqrt(noise.P)


def _argmin(a):
    p, i = np.unravel_index(int(np.argmin(a)), a.shape)
    return int(p), int(i)


def iterate_minimal(spec: ProblemSpec, noise: NoiseBundle, cfg: SolverConfig | None = None,
                    tol: float | None = None, max_n: int = 50, *, strict: bool = True,
                    engine=None, brackets: BracketPair | None = None):
    """Run the monotone scheme; returns ``(last iterate, trace)``.

    The loop stops once ``delta = max_i mean_p |y^n_i - y^{n-1}_i|^2`` drops
    below ``tol`` (default 1e-10 on a tree, 1e-4 otherwise) or after
    ``max_n`` outer steps. With ``strict`` a decrease beyond the slack
    (1e-12 on a tree, three standard errors otherwise) raises
    :class:`MonotonicityError`.
    """
    if spec.minorant is None:
        raise ValueError(f"problem {spec.name!r} has no minorant h")
    cfg = cfg or SolverConfig()
    if tol is None:
        tol = 1e-10 if noise.is_tree else 1e-4
    engine = _engine_for(noise, cfg, engine)
    if brackets is None:
        brackets = solve_brackets(spec, noise, cfg, engine)
    prev = brackets.floor
    trace: list[IterationState] = []
    if max_n <= 0:
        return prev, trace

    f = spec.generator.f
    h = spec.minorant.h
    grid = noise.grid
    N, dt = grid.N, grid.dt
    for n in range(1, max_n + 1):
        yp, zp = prev.Y, prev.Z
        frozen = np.stack([np.asarray(f(grid.t(i), yp[:, i], zp[:, i]), dtype=float).reshape(noise.P)
                           for i in range(N)], axis=1)

        def driver(i, t, y, z, frozen=frozen, yp=yp, zp=zp):
            return frozen[:, i] + np.asarray(h(y - yp[:, i], z - zp[:, i]), dtype=float)

        cur = solve_lipschitz(spec, noise, cfg, driver=driver, lipschitz=spec.minorant.h_lipschitz,
                              engine=engine)
        theta = frozen + np.stack([h(cur.Y[:, i] - yp[:, i], cur.Z[:, i] - zp[:, i]) for i in range(N)], axis=1)
        step = cur.Y - prev.Y
        state = IterationState(
            n=n,
            current=cur,
            previous=prev,
            theta_norm=float(np.sqrt(dt * np.sum(np.mean(theta**2, axis=0)))),
            delta=float(np.max(np.mean(step**2, axis=0))),
            z_energy=float(dt * np.sum(np.mean(np.sum(cur.Z[:, :N] ** 2, axis=2), axis=0))),
            monotone_margin=float(np.min(step)),
            floor_margin=float(np.min(cur.Y - brackets.floor.Y)),
            ceiling_margin=float(np.min(brackets.ceiling.Y - cur.Y)),
        )
        slack = _slack(noise, cur.Y)
        if state.monotone_margin < -slack:
            state.witness = _argmin(step)
            if strict:
                raise MonotonicityError(f"iterate {n} decreased by {-state.monotone_margin:.3e}", state.witness)
            logger.warning("iterate %d decreased by %.3e at %s", n, -state.monotone_margin, state.witness)
        trace.append(state)
        logger.debug("iterate %d: delta=%.3e z_energy=%.4g", n, state.delta, state.z_energy)
        prev = cur
        if state.delta < tol:
            break
    return prev, trace


def mirror_problem(spec: ProblemSpec) -> ProblemSpec:
    """The problem solved by ``-Y``: ``f~(t,y,z) = -f(t,-y,-z)``, ``g~ = -g(t,-y,-z)``, ``xi~ = -xi``."""
    if spec.obstacle is not None:
        raise UnsupportedConfiguration(
            "maximal solutions are only supported without an obstacle (the mirror turns it into an upper barrier)")
    gen, diff = spec.generator, spec.diffusion
    f, g, xi = gen.f, diff.g, spec.terminal
    flip = {LEFT_CONTINUOUS: RIGHT_CONTINUOUS, RIGHT_CONTINUOUS: LEFT_CONTINUOUS}
    minorant = None
    if spec.minorant is not None:
        h = spec.minorant.h
        minorant = MinorantSpec(lambda y, z: h(y, -np.asarray(z)), spec.minorant.h_lipschitz)
    return replace(
        spec,
        generator=replace(gen, f=lambda t, y, z: -np.asarray(f(t, -np.asarray(y), -np.asarray(z))),
                          regularity=flip.get(gen.regularity, gen.regularity)),
        diffusion=replace(diff, g=lambda t, y, z: -np.asarray(g(t, -np.asarray(y), -np.asarray(z)))),
        terminal=lambda W: -np.asarray(xi(W)),
        minorant=minorant,
        name=f"mirror({spec.name})",
    )


def _mirror_field(fl: SolutionField) -> SolutionField:
    return SolutionField(-fl.Y, -fl.Z, np.zeros_like(fl.dK), None, fl.grid, fl.engine, fl.y_update,
                         dict(fl.meta, mirrored=True))


def iterate_maximal(spec: ProblemSpec, noise: NoiseBundle, cfg: SolverConfig | None = None,
                    tol: float | None = None, max_n: int = 50, **kwargs):
    """Maximal solution through the mirror ``y -> -y`` (obstacle-free problems only).

    The returned trace is expressed in the original variables: iterates
    decrease, and floor/ceiling margins trade places.
    """
    mirrored = mirror_problem(spec)
    field, trace = iterate_minimal(mirrored, noise, cfg, tol, max_n, **kwargs)
    back = []
    for s in trace:
        back.append(replace(s, current=_mirror_field(s.current), previous=_mirror_field(s.previous),
                            floor_margin=s.ceiling_margin, ceiling_margin=s.floor_margin))
    return _mirror_field(field), back


@dataclass
class Diagnostics:
    monotone_margins: list
    floor_margins: list
    ceiling_margins: list
    z_energy: list
    theta_norm: list
    delta: list
    rate: float | None
    energy_bounded: bool


def _geometric_rate(delta):
    d = np.asarray(delta, dtype=float)
    n = np.arange(d.size)
    ok = d > 1e-300
    if ok.sum() < 2:
        return None
    slope = np.polyfit(n[ok], np.log(d[ok]), 1)[0]
    return float(np.exp(slope))


def diagnostics(trace) -> Diagnostics:
    """Margins and convergence summaries over a trace.

    ``monotone_margins[k]`` is ``min(y^{k+1} - y^k)`` between consecutive trace
    entries, so a single-entry trace has none.
    """
    margins = [float(np.min(b.current.Y - a.current.Y)) for a, b in zip(trace, trace[1:])]
    energy = [s.z_energy for s in trace]
    bounded = True
    if energy:
        med = float(np.median(energy))
        bounded = bool(np.all(np.isfinite(energy))) and all(e <= 10.0 * med for e in energy) if med > 0 \
            else bool(np.all(np.asarray(energy) == 0.0))
    return Diagnostics(
        monotone_margins=margins,
        floor_margins=[s.floor_margin for s in trace],
        ceiling_margins=[s.ceiling_margin for s in trace],
        z_energy=energy,
        theta_norm=[s.theta_norm for s in trace],
        delta=[s.delta for s in trace],
        rate=_geometric_rate([s.delta for s in trace]),
        energy_bounded=bounded,
    )
