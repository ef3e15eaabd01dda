"""Problem data for reflected backward doubly stochastic equations.

Calling conventions shared by every coefficient (all vectorised over paths):

* ``f(t, y, z) -> (P,)`` with ``t`` a float, ``y`` of shape (P,), ``z`` of shape (P, d)
* ``g(t, y, z) -> (P, l)``
* ``h(y, z) -> (P,)``
* ``phi(t) -> float``
* ``terminal(W_T) -> (P,)`` with ``W_T`` of shape (P, d)
* ``obstacle(t, W_t) -> (P,)``
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

LIPSCHITZ = "lipschitz"
CONTINUOUS = "continuous"
LEFT_CONTINUOUS = "left-continuous-nondecreasing"
RIGHT_CONTINUOUS = "right-continuous-nondecreasing"
REGULARITY_CLASSES = (LIPSCHITZ, CONTINUOUS, LEFT_CONTINUOUS, RIGHT_CONTINUOUS)

PASS = "pass"
VIOLATED = "violated"
NOT_CHECKABLE = "not-checkable"

HYPOTHESES = ("H0", "H1", "H2", "H3", "H3R", "H4", "H5", "H6", "H7", "H7-origin")


@dataclass(frozen=True)
class GeneratorSpec:
    f: Callable
    phi: Callable = lambda t: 0.0
    kappa: float = 0.1
    lipschitz_C: float | None = None
    regularity: str = LIPSCHITZ
    z_free: bool = False

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.lipschitz_C is not None and self.lipschitz_C < 0:
            raise ValueError("lipschitz_C must be nonnegative")
        if self.regularity not in REGULARITY_CLASSES:
            raise ValueError(f"unknown regularity class {self.regularity!r}")


@dataclass(frozen=True)
class DiffusionSpec:
    g: Callable
    g_C: float = 0.0
    alpha: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class MinorantSpec:
    h: Callable
    h_lipschitz: float = 0.0


@dataclass(frozen=True)
class ProblemSpec:
    generator: GeneratorSpec
    diffusion: DiffusionSpec
    terminal: Callable
    obstacle: Callable | None = None
    minorant: MinorantSpec | None = None
    d: int = 1
    l: int = 1  # noqa: E741
    name: str = "custom"

    def xi(self, noise) -> np.ndarray:
        return np.asarray(self.terminal(noise.W(noise.N)), dtype=float).reshape(noise.P)

    def obstacle_values(self, noise) -> np.ndarray | None:
        """Obstacle on every (path, grid node), shape (P, N+1); None when absent."""
        if self.obstacle is None:
            return None
        out = np.empty((noise.P, noise.N + 1))
        for i in range(noise.N + 1):
            out[:, i] = np.broadcast_to(self.obstacle(noise.grid.t(i), noise.W(i)), (noise.P,))
        return out

    def with_(self, **changes) -> "ProblemSpec":
        return replace(self, **changes)


def zero_diffusion(l: int = 1) -> DiffusionSpec:  # noqa: E741
    return DiffusionSpec(lambda t, y, z: np.zeros((np.shape(y)[0], l)), g_C=0.0, alpha=0.5)


# ---------------------------------------------------------------------------
# assumption audit
# ---------------------------------------------------------------------------

@dataclass
class Verdict:
    status: str
    witness: dict | None = None
    note: str = ""

    def __post_init__(self):
        if self.status == VIOLATED and not self.witness:
            raise ValueError("a violated verdict needs a witness")


@dataclass
class AssumptionReport:
    verdicts: dict = field(default_factory=dict)
    budget: int = 0

    def __getitem__(self, key) -> Verdict:
        return self.verdicts[key]

    def passed(self, *keys) -> bool:
        return all(self.verdicts[k].status == PASS for k in keys)

    def rows(self):
        for key, v in self.verdicts.items():
            yield key, v.status, "" if v.witness is None else repr(v.witness), v.note


_PROBE_LEVELS = (8, 16, 24, 32, 40)
_REL_TOL = 1e-12


def _first_bad(mask):
    idx = np.flatnonzero(mask)
    return None if idx.size == 0 else int(idx[0])


class _Auditor:
    def __init__(self, spec, budget, seed, horizon, y_box, z_box, n_times=8):
        self.spec = spec
        self.gen = spec.generator
        self.rng = np.random.default_rng(seed)
        self.budget = budget
        self.horizon = horizon
        self.y_box = y_box
        self.z_box = z_box
        self.times = np.linspace(0.0, horizon, n_times)
        per = max(1, -(-budget // n_times))
        self.per = per

    def points(self):
        """Yields (t, y, z) blocks: uniform draws in the box plus the lattice of multiples of 1/8."""
        d = self.spec.d
        lattice = np.arange(np.ceil(self.y_box[0] * 8), np.floor(self.y_box[1] * 8) + 1) / 8.0
        for t in self.times:
            y = np.concatenate([self.rng.uniform(*self.y_box, self.per), lattice])
            z = self.rng.uniform(*self.z_box, (y.size, d))
            yield float(t), y, z

    def f(self, t, y, z):
        return np.asarray(self.gen.f(t, y, z), dtype=float).reshape(y.shape)

    def one_sided(self, side):
        """Largest jump |f(y +/- 2^-k) - f(y)| at the finest probe level."""
        k = _PROBE_LEVELS[-1]
        for t, y, z in self.points():
            f0 = self.f(t, y, z)
            f1 = self.f(t, y + side * 2.0**-k, z)
            bad = np.abs(f1 - f0) > 1e-6 * (1.0 + np.abs(f0))
            j = _first_bad(bad)
            if j is not None:
                return {"t": t, "y": float(y[j]), "z": z[j].tolist(),
                        "value": float(f0[j]), "limit": float(f1[j])}
        return None

    def z_continuity(self):
        k = _PROBE_LEVELS[-1]
        for t, y, z in self.points():
            e = self.rng.normal(size=z.shape)
            e /= np.linalg.norm(e, axis=1, keepdims=True)
            f0 = self.f(t, y, z)
            f1 = self.f(t, y, z + e * 2.0**-k)
            j = _first_bad(np.abs(f1 - f0) > 1e-6 * (1.0 + np.abs(f0)))
            if j is not None:
                return {"t": t, "y": float(y[j]), "z": z[j].tolist()}
        return None

    def nondecreasing(self):
        for t, y, z in self.points():
            steps = [np.abs(self.rng.uniform(0, self.y_box[1] - self.y_box[0], y.size))]
            steps += [np.full(y.size, 2.0**-k) for k in _PROBE_LEVELS]
            f0 = self.f(t, y, z)
            for s in steps:
                f1 = self.f(t, y + s, z)
                j = _first_bad(f1 < f0 - _REL_TOL * (1.0 + np.abs(f0)))
                if j is not None:
                    return {"t": t, "y": float(y[j]), "y_up": float(y[j] + s[j]), "z": z[j].tolist()}
        return None

    def pairs(self):
        """(t, y1, z1, y2, z2) with y1 >= y2, random plus dyadic-neighbour pairs."""
        for t, y, z in self.points():
            ya, za = y, z
            yb = self.rng.uniform(*self.y_box, y.size)
            zb = self.rng.uniform(*self.z_box, z.shape)
            hi = np.maximum(ya, yb)
            lo = np.minimum(ya, yb)
            swap = ya < yb
            zhi = np.where(swap[:, None], zb, za)
            zlo = np.where(swap[:, None], za, zb)
            yield t, hi, zhi, lo, zlo
            for k in _PROBE_LEVELS:
                yield t, y, z, y - 2.0**-k, z
                yield t, y + 2.0**-k, z, y, z

    # -- hypotheses -------------------------------------------------------

    def H0(self):
        C = self.gen.lipschitz_C
        if C is None:
            return Verdict(NOT_CHECKABLE, note="no Lipschitz constant declared")
        for t, y1, z1, y2, z2 in self.pairs():
            lhs = np.abs(self.f(t, y1, z1) - self.f(t, y2, z2))
            rhs = C * (np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=1))
            j = _first_bad(lhs > rhs * (1 + 1e-9) + 1e-12)
            if j is not None:
                return Verdict(VIOLATED, {"t": t, "y1": float(y1[j]), "y2": float(y2[j]),
                                          "z1": z1[j].tolist(), "z2": z2[j].tolist()})
        return Verdict(PASS)

    def H1(self):
        for side in (-1.0, 1.0):
            w = self.one_sided(side)
            if w is not None:
                return Verdict(VIOLATED, w, note="jump in y")
        w = self.z_continuity()
        if w is not None:
            return Verdict(VIOLATED, w, note="jump in z")
        return Verdict(PASS)

    def H2(self):
        for t in self.times:
            if not self.gen.phi(float(t)) >= 0:
                return Verdict(VIOLATED, {"t": float(t)}, note="phi negative")
        for t, y, z in self.points():
            bound = self.gen.phi(t) + self.gen.kappa * (np.abs(y) + np.linalg.norm(z, axis=1))
            fv = self.f(t, y, z)
            j = _first_bad(np.abs(fv) > bound * (1 + 1e-12) + 1e-12)
            if j is not None:
                return Verdict(VIOLATED, {"t": t, "y": float(y[j]), "z": z[j].tolist()})
        return Verdict(PASS)

    def _monotone_one_sided(self, side):
        w = self.one_sided(side)
        if w is not None:
            return Verdict(VIOLATED, w, note="one-sided limit differs from value")
        w = self.nondecreasing()
        if w is not None:
            return Verdict(VIOLATED, w, note="decreasing in y")
        w = self.z_continuity()
        if w is not None:
            return Verdict(VIOLATED, w, note="jump in z")
        return Verdict(PASS)

    def H3(self):
        return self._monotone_one_sided(-1.0)

    def H3R(self):
        return self._monotone_one_sided(1.0)

    def H4(self):
        m = self.spec.minorant
        if m is None:
            return Verdict(NOT_CHECKABLE, note="no minorant declared")
        for t, y, z in self.points():
            hv = np.asarray(m.h(y, z), dtype=float)
            bound = self.gen.kappa * (np.abs(y) + np.linalg.norm(z, axis=1))
            j = _first_bad(np.abs(hv) > bound * (1 + 1e-12) + 1e-12)
            if j is not None:
                return Verdict(VIOLATED, {"y": float(y[j]), "z": z[j].tolist()}, note="|h| growth")
        for t, y1, z1, y2, z2 in self.pairs():
            lhs = self.f(t, y1, z1) - self.f(t, y2, z2)
            rhs = np.asarray(m.h(y1 - y2, z1 - z2), dtype=float)
            j = _first_bad(lhs < rhs - 1e-12 * (1 + np.abs(rhs)))
            if j is not None:
                return Verdict(VIOLATED, {"t": t, "y1": float(y1[j]), "y2": float(y2[j]),
                                          "z1": z1[j].tolist(), "z2": z2[j].tolist()},
                               note="minorant inequality")
        return Verdict(PASS)

    def _paths(self):
        W_T = self.rng.normal(0.0, np.sqrt(self.horizon), (self.budget, self.spec.d))
        return W_T

    def H5(self):
        W_T = self._paths()
        xi = np.asarray(self.spec.terminal(W_T), dtype=float).reshape(-1)
        j = _first_bad(~np.isfinite(xi))
        if j is not None:
            return Verdict(VIOLATED, {"path": j, "W_T": W_T[j].tolist()})
        return Verdict(PASS)

    def H6(self):
        if self.spec.obstacle is None:
            return Verdict(PASS, note="no obstacle")
        W_T = self._paths()
        xi = np.asarray(self.spec.terminal(W_T), dtype=float).reshape(-1)
        S_T = np.broadcast_to(self.spec.obstacle(self.horizon, W_T), xi.shape)
        j = _first_bad(~(S_T <= xi))
        if j is not None:
            return Verdict(VIOLATED, {"path": j, "S_T": float(S_T[j]), "xi": float(xi[j])})
        for t in self.times:
            W_t = self.rng.normal(0.0, np.sqrt(t), (self.budget, self.spec.d))
            S = np.broadcast_to(self.spec.obstacle(float(t), W_t), (self.budget,))
            j = _first_bad(~np.isfinite(S))
            if j is not None:
                return Verdict(VIOLATED, {"path": j, "t": float(t)}, note="obstacle not finite")
        return Verdict(PASS)

    def H7(self):
        diff = self.spec.diffusion
        for t, y1, z1, y2, z2 in self.pairs():
            dg = np.asarray(diff.g(t, y1, z1)) - np.asarray(diff.g(t, y2, z2))
            lhs = np.sum(dg * dg, axis=1)
            rhs = diff.g_C * (y1 - y2) ** 2 + diff.alpha * np.sum((z1 - z2) ** 2, axis=1)
            j = _first_bad(lhs > rhs * (1 + 1e-9) + 1e-12)
            if j is not None:
                return Verdict(VIOLATED, {"t": t, "y1": float(y1[j]), "y2": float(y2[j]),
                                          "z1": z1[j].tolist(), "z2": z2[j].tolist()})
        return Verdict(PASS)

    def H7_origin(self):
        diff = self.spec.diffusion
        zero_y = np.zeros(1)
        zero_z = np.zeros((1, self.spec.d))
        for t in self.times:
            g0 = np.asarray(diff.g(float(t), zero_y, zero_z), dtype=float)
            if np.any(g0 != 0.0):
                return Verdict(VIOLATED, {"t": float(t), "g": g0.reshape(-1).tolist()})
        return Verdict(PASS)


def audit_assumptions(spec: ProblemSpec, budget: int = 512, seed: int = 0, horizon: float = 1.0,
                      y_box=(-5.0, 5.0), z_box=(-5.0, 5.0)) -> AssumptionReport:
    """Falsification audit of the standing hypotheses on sampled points.

    ``pass`` only means that no counterexample was found. ``H3R`` is the
    right-continuous counterpart of ``H3`` used for maximal solutions, and
    ``H7-origin`` is the requirement ``g(t, 0, 0) = 0`` reported separately
    from the increment bound ``H7``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    a = _Auditor(spec, budget, seed, horizon, tuple(y_box), tuple(z_box))
    report = AssumptionReport(budget=budget)
    for key in HYPOTHESES:
        method = getattr(a, key.replace("-", "_"))
        report.verdicts[key] = method()
    return report


# ---------------------------------------------------------------------------
# example bank
# ---------------------------------------------------------------------------

def _const(value):
    return lambda t, y, z: np.full(np.shape(y), float(value))


def _zero_h(y, z):
    return np.zeros(np.shape(y))


def _step(t, y, z):
    return (np.asarray(y) > 0).astype(float)


def _const_obstacle(level):
    return lambda t, W: np.full(np.shape(W)[0], float(level))


def _step_generator(kappa=0.1, phi=1.0, xi=0.0, obstacle=-5.0):
    return ProblemSpec(
        generator=GeneratorSpec(_step, phi=lambda t: float(phi), kappa=kappa,
                                regularity=LEFT_CONTINUOUS, z_free=True),
        diffusion=zero_diffusion(),
        terminal=lambda W: np.full(np.shape(W)[0], float(xi)),
        obstacle=_const_obstacle(obstacle),
        minorant=MinorantSpec(_zero_h, 0.0),
        name="step-generator",
    )


def _snell_only(kappa=0.1, xi=0.0, level=1.0):
    return ProblemSpec(
        generator=GeneratorSpec(_const(0.0), kappa=kappa, lipschitz_C=kappa, z_free=True),
        diffusion=zero_diffusion(),
        terminal=lambda W: np.full(np.shape(W)[0], float(xi)),
        obstacle=lambda t, W: np.full(np.shape(W)[0], level - t),
        minorant=MinorantSpec(_zero_h, 0.0),
        name="snell-only",
    )


def _additive_backward(kappa=0.1, sigma=1.0, alpha=0.5):
    return ProblemSpec(
        generator=GeneratorSpec(_const(0.0), kappa=kappa, lipschitz_C=kappa, z_free=True),
        diffusion=DiffusionSpec(lambda t, y, z: np.full((np.shape(y)[0], 1), float(sigma)),
                                g_C=0.0, alpha=alpha),
        terminal=lambda W: np.zeros(np.shape(W)[0]),
        minorant=MinorantSpec(_zero_h, 0.0),
        name="additive-backward",
    )


def _linear_drift(c=1.0, xi=2.0, kappa=0.1):
    return ProblemSpec(
        generator=GeneratorSpec(_const(c), phi=lambda t: abs(float(c)), kappa=kappa,
                                lipschitz_C=kappa, z_free=True),
        diffusion=zero_diffusion(),
        terminal=lambda W: np.full(np.shape(W)[0], float(xi)),
        minorant=MinorantSpec(_zero_h, 0.0),
        name="linear-drift",
    )


def _lipschitz_markov(g_scale=0.3, obstacle=-2.0, alpha=0.5):
    def f(t, y, z):
        return -np.asarray(y) + np.asarray(z).sum(axis=1)

    def h(y, z):
        return -(np.abs(y) + np.linalg.norm(z, axis=1))

    return ProblemSpec(
        generator=GeneratorSpec(f, phi=lambda t: 0.0, kappa=1.0, lipschitz_C=1.0),
        diffusion=DiffusionSpec(lambda t, y, z: g_scale * np.asarray(y)[:, None],
                                g_C=g_scale**2, alpha=alpha),
        terminal=lambda W: np.cos(np.asarray(W)[:, 0]),
        obstacle=None if obstacle is None else _const_obstacle(obstacle),
        minorant=MinorantSpec(h, 1.0),
        name="lipschitz-markov",
    )


BANK = {
    "step-generator": _step_generator,
    "snell-only": _snell_only,
    "additive-backward": _additive_backward,
    "linear-drift": _linear_drift,
    "lipschitz-markov": _lipschitz_markov,
}


def builtin_problem(name: str, **constants) -> ProblemSpec:
    """Problem from the example bank; keyword arguments override its constants.

    ======================  =========================================================
    ``step-generator``      f = 1{y>0}, g = 0, xi = 0, S = -5, h = 0, kappa 0.1, phi 1
    ``snell-only``          f = 0, g = 0, xi = 0, S_t = 1 - t
    ``additive-backward``   f = 0, g = 1, xi = 0, no obstacle
    ``linear-drift``        f = c, g = 0, xi = 2, no obstacle
    ``lipschitz-markov``    f = -y + z, g = 0.3 y, xi = cos(W_T), S = -2
    ======================  =========================================================
    """
    try:
        factory = BANK[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known: {', '.join(sorted(BANK))}") from None
    return factory(**constants)
