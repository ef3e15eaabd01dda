"""Lipschitz regularisation of a generator in its ``y`` argument.

For a level ``n`` the lower envelope is ``inf_u f(u) + n|y - u|`` (the largest
n-Lipschitz minorant) and the upper envelope is ``sup_u f(u) - n|y - u|``.
Both are computed over a uniform node set with two linear sweeps.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .model import LIPSCHITZ, RIGHT_CONTINUOUS, GeneratorSpec

DEFAULT_Y_BOX = (-8.0, 8.0)
DEFAULT_POINTS = 2049
_CACHE_LIMIT = 100_000


@dataclass(frozen=True)
class GridFunction1D:
    y_min: float
    y_max: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 1:
            raise ValueError("values must be a non-empty 1-d array")
        if v.size > 1 and not self.y_max > self.y_min:
            raise ValueError("y_max must exceed y_min")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def G(self) -> int:
        return self.values.size

    @property
    def dy(self) -> float:
        return 0.0 if self.G == 1 else (self.y_max - self.y_min) / (self.G - 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.y_min + np.arange(self.G) * self.dy

    def __call__(self, y):
        return _interp(self.values[None, :], np.zeros(np.size(y), dtype=np.int64),
                       np.asarray(y, dtype=float).reshape(-1), self.y_min, self.dy).reshape(np.shape(y))


def tabulate(func, y_min: float, y_max: float, G: int) -> GridFunction1D:
    """Tabulate a scalar function of ``y`` on ``G`` uniform nodes."""
    if G < 1:
        raise ValueError("G must be >= 1")
    dy = 0.0 if G == 1 else (y_max - y_min) / (G - 1)
    nodes = y_min + np.arange(G) * dy
    return GridFunction1D(y_min, y_max, np.asarray(func(nodes), dtype=float))


def _inf_sweep(f: np.ndarray, n: float, dy: float) -> np.ndarray:
    """Row-wise ``min_j f[j] + n*|k - j|*dy`` by a forward and a backward pass.

    Each pass locates the best anchor ``a`` on its side with a prefix minimum
    and evaluates the candidate as ``f[a] + n*(|k-a|*dy)``, so no rounding
    accumulates along the sweep.
    """
    forward = _one_sided(f, n, dy)
    backward = _one_sided(f[:, ::-1], n, dy)[:, ::-1]
    return np.minimum(forward, backward)


def _one_sided(f: np.ndarray, n: float, dy: float) -> np.ndarray:
    # best anchor a <= k minimises f[a] - n*a*dy; a prefix minimum finds it,
    # the last index attaining it is the anchor
    R, G = f.shape
    k = np.arange(G)
    shifted = f - n * (k * dy)
    best = np.minimum.accumulate(shifted, axis=1)
    anchor = np.maximum.accumulate(np.where(shifted == best, k, 0), axis=1)
    cand = np.take_along_axis(f, anchor, axis=1) + n * ((k - anchor) * dy)
    return np.minimum(f, cand)


def inf_envelope(fvals: GridFunction1D, n: float) -> GridFunction1D:
    if not n > 0:
        raise ValueError("envelope level n must be positive")
    e = _inf_sweep(fvals.values[None, :], float(n), fvals.dy)[0]
    return GridFunction1D(fvals.y_min, fvals.y_max, e)


def sup_envelope(fvals: GridFunction1D, n: float) -> GridFunction1D:
    neg = GridFunction1D(fvals.y_min, fvals.y_max, -fvals.values)
    return GridFunction1D(fvals.y_min, fvals.y_max, -inf_envelope(neg, n).values)


def lipschitz_excess(e: GridFunction1D, n: float) -> float:
    """Largest ``|e[k+1] - e[k]| - n*dy`` over adjacent nodes (<= 0 when certified)."""
    if e.G < 2:
        return -np.inf
    return float(np.max(np.abs(np.diff(e.values)) - n * e.dy))


def _interp(table: np.ndarray, row: np.ndarray, y: np.ndarray, y_min: float, dy: float) -> np.ndarray:
    """Piecewise-linear evaluation of ``table[row]`` at ``y``; linear extrapolation outside."""
    G = table.shape[1]
    if G == 1:
        return table[row, 0].copy()
    pos = (y - y_min) / dy
    k = np.clip(np.floor(pos), 0, G - 2).astype(np.int64)
    w = pos - k
    lo = table[row, k]
    hi = table[row, k + 1]
    return np.where(w == 0.0, lo, lo + w * (hi - lo))


class _EnvelopeDriver:
    """Callable ``(t, y, z)`` evaluating the envelope of ``base.f``, memoised per (t, z)."""

    def __init__(self, base: GeneratorSpec, n: float, y_box, G: int, direction: str):
        self.base = base
        self.n = float(n)
        self.y_min, self.y_max = map(float, y_box)
        self.G = int(G)
        self.dy = (self.y_max - self.y_min) / (self.G - 1)
        self.nodes = self.y_min + np.arange(self.G) * self.dy
        self.sign = 1.0 if direction == "inf" else -1.0
        self._cache: dict = {}
        self._lock = threading.Lock()

    def _tables(self, t: float, zrows: np.ndarray) -> np.ndarray:
        keys = [(t, r.tobytes()) for r in zrows]
        with self._lock:
            missing = [j for j, k in enumerate(keys) if k not in self._cache]
        if missing:
            zm = zrows[missing]
            R = len(missing)
            y = np.tile(self.nodes, R)
            z = np.repeat(zm, self.G, axis=0)
            raw = np.asarray(self.base.f(t, y, z), dtype=float).reshape(R, self.G)
            env = self.sign * _inf_sweep(self.sign * raw, self.n, self.dy)
            with self._lock:
                if len(self._cache) + R > _CACHE_LIMIT:
                    self._cache.clear()
                for j, row in zip(missing, env):
                    self._cache[keys[j]] = row
        with self._lock:
            return np.stack([self._cache[k] for k in keys])

    def __call__(self, t, y, z):
        t = float(t)
        y = np.asarray(y, dtype=float).reshape(-1)
        z = np.asarray(z, dtype=float).reshape(y.size, -1)
        if self.base.z_free:
            tables = self._tables(t, np.zeros((1, z.shape[1])))
            row = np.zeros(y.size, dtype=np.int64)
        else:
            zrows, row = np.unique(z, axis=0, return_inverse=True)
            tables = self._tables(t, zrows)
            row = row.reshape(-1)
        return _interp(tables, row, y, self.y_min, self.dy)


def envelope_generator(spec: GeneratorSpec, n: float, y_box=DEFAULT_Y_BOX, G: int = DEFAULT_POINTS,
                       direction: str | None = None) -> GeneratorSpec:
    """Generator whose ``f`` is the level-``n`` envelope of ``spec.f`` in ``y``.

    The lower envelope is used unless ``spec`` is right-continuous (maximal
    construction), in which case the upper one is. Between nodes the tabulated
    envelope is interpolated linearly, so the result is n-Lipschitz in ``y``.
    """
    if n < spec.kappa:
        raise ValueError(f"envelope level n={n} is below kappa={spec.kappa}")
    if G < 2:
        raise ValueError("G must be >= 2")
    if direction is None:
        direction = "sup" if spec.regularity == RIGHT_CONTINUOUS else "inf"
    if direction not in ("inf", "sup"):
        raise ValueError("direction must be 'inf' or 'sup'")
    return GeneratorSpec(
        f=_EnvelopeDriver(spec, n, y_box, G, direction),
        phi=spec.phi,
        kappa=spec.kappa,
        lipschitz_C=float(n),
        regularity=LIPSCHITZ,
        z_free=spec.z_free,
    )
