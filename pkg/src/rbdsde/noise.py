"""Time grids and two-sided Brownian noise.

Two sampling modes are provided:

* ``gaussian``: every increment coordinate is an independent N(0, dt) draw
  produced by a counter-based generator keyed by ``(seed, path, step, axis)``.
  Any increment can be recomputed in isolation, so the bundle does not depend
  on how paths are split between worker threads.
* ``rademacher-tree``: every increment is ``+/- sqrt(dt)`` and, for one
  forward and one backward dimension, the bundle holds each of the
  ``4**N`` sign patterns exactly once. Expectations over this bundle are
  exact expectations under the discrete measure.

Information available at grid index ``i`` is ``{dW_j : j < i}`` together with
``{dB_j : j >= i}``: the past of the forward motion and the future of the
backward one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

GAUSSIAN = "gaussian"
TREE = "rademacher-tree"

MAX_TREE_STEPS = 12

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class CapacityError(ValueError):
    """Raised when an exhaustive enumeration would be too large."""


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0):
            raise ValueError(f"horizon T must be positive, got {self.T!r}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"number of steps N must be a positive integer, got {self.N!r}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        # i*dt rather than cumulative sums, so t_i is reproducible node by node
        return np.arange(self.N + 1) * self.dt

    def t(self, i: int) -> float:
        if i == self.N:
            return float(self.T)
        return i * self.dt


def make_grid(T: float, N: int) -> TimeGrid:
    return TimeGrid(float(T), int(N))


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Forward increments ``dW`` (P, N, d) and backward increments ``dB`` (P, N, l)."""

    grid: TimeGrid
    dW: np.ndarray
    dB: np.ndarray
    mode: str
    seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.dW, self.dB):
            arr.setflags(write=False)

    @property
    def P(self) -> int:
        return self.dW.shape[0]

    @property
    def d(self) -> int:
        return self.dW.shape[2]

    @property
    def l(self) -> int:  # noqa: E743
        return self.dB.shape[2]

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def is_tree(self) -> bool:
        return self.mode == TREE

    def W(self, i: int) -> np.ndarray:
        """Forward Brownian position ``W_{t_i}``, shape (P, d)."""
        key = ("W", i)
        if key not in self._cache:
            self._cache[key] = self.dW[:, :i, :].sum(axis=1)
        return self._cache[key]

    def B_future(self, i: int) -> np.ndarray:
        """Backward increment ``B_T - B_{t_i}``, shape (P, l)."""
        key = ("Bf", i)
        if key not in self._cache:
            self._cache[key] = self.dB[:, i:, :].sum(axis=1)
        return self._cache[key]

    def known_columns(self, i: int) -> np.ndarray:
        """Every increment known at index ``i``, flattened to shape (P, k)."""
        past_w = self.dW[:, :i, :].reshape(self.P, -1)
        future_b = self.dB[:, i:, :].reshape(self.P, -1)
        return np.concatenate([past_w, future_b], axis=1)


def is_known(i: int, kind: str, j: int) -> bool:
    """Whether increment ``j`` of ``kind`` ('W' or 'B') is known at grid index ``i``."""
    if kind == "W":
        return j < i
    if kind == "B":
        return j >= i
    raise ValueError(f"kind must be 'W' or 'B', got {kind!r}")


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def counter_normals(seed: int, paths: np.ndarray, steps: int, axes: int) -> np.ndarray:
    """Standard normals for the counters ``(seed, p, i, a)``.

    Returns an array of shape (len(paths), steps, axes). Each entry is a pure
    function of its counter; there is no sequential state.
    """
    paths = np.asarray(paths, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        per_path = _mix(key ^ _mix(paths + _GOLDEN))
        counter = np.arange(steps * axes, dtype=np.uint64).reshape(steps, axes)
        bits = _mix(per_path[:, None, None] + _mix(counter + _GOLDEN)[None, :, :])
    # 53 random bits, shifted off the endpoints so ndtri stays finite
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def sample_noise(grid: TimeGrid, P: int, d: int = 1, l: int = 1, seed: int = 0,  # noqa: E741
                 threads: int = 1, chunk: int = 8192) -> NoiseBundle:
    """Gaussian two-sided noise, bitwise reproducible for any ``threads``."""
    for name, v in (("P", P), ("d", d), ("l", l)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    axes = d + l
    sd = np.sqrt(grid.dt)
    starts = range(0, P, chunk)

    def block(s):
        idx = np.arange(s, min(s + chunk, P))
        return counter_normals(seed, idx, grid.N, axes) * sd

    if threads == 1:
        parts = [block(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(block, starts))
    z = np.concatenate(parts, axis=0)
    return NoiseBundle(grid, np.ascontiguousarray(z[:, :, :d]), np.ascontiguousarray(z[:, :, d:]),
                       GAUSSIAN, int(seed))


def tree_signs(N: int) -> np.ndarray:
    """Sign table of shape (4**N, 2N): columns 0..N-1 for dW, N..2N-1 for dB.

    Column ``a`` holds bit ``2N-1-a`` of the path index (0 -> +1, 1 -> -1), so
    a C-order reshape of any per-path array to ``(2,)*2N`` puts increment
    ``a`` on axis ``a``.
    """
    n_bits = 2 * N
    p = np.arange(2**n_bits, dtype=np.int64)
    shifts = np.arange(n_bits - 1, -1, -1, dtype=np.int64)
    bits = (p[:, None] >> shifts[None, :]) & 1
    return 1.0 - 2.0 * bits


def enumerate_tree(grid: TimeGrid) -> NoiseBundle:
    """Full Rademacher sample space for d = l = 1."""
    if grid.N > MAX_TREE_STEPS:
        raise CapacityError(
            f"tree enumeration needs 4**N paths; N={grid.N} exceeds the limit of {MAX_TREE_STEPS}")
    signs = tree_signs(grid.N) * np.sqrt(grid.dt)
    dW = np.ascontiguousarray(signs[:, : grid.N, None])
    dB = np.ascontiguousarray(signs[:, grid.N:, None])
    return NoiseBundle(grid, dW, dB, TREE)
