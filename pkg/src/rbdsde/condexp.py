"""Conditional expectations ``E_i[.]`` given the information at grid index ``i``.

Two engines share one interface, ``engine.expect(i, values)``:

``TreeEngine``
    exact averages over the enumerated Rademacher sample space;
``RegressionEngine``
    least-squares projection on features known at ``i`` (ridge-regularised
    normal equations, accumulated block by block in a fixed order so the
    result does not depend on the number of worker threads).
"""

from __future__ import annotations

from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
import scipy.linalg

from .noise import NoiseBundle

MONOMIAL = "monomial"
INDICATOR = "indicator"
PARTITION = "partition"
REFINE_STEPS = 2


class ConditioningError(np.linalg.LinAlgError):
    """Normal equations are singular and no ridge was requested."""


@dataclass(frozen=True)
class RegressionBasis:
    """Feature map for the regression engine.

    ``monomial`` uses every monomial of total degree <= ``degree`` in
    ``(W_{t_i}, B_T - B_{t_i})``; ``indicator`` uses one indicator per
    distinct pattern of known increments, which is saturated on a tree;
    ``partition`` uses one indicator per non-empty cell of a ``bins`` x ``bins``
    grid of marginal quantiles of the same two variables. Indicator-type
    fits are local averages, so they preserve order (``u <= v`` implies
    ``E_i[u] <= E_i[v]``), which polynomial least squares does not.
    ``ridge=None`` selects ``1e-10 * trace(X'X) / k`` for monomials and no
    ridge for the indicator kinds. The ridge solve is followed by two
    refinement steps, so well-conditioned fits are effectively unbiased.
    """

    degree: int = 2
    ridge: float | None = None
    kind: str = MONOMIAL
    block: int = 8192
    bins: int = 8

    def __post_init__(self):
        if self.kind not in (MONOMIAL, INDICATOR, PARTITION):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.block < 1:
            raise ValueError("block must be >= 1")


def _as_2d(values, P):
    v = np.asarray(values, dtype=float)
    if v.shape[0] != P:
        raise ValueError(f"expected {P} paths, got array of shape {v.shape}")
    return v.reshape(P, -1), v.shape


class TreeEngine:
    name = "tree"

    def __init__(self, bundle: NoiseBundle):
        if not bundle.is_tree:
            raise ValueError("the exact engine needs a rademacher-tree bundle")
        self.bundle = bundle
        self.N = bundle.N

    def unknown_axes(self, i: int) -> tuple:
        N = self.N
        return tuple(range(i, N)) + tuple(range(N, N + i))

    def expect(self, i: int, values) -> np.ndarray:
        if not 0 <= i <= self.N:
            raise IndexError(f"grid index {i} out of range")
        v, shape = _as_2d(values, self.bundle.P)
        m = v.shape[1]
        cube = v.reshape((2,) * (2 * self.N) + (m,))
        axes = self.unknown_axes(i)
        if axes:
            cube = np.broadcast_to(cube.mean(axis=axes, keepdims=True), cube.shape)
        return np.ascontiguousarray(cube).reshape(shape)


def exact_condexp(bundle: NoiseBundle, i: int, values) -> np.ndarray:
    return TreeEngine(bundle).expect(i, values)


def _exponents(nvars: int, degree: int):
    out = [()]
    for deg in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(nvars), deg))
    return out


class RegressionEngine:
    name = "regression"

    def __init__(self, bundle: NoiseBundle, basis: RegressionBasis | None = None, threads: int = 1):
        self.bundle = bundle
        self.basis = basis or RegressionBasis()
        self.threads = max(1, int(threads))
        self._factors: dict = {}
        self._groups: dict = {}
        self._features: OrderedDict = OrderedDict()

    # -- features ---------------------------------------------------------

    def _variables(self, i: int) -> np.ndarray:
        parts = []
        if i > 0:
            parts.append(self.bundle.W(i))
        if i < self.bundle.N:
            parts.append(self.bundle.B_future(i))
        if not parts:
            return np.zeros((self.bundle.P, 0))
        return np.concatenate(parts, axis=1)

    def _group_index(self, i: int):
        if i not in self._groups:
            if self.basis.kind == PARTITION:
                known = self._cells(i)
            else:
                known = self.bundle.known_columns(i)
            if known.shape[1] == 0:
                idx = np.zeros(self.bundle.P, dtype=np.int64)
                k = 1
            else:
                _, idx = np.unique(known, axis=0, return_inverse=True)
                idx = idx.reshape(-1)
                k = int(idx.max()) + 1
            self._groups[i] = (idx, k)
        return self._groups[i]

    def _cells(self, i: int) -> np.ndarray:
        x = self._variables(i)
        q = np.linspace(0.0, 1.0, self.basis.bins + 1)[1:-1]
        cols = [np.searchsorted(np.quantile(x[:, c], q), x[:, c], side="right") for c in range(x.shape[1])]
        return np.stack(cols, axis=1) if cols else np.zeros((x.shape[0], 0))

    def n_features(self, i: int) -> int:
        if self.basis.kind != MONOMIAL:
            return self._group_index(i)[1]
        return len(_exponents(self._variables(i).shape[1], self.basis.degree))

    def features(self, i: int, start: int, stop: int) -> np.ndarray:
        if self.basis.kind != MONOMIAL:
            idx, k = self._group_index(i)
            X = np.zeros((stop - start, k))
            X[np.arange(stop - start), idx[start:stop]] = 1.0
            return X
        x = self._variables(i)[start:stop]
        cols = []
        for exps in _exponents(x.shape[1], self.basis.degree):
            c = np.ones(stop - start)
            for e in exps:
                c = c * x[:, e]
            cols.append(c)
        return np.stack(cols, axis=1)

    def _blocks(self):
        P, b = self.bundle.P, self.basis.block
        return [(s, min(s + b, P)) for s in range(0, P, b)]

    def _map(self, fn, items):
        if self.threads == 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def _block_features(self, i: int):
        if i in self._features:
            self._features.move_to_end(i)
            return self._features[i]
        feats = self._map(lambda se: self.features(i, *se), self._blocks())
        self._features[i] = feats
        while len(self._features) > 2:
            self._features.popitem(last=False)
        return feats

    # -- normal equations -------------------------------------------------

    def _factor(self, i: int):
        if i in self._factors:
            return self._factors[i]
        feats = self._block_features(i)
        k = feats[0].shape[1]
        if self.bundle.P < 10 * k:
            raise ValueError(f"{self.bundle.P} paths is fewer than 10x the {k} features at index {i}")
        grams = self._map(lambda X: X.T @ X, feats)
        gram = np.zeros((k, k))
        for gpart in grams:
            gram += gpart
        ridge = self.basis.ridge
        if ridge is None:
            ridge = 0.0 if self.basis.kind != MONOMIAL else 1e-10 * np.trace(gram) / k
        A = gram + ridge * np.eye(k)
        if ridge == 0.0:
            w = np.linalg.eigvalsh(A)
            if w[0] <= 1e-13 * max(w[-1], 1e-300):
                raise ConditioningError(
                    f"normal equations at index {i} are rank deficient; use ridge > 0")
        try:
            fac = scipy.linalg.cho_factor(A, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(f"normal equations at index {i} are not positive definite") from exc
        self._factors[i] = (fac, gram)
        return self._factors[i]

    def coefficients(self, i: int, values) -> np.ndarray:
        v, _ = _as_2d(values, self.bundle.P)
        fac, gram = self._factor(i)
        feats = self._block_features(i)
        rhs_parts = self._map(lambda a: a[0].T @ v[a[1][0]:a[1][1]], list(zip(feats, self._blocks())))
        rhs = np.zeros((feats[0].shape[1], v.shape[1]))
        for part in rhs_parts:
            rhs += part
        beta = scipy.linalg.cho_solve(fac, rhs)
        # iterated Tikhonov: well-posed directions converge to the unregularised
        # fit, near-null ones stay damped by the ridge
        for _ in range(REFINE_STEPS):
            beta = beta + scipy.linalg.cho_solve(fac, rhs - gram @ beta)
        return beta

    def expect(self, i: int, values) -> np.ndarray:
        v, shape = _as_2d(values, self.bundle.P)
        beta = self.coefficients(i, v)
        fitted = self._map(lambda X: X @ beta, self._block_features(i))
        return np.concatenate(fitted, axis=0).reshape(shape)


def regress_condexp(bundle: NoiseBundle, i: int, values, basis: RegressionBasis | None = None,
                    threads: int = 1) -> np.ndarray:
    return RegressionEngine(bundle, basis, threads).expect(i, values)


def make_engine(bundle: NoiseBundle, engine: str | None = None, basis: RegressionBasis | None = None,
                threads: int = 1):
    """Engine by name; ``None`` picks the exact engine for trees, regression otherwise."""
    if engine is None:
        engine = "tree" if bundle.is_tree else "regression"
    if engine == "tree":
        return TreeEngine(bundle)
    if engine == "regression":
        return RegressionEngine(bundle, basis, threads)
    raise ValueError(f"unknown engine {engine!r}")
