"""Factor-graph core: variables, Gaussian noise models, factors and linearization.

A graph holds a set of keyed vector variables and a list of factors.  Each
factor produces a residual ``r`` over the variables it touches together with
its Jacobians; its cost is ``0.5 * r^T Sigma^-1 r``.  ``linearize`` stacks the
whitened Jacobians and residuals into a sparse least-squares system
``min ||A dx - b||^2`` whose solution is the Gauss-Newton step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

STATE_DIM = 4  # (x, y, vx, vy)

FACTOR_KINDS = ("gp_prior", "anchor", "obstacle", "proximity", "consistency", "affine")


class GraphError(Exception):
    """Base class for factor-graph errors."""


class UnresolvedVariableError(GraphError, KeyError):
    pass


class NoiseModelError(GraphError, ValueError):
    pass


class LinearizationError(GraphError, ArithmeticError):
    def __init__(self, message: str, factor_index: int):
        super().__init__(message)
        self.factor_index = factor_index


class VarKey(NamedTuple):
    agent_id: int
    time_index: int

    def __str__(self) -> str:
        return f"x[{self.agent_id},{self.time_index}]"


@dataclass(frozen=True)
class StateVariable:
    """Planar state of one agent at one support time."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(2)
        vel = np.asarray(self.velocity, dtype=float).reshape(2)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("state components must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)

    @classmethod
    def from_vector(cls, x) -> "StateVariable":
        x = np.asarray(x, dtype=float)
        return cls(x[:2], x[2:4])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


class NoiseModel:
    """Gaussian noise with covariance ``Sigma = L L^T``."""

    def __init__(self, covariance):
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise NoiseModelError(f"covariance must be square, got shape {cov.shape}")
        if not np.all(np.isfinite(cov)) or not np.allclose(cov, cov.T, rtol=1e-12, atol=0.0):
            raise NoiseModelError("covariance must be finite and symmetric")
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NoiseModelError("covariance is not positive definite") from exc
        self.covariance = cov
        self._diag = np.count_nonzero(cov - np.diag(np.diagonal(cov))) == 0
        self._inv_std = 1.0 / np.diagonal(self._chol)
        self._inv_col = self._inv_std[:, None]
        # explicit L^-1: blocks are tiny, so a matmul beats a triangular solve call
        self._inv_chol = scipy.linalg.solve_triangular(self._chol, np.eye(cov.shape[0]), lower=True)

    @classmethod
    def isotropic(cls, sigma: float, dim: int) -> "NoiseModel":
        return cls(np.eye(dim) * float(sigma) ** 2)

    @classmethod
    def diagonal(cls, sigmas: Sequence[float]) -> "NoiseModel":
        return cls(np.diag(np.asarray(sigmas, dtype=float) ** 2))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @property
    def sqrt_covariance(self) -> np.ndarray:
        return self._chol

    def whiten(self, r: np.ndarray) -> np.ndarray:
        """Return ``L^-1 r`` (vector) or ``L^-1 J`` (matrix)."""
        r = np.asarray(r, dtype=float)
        if r.shape[0] != self._inv_std.shape[0]:
            raise NoiseModelError(f"residual dimension {r.shape[0]} does not match noise dimension {self.dim}")
        if self._diag:
            return r * (self._inv_std if r.ndim == 1 else self._inv_col)
        return self._inv_chol @ r

    def unwhiten(self, r: np.ndarray) -> np.ndarray:
        return self._chol @ np.asarray(r, dtype=float)

    def mahalanobis_sq(self, r: np.ndarray) -> float:
        w = self.whiten(r)
        return float(w @ w)


def whiten(noise: NoiseModel, r) -> np.ndarray:
    return noise.whiten(np.asarray(r, dtype=float))


class Factor:
    """A residual term over one or more keyed variables.

    Subclasses implement ``residual`` and ``jacobians``; both receive the
    connected variable values in ``keys`` order.
    """

    kind = "affine"

    def __init__(self, keys: Sequence[VarKey], noise: NoiseModel):
        self.keys = tuple(VarKey(*k) for k in keys)
        self.noise = noise

    def residual(self, xs: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, xs: Sequence[np.ndarray]) -> list[np.ndarray]:
        raise NotImplementedError

    def cost(self, xs: Sequence[np.ndarray]) -> float:
        return 0.5 * self.noise.mahalanobis_sq(self.residual(xs))

    # Batched evaluation.  ``linearize`` groups factors of one class and shape
    # and calls these once per group; subclasses override them with vectorized
    # versions, the defaults just loop.

    @classmethod
    def prepare_batch(cls, factors: Sequence["Factor"]):
        """Per-group constants, computed once per graph."""
        return factors

    @classmethod
    def evaluate_batch(cls, ctx, xs: Sequence[np.ndarray], jacobians: bool = True):
        """Unwhitened residuals ``(n, m)`` and per-key Jacobians ``[(n, m, d_j)]``.

        ``xs[j]`` stacks the values of each factor's j-th key, shape ``(n, d_j)``.
        """
        rs, js = [], []
        for i, f in enumerate(ctx):
            vals = [x[i] for x in xs]
            rs.append(np.asarray(f.residual(vals), dtype=float).reshape(-1))
            if jacobians:
                js.append(f.jacobians(vals))
        r = np.array(rs)
        if not jacobians:
            return r, None
        m = r.shape[1]
        return r, [np.array([np.asarray(jf[j], dtype=float).reshape(m, -1) for jf in js]) for j in range(len(xs))]

    def __repr__(self) -> str:
        keys = ", ".join(str(k) for k in self.keys)
        return f"{type(self).__name__}({keys})"


class AffineFactor(Factor):
    """``r = sum_i A_i x_i - b``."""

    kind = "affine"

    def __init__(self, keys, matrices, b, noise: NoiseModel | None = None):
        self.matrices = [np.atleast_2d(np.asarray(m, dtype=float)) for m in matrices]
        self.b = np.atleast_1d(np.asarray(b, dtype=float))
        if noise is None:
            noise = NoiseModel(np.eye(self.b.shape[0]))
        super().__init__(keys, noise)
        if len(self.matrices) != len(self.keys):
            raise ValueError("one matrix per key required")

    def residual(self, xs):
        r = -self.b.copy()
        for m, x in zip(self.matrices, xs):
            r += m @ np.atleast_1d(x)
        return r

    def jacobians(self, xs):
        return [m.copy() for m in self.matrices]


Assignment = Mapping[VarKey, np.ndarray]


@dataclass
class FactorGraph:
    variables: dict = field(default_factory=dict)
    factors: list = field(default_factory=list)
    _plan: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def add_variable(self, key, value) -> None:
        self.variables[VarKey(*key)] = np.atleast_1d(np.asarray(value, dtype=float)).copy()

    def add(self, factor: Factor) -> None:
        self.factors.append(factor)

    def extend(self, factors: Iterable[Factor]) -> None:
        self.factors.extend(factors)

    def validate(self) -> None:
        for i, f in enumerate(self.factors):
            for k in f.keys:
                if k not in self.variables:
                    raise UnresolvedVariableError(f"factor {i} ({f!r}) references unknown variable {k}")

    def count_by_kind(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for f in self.factors:
            counts[f.kind] = counts.get(f.kind, 0) + 1
        return counts

    def initial_values(self) -> dict:
        return {k: v.copy() for k, v in self.variables.items()}


def _gather(factor: Factor, theta: Assignment, index: int) -> list[np.ndarray]:
    try:
        return [theta[k] for k in factor.keys]
    except KeyError as exc:
        raise UnresolvedVariableError(f"factor {index} ({factor!r}) references unassigned variable {exc.args[0]}") from None


@dataclass
class _Group:
    cls: type
    index: np.ndarray  # positions in graph.factors
    keys: list  # keys[j] = j-th key of every factor in the group
    ctx: object
    whiten: np.ndarray  # (n, m) diagonal scales or (n, m, m) inverse Cholesky factors
    diagonal: bool


def _batch_plan(graph: FactorGraph, theta: Assignment) -> list:
    """Group factors by class and residual/key shape; cached on the graph."""
    dims = {}
    for i, f in enumerate(graph.factors):
        for k in f.keys:
            if k not in dims:
                try:
                    dims[k] = np.shape(theta[k])[0] if np.ndim(theta[k]) else 1
                except KeyError:
                    raise UnresolvedVariableError(
                        f"factor {i} ({f!r}) references unassigned variable {k}"
                    ) from None
    sig = (tuple(map(id, graph.factors)), tuple(sorted(dims.items())))
    if graph._plan is not None and graph._plan[0] == sig:
        return graph._plan[1]
    buckets: dict = {}
    for i, f in enumerate(graph.factors):
        shape = (type(f), f.noise.dim, tuple(dims[k] for k in f.keys))
        buckets.setdefault(shape, []).append(i)
    groups = []
    for (cls, m, kd), idx in buckets.items():
        members = [graph.factors[i] for i in idx]
        diagonal = all(f.noise._diag for f in members)
        if diagonal:
            W = np.array([f.noise._inv_std for f in members]).reshape(len(idx), m)
        else:
            W = np.array([f.noise._inv_chol for f in members])
        groups.append(_Group(cls, np.asarray(idx), [[f.keys[j] for f in members] for j in range(len(kd))],
                             cls.prepare_batch(members), W, diagonal))
    graph._plan = (sig, groups)
    return groups


def _stack(keys, theta) -> np.ndarray:
    return np.array([np.atleast_1d(theta[k]) for k in keys], dtype=float)


def _whiten_batch(g: _Group, r: np.ndarray) -> np.ndarray:
    if g.diagonal:
        return g.whiten.reshape(g.whiten.shape + (1,) * (r.ndim - 2)) * r
    if r.ndim == 2:
        return np.einsum("nij,nj->ni", g.whiten, r)
    return np.einsum("nij,njd->nid", g.whiten, r)


def factor_costs(graph: FactorGraph, theta: Assignment) -> np.ndarray:
    out = np.zeros(len(graph.factors))
    for g in _batch_plan(graph, theta):
        r, _ = g.cls.evaluate_batch(g.ctx, [_stack(ks, theta) for ks in g.keys], jacobians=False)
        wr = _whiten_batch(g, r)
        out[g.index] = 0.5 * np.einsum("ni,ni->n", wr, wr)
    return out


def total_cost(graph: FactorGraph, theta: Assignment) -> float:
    """Sum of ``0.5 ||r_f||^2_Sigma`` over all factors."""
    return math.fsum(factor_costs(graph, theta))


@dataclass
class LinearSystem:
    """Whitened Gauss-Newton system ``min ||A dx - b||^2``.

    ``ordering`` maps each free key to its first column; ``row_blocks`` records
    for every factor its row range, which lets callers check the sparsity
    pattern against factor adjacency.
    """

    A: sp.csr_matrix
    b: np.ndarray
    ordering: dict
    dims: dict
    row_blocks: list

    @property
    def n_columns(self) -> int:
        return self.A.shape[1]

    def column_slice(self, key: VarKey) -> slice:
        start = self.ordering[key]
        return slice(start, start + self.dims[key])

    def key_at_column(self, col: int) -> VarKey:
        for k, start in self.ordering.items():
            if start <= col < start + self.dims[k]:
                return k
        raise IndexError(col)

    def adjacency(self) -> set[tuple[int, VarKey]]:
        return {(i, k) for i, (_, _, keys) in enumerate(self.row_blocks) for k in keys}


def variable_ordering(keys: Iterable[VarKey], dims: Mapping[VarKey, int]) -> dict:
    """Agent-major, time-minor column layout; keeps GP chains banded."""
    ordering = {}
    col = 0
    for k in sorted(keys):
        ordering[k] = col
        col += dims[k]
    return ordering


def _check_finite(b, data, rows, row_blocks) -> None:
    """Name the first factor with a non-finite residual or Jacobian entry."""
    if np.isfinite(b).all() and np.isfinite(data).all():
        return
    bad_rows = set(np.flatnonzero(~np.isfinite(b)))
    bad_rows.update(rows[~np.isfinite(data)])
    first = min(bad_rows)
    for i, rs, _ in row_blocks:
        if rs.start <= first < rs.stop:
            what = "residual" if not np.isfinite(b[rs]).all() else "Jacobian"
            raise LinearizationError(f"non-finite {what} in factor {i}", i)


def linearize(graph: FactorGraph, theta: Assignment, fixed: Iterable[VarKey] = ()) -> LinearSystem:
    """Stack whitened Jacobians and negated whitened residuals.

    Keys in ``fixed`` receive no columns; factors touching only fixed keys are
    skipped.  Rows follow factor order.
    """
    fixed = frozenset(fixed)
    dims = {k: np.atleast_1d(theta[k]).shape[0] for k in graph.variables if k not in fixed}
    ordering = variable_ordering(dims.keys(), dims)
    groups = _batch_plan(graph, theta)
    n_f = len(graph.factors)
    heights = np.zeros(n_f, dtype=int)
    evaluated = []
    for g in groups:
        cols = [np.array([ordering.get(k, -1) for k in ks]) for ks in g.keys]
        active = np.any(np.stack(cols) >= 0, axis=0)
        if not active.any():
            continue
        sub = np.flatnonzero(active)
        full = len(sub) == len(active)
        ctx = g.ctx if full else g.cls.prepare_batch([graph.factors[i] for i in g.index[sub]])
        sg = g if full else _Group(g.cls, g.index[sub], None, ctx, g.whiten[sub], g.diagonal)
        xs = [_stack(ks, theta)[sub] for ks in g.keys]
        r, J = g.cls.evaluate_batch(ctx, xs)
        heights[sg.index] = r.shape[1]
        evaluated.append((sg, [c[sub] for c in cols], _whiten_batch(sg, r), [_whiten_batch(sg, Jj) for Jj in J]))
    starts = np.concatenate([[0], np.cumsum(heights)])
    n_rows = int(starts[-1])
    b = np.zeros(n_rows)
    rows, cols, vals = [], [], []
    for g, col_lists, wr, WJ in evaluated:
        n, m = wr.shape
        r0 = starts[g.index]
        row_idx = r0[:, None] + np.arange(m)[None, :]
        b[row_idx.ravel()] = -wr.ravel()
        for c0, WJj in zip(col_lists, WJ):
            free = c0 >= 0
            if not free.any():
                continue
            d = WJj.shape[2]
            rr = np.broadcast_to(row_idx[free][:, :, None], (free.sum(), m, d))
            cc = np.broadcast_to(c0[free][:, None, None] + np.arange(d)[None, None, :], (free.sum(), m, d))
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(WJj[free].ravel())
    row_blocks = [
        (i, slice(int(starts[i]), int(starts[i + 1])), tuple(k for k in f.keys if k not in fixed))
        for i, f in enumerate(graph.factors) if heights[i] > 0
    ]
    n_cols = sum(dims.values())
    data = np.concatenate(vals) if vals else np.zeros(0)
    rr = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
    _check_finite(b, data, rr, row_blocks)
    A = sp.coo_matrix((data, (rr, np.concatenate(cols) if cols else rr)), shape=(n_rows, n_cols)).tocsr()
    return LinearSystem(A=A, b=b, ordering=ordering, dims=dims, row_blocks=row_blocks)


def apply_step(theta: Assignment, step: np.ndarray, system: LinearSystem) -> dict:
    out = {k: np.array(v, dtype=float, copy=True) for k, v in theta.items()}
    for k, start in system.ordering.items():
        out[k] = out[k] + step[start:start + system.dims[k]]
    return out
