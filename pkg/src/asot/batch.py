"""
Batch execution of many OT problems.

Three schedules are provided and all of them reproduce the one-by-one
:func:`asot.transport.sinkhorn` results:

* :func:`batched_sinkhorn_fixed` -- fixed-size problems sharing one cost
  matrix; marginals are stacked as columns of ``k x N`` matrices.
* :func:`bds_sinkhorn` -- size-variable problems; per-pair kernels are
  stacked along a block diagonal, stored as a flat segmented array.
* :func:`pairwise_matrix` -- the driver that fills a pairwise distance
  matrix under any of the strategies.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import AsotError, InvalidArgumentError, NumericalError
from .transport import (
    SinkhornConfig,
    as_simplex,
    check_cost,
    euclidean_cost,
    sinkhorn,
    solve_exact,
)

STRATEGIES = ("exact", "sinkhorn-one-by-one", "bds-sinkhorn", "easot-batched")


@dataclass
class ProblemSet:
    """A collection of distributions plus the index pairs to transport."""

    distributions: list
    pairs: np.ndarray

    def __post_init__(self):
        self.distributions = list(self.distributions)
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        n = len(self.distributions)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
            raise InvalidArgumentError(f"pair index out of range for {n} distributions")
        if np.any(pairs[:, 0] == pairs[:, 1]):
            raise InvalidArgumentError("self-pairs are not allowed")
        if len({tuple(p) for p in pairs.tolist()}) != len(pairs):
            raise InvalidArgumentError("pairs must be unique")
        self.pairs = pairs

    @classmethod
    def all_pairs(cls, distributions):
        n = len(distributions)
        i, j = np.triu_indices(n, k=1)
        return cls(distributions, np.stack([i, j], axis=1))

    def __len__(self):
        return len(self.pairs)


@dataclass
class BatchedMarginals:
    """Source and target marginals stacked column-wise, both ``k x N``."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        if A.shape != B.shape:
            raise InvalidArgumentError(f"A and B shapes differ: {A.shape} vs {B.shape}")
        if np.any(A < 0) or np.any(B < 0) or not (np.isfinite(A).all() and np.isfinite(B).all()):
            raise InvalidArgumentError("marginals must be finite and nonnegative")
        for M, name in ((A, "A"), (B, "B")):
            if A.shape[1] and np.abs(M.sum(axis=0) - 1).max() > 1e-9:
                raise InvalidArgumentError(f"columns of {name} are not on the probability simplex")
        self.A, self.B = A, B

    @classmethod
    def from_pairs(cls, sources, targets):
        return cls(np.stack(sources, axis=1), np.stack(targets, axis=1))

    @property
    def size(self):
        return self.A.shape[1]


@dataclass
class DistanceMatrix:
    """Pairwise results. Unfilled entries hold NaN and are False in the mask."""

    values: np.ndarray
    filled_mask: np.ndarray
    errors: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, n):
        values = np.full((n, n), np.nan)
        np.fill_diagonal(values, 0.0)
        return cls(values, np.zeros((n, n), dtype=bool))

    def fill(self, i, j, value):
        self.values[i, j] = self.values[j, i] = value
        self.filled_mask[i, j] = self.filled_mask[j, i] = True

    def to_dense(self, fill_value=0.0):
        out = np.where(self.filled_mask, self.values, fill_value)
        np.fill_diagonal(out, 0.0)
        return out


def batched_sinkhorn_fixed(marginals, C_s, cfg=None, log=False):
    """Sinkhorn on N problems that share a single ``k x k`` cost matrix.

    ``U = A / (K V)`` and ``V = B / (K^T U)`` update all columns at once. Column
    ``i`` follows exactly the arithmetic of the single-pair solver, so
    results agree with it to rounding.

    A column that turns NaN is reported as ``nan`` and flagged in
    ``log["failed"]``; the other columns are unaffected.
    """
    cfg = cfg or SinkhornConfig()
    A, B = marginals.A, marginals.B
    k, N = A.shape
    C_s = check_cost(C_s, (k, k))
    K = np.exp(-C_s / cfg.epsilon)
    floor = cfg.underflow_floor
    clamped = np.zeros(N, dtype=bool)
    V = np.ones((k, N))
    U = np.ones((k, N))
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.iterations):
            KV = K @ V
            low = KV < floor
            if low.any():
                clamped |= low.any(axis=0)
                KV[low] = floor
            U = A / KV
            KTU = K.T @ U
            low = KTU < floor
            if low.any():
                clamped |= low.any(axis=0)
                KTU[low] = floor
            V = B / KTU
        costs = np.einsum("in,in->n", U, (K * C_s) @ V)
    failed = ~(np.isfinite(U).all(axis=0) & np.isfinite(V).all(axis=0) & np.isfinite(costs))
    costs[failed] = np.nan
    if clamped.any():
        warnings.warn(
            f"Sinkhorn denominators underflowed in {int(clamped.sum())} column(s)",
            RuntimeWarning,
            stacklevel=2,
        )
    if log:
        return costs, {"U": U, "V": V, "clamped": clamped, "failed": failed}
    return costs


class BlockDiagonalKernel:
    """Block-diagonal stack of per-pair Gibbs kernels without off-block storage.

    Each entry of the stacked matrix that lies inside a diagonal block is kept
    as ``(row, col, value)`` in flat arrays; off-block entries do not exist, so
    they can never contribute to a product.
    """

    def __init__(self, values, costs, rows, cols, block, row_offsets, col_offsets):
        self.values = values
        self.costs = costs
        self.rows = rows
        self.cols = cols
        self.block = block
        self.row_offsets = row_offsets
        self.col_offsets = col_offsets

    @property
    def shape(self):
        return int(self.row_offsets[-1]), int(self.col_offsets[-1])

    @property
    def n_blocks(self):
        return len(self.row_offsets) - 1

    @classmethod
    def from_costs(cls, costs, epsilon):
        row_sizes = np.array([c.shape[0] for c in costs], dtype=np.int64)
        col_sizes = np.array([c.shape[1] for c in costs], dtype=np.int64)
        row_offsets = np.concatenate([[0], np.cumsum(row_sizes)])
        col_offsets = np.concatenate([[0], np.cumsum(col_sizes)])
        rows, cols, block = [], [], []
        for p, (n, m) in enumerate(zip(row_sizes, col_sizes)):
            r, c = np.divmod(np.arange(n * m), m)
            rows.append(r + row_offsets[p])
            cols.append(c + col_offsets[p])
            block.append(np.full(n * m, p))
        flat_costs = np.concatenate([np.ravel(c) for c in costs])
        return cls(
            np.exp(-flat_costs / epsilon),
            flat_costs,
            np.concatenate(rows),
            np.concatenate(cols),
            np.concatenate(block),
            row_offsets,
            col_offsets,
        )

    @classmethod
    def from_dense(cls, kernel, costs, row_sizes, col_sizes):
        """Extract the diagonal blocks of a dense stacked kernel.

        Entries outside the block mask are never read, whatever they hold.
        """
        row_offsets = np.concatenate([[0], np.cumsum(row_sizes)])
        col_offsets = np.concatenate([[0], np.cumsum(col_sizes)])
        mask = block_mask(row_sizes, col_sizes)
        rows, cols = np.nonzero(mask)
        block = np.searchsorted(row_offsets, rows, side="right") - 1
        return cls(kernel[rows, cols], costs[rows, cols], rows, cols, block, row_offsets, col_offsets)

    def to_dense(self, fill_value=0.0):
        out = np.full(self.shape, fill_value, dtype=np.float64)
        out[self.rows, self.cols] = self.values
        return out

    def matvec(self, v):
        return np.bincount(self.rows, weights=self.values * v[self.cols], minlength=self.shape[0])

    def rmatvec(self, u):
        return np.bincount(self.cols, weights=self.values * u[self.rows], minlength=self.shape[1])


def block_mask(row_sizes, col_sizes):
    row_offsets = np.concatenate([[0], np.cumsum(row_sizes)])
    col_offsets = np.concatenate([[0], np.cumsum(col_sizes)])
    mask = np.zeros((row_offsets[-1], col_offsets[-1]), dtype=bool)
    for p in range(len(row_sizes)):
        mask[row_offsets[p]:row_offsets[p + 1], col_offsets[p]:col_offsets[p + 1]] = True
    return mask


def sinkhorn_block_diagonal(kernel, a_stack, b_stack, cfg, log=False):
    """Run stacked Sinkhorn updates on a :class:`BlockDiagonalKernel`."""
    floor = cfg.underflow_floor
    n_rows, n_cols = kernel.shape
    u = np.ones(n_rows)
    v = np.ones(n_cols)
    clamped = False
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.iterations):
            Kv = kernel.matvec(v)
            low = Kv < floor
            if low.any():
                clamped = True
                Kv[low] = floor
            u = a_stack / Kv
            KTu = kernel.rmatvec(u)
            low = KTu < floor
            if low.any():
                clamped = True
                KTu[low] = floor
            v = b_stack / KTu
        plan = u[kernel.rows] * kernel.values * v[kernel.cols]
    costs = np.bincount(kernel.block, weights=plan * kernel.costs, minlength=kernel.n_blocks)
    bad = np.bincount(kernel.block, weights=~np.isfinite(plan), minlength=kernel.n_blocks) > 0
    costs[bad] = np.nan
    if clamped:
        warnings.warn("Sinkhorn denominators underflowed and were clamped", RuntimeWarning, stacklevel=2)
    if log:
        return costs, {"u": u, "v": v, "clamped": clamped, "failed": bad}
    return costs


def bds_sinkhorn(problems, metric=euclidean_cost, cfg=None, log=False):
    """Block-diagonal-stacked Sinkhorn over every pair of ``problems``.

    Parameters
    ----------
    problems : ProblemSet
        Distributions may have different sizes.
    metric : callable
        ``metric(X, Y)`` returns the ground cost between two sample matrices.
    cfg : SinkhornConfig, optional

    Returns
    -------
    costs : ndarray, shape (len(problems),)
        Linear transport cost per pair; ``nan`` for pairs that failed.
    """
    dists = problems.distributions

    def pair_cost(i, j):
        return metric(dists[i].samples, dists[j].samples)

    return _bds(problems, pair_cost, cfg or SinkhornConfig(), log)


def _bds(problems, pair_cost, cfg, log=False):
    if len(problems) == 0:
        return (np.zeros(0), {"failed": np.zeros(0, bool)}) if log else np.zeros(0)
    dists = problems.distributions
    costs, a_parts, b_parts = [], [], []
    for i, j in problems.pairs.tolist():
        a, b = as_simplex(dists[i].mass), as_simplex(dists[j].mass)
        costs.append(check_cost(pair_cost(i, j), (a.size, b.size)))
        a_parts.append(a)
        b_parts.append(b)
    kernel = BlockDiagonalKernel.from_costs(costs, cfg.epsilon)
    return sinkhorn_block_diagonal(kernel, np.concatenate(a_parts), np.concatenate(b_parts), cfg, log=log)


def _chunks(n, size):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _unordered(pairs):
    seen = set()
    keep = []
    for i, j in pairs.tolist():
        key = (min(i, j), max(i, j))
        if key not in seen:
            seen.add(key)
            keep.append(key)
    return np.array(keep, dtype=np.int64).reshape(-1, 2)


def pairwise_matrix(
    problems,
    solver="exact",
    cfg=None,
    metric=euclidean_cost,
    shared_cost=None,
    chunk_size=1024,
    threads=1,
):
    """Fill a :class:`DistanceMatrix` for every pair in ``problems``.

    ``shared_cost`` replaces ``metric`` when all distributions live on the
    same support (anchor-space problems); it is required by the
    ``"easot-batched"`` strategy. Each unordered pair is solved once and
    written symmetrically. Solver failures leave the entry unfilled and are
    recorded in ``DistanceMatrix.errors``.
    """
    if solver not in STRATEGIES:
        raise InvalidArgumentError(f"unknown solver {solver!r}; expected one of {STRATEGIES}")
    cfg = cfg or SinkhornConfig()
    dists = problems.distributions
    out = DistanceMatrix.empty(len(dists))
    pairs = _unordered(problems.pairs)
    if len(pairs) == 0:
        return out

    def cost_of(i, j):
        if shared_cost is not None:
            return shared_cost
        return metric(dists[i].samples, dists[j].samples)

    if solver in ("exact", "sinkhorn-one-by-one"):
        solve = solve_exact if solver == "exact" else (lambda a, b, C: sinkhorn(a, b, C, cfg))

        def task(pair):
            i, j = pair
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    return solve(dists[i].mass, dists[j].mass, cost_of(i, j))[1], None
            except AsotError as exc:
                return np.nan, exc

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(task, pairs.tolist()))
        else:
            results = [task(p) for p in pairs.tolist()]
        for (i, j), (value, exc) in zip(pairs.tolist(), results):
            if exc is None:
                out.fill(i, j, value)
            else:
                out.errors[(i, j)] = exc
        return out

    if solver == "easot-batched":
        if shared_cost is None:
            raise InvalidArgumentError("easot-batched needs the shared anchor cost matrix")
        masses = np.stack([as_simplex(d.mass) for d in dists], axis=1)
        values = np.empty(len(pairs))
        failed = np.zeros(len(pairs), dtype=bool)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for sl in _chunks(len(pairs), chunk_size):
                chunk = pairs[sl]
                marg = BatchedMarginals(masses[:, chunk[:, 0]], masses[:, chunk[:, 1]])
                values[sl], info = batched_sinkhorn_fixed(marg, shared_cost, cfg, log=True)
                failed[sl] = info["failed"]
    else:
        values = np.empty(len(pairs))
        failed = np.zeros(len(pairs), dtype=bool)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for sl in _chunks(len(pairs), chunk_size):
                values[sl], info = _bds(ProblemSet(dists, pairs[sl]), cost_of, cfg, log=True)
                failed[sl] = info["failed"]
    for (i, j), value, bad in zip(pairs.tolist(), values, failed):
        if bad:
            out.errors[(i, j)] = NumericalError("Sinkhorn produced non-finite values")
        else:
            out.fill(i, j, value)
    return out
