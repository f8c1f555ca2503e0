"""
Anchor learning by mini-batch k-means, and the nearest-anchor one-hot encoder.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .anchor import AnchorSpace, onehot
from .errors import InvalidArgumentError

PAD_JITTER = 1e-9


@dataclass(frozen=True)
class KmeansConfig:
    k: int
    batch_size: int = 1024
    max_iters: int = 300
    seed: int = 0
    tol: float = 1e-6

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("k must be at least 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be at least 1")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be at least 1")
        if self.tol < 0:
            raise InvalidArgumentError("tol must be nonnegative")


def _sqdist(X, centers):
    return cdist(X, centers, metric="sqeuclidean")


def inertia(X, centers):
    """Total squared distance of every sample to its nearest center."""
    return float(_sqdist(X, centers).min(axis=1).sum())


def _pad(X, n_missing, start):
    # duplicate samples cyclically, nudged so no two centers coincide
    d = X.shape[1]
    rows = []
    for j in range(n_missing):
        rows.append(X[j % X.shape[0]] + PAD_JITTER * (start + j + 1) * np.ones(d))
    return np.array(rows).reshape(n_missing, d)


def kmeans_plus_plus(X, k, rng, init=None):
    """D^2 seeding. Existing ``init`` centers are kept and extended."""
    centers = [] if init is None else [c for c in np.atleast_2d(init)]
    if len(centers) > k:
        raise InvalidArgumentError(f"init has {len(centers)} centers, more than k={k}")
    if not centers:
        centers.append(X[rng.integers(X.shape[0])])
    closest = _sqdist(X, np.array(centers)).min(axis=1)
    while len(centers) < k:
        total = closest.sum()
        if total <= 0:
            centers.extend(_pad(X, k - len(centers), len(centers)))
            break
        idx = rng.choice(X.shape[0], p=closest / total)
        centers.append(X[idx])
        closest = np.minimum(closest, _sqdist(X, X[idx][None])[:, 0])
    return np.array(centers, dtype=np.float64)


def _lloyd_step(X, centers):
    d2 = _sqdist(X, centers)
    labels = d2.argmin(axis=1)
    new = centers.copy()
    counts = np.bincount(labels, minlength=len(centers))
    for c in np.nonzero(counts)[0]:
        new[c] = X[labels == c].mean(axis=0)
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        resid = ((X - new[labels]) ** 2).sum(axis=1)
        order = np.argsort(-resid, kind="stable")
        for c, idx in zip(empty, order):
            new[c] = X[idx]
    return new


def _minibatch_pass(X, centers, counts, batch_size, rng):
    centers = centers.copy()
    perm = rng.permutation(X.shape[0])
    for start in range(0, X.shape[0], batch_size):
        batch = X[perm[start:start + batch_size]]
        labels = _sqdist(batch, centers).argmin(axis=1)
        for x, c in zip(batch, labels):
            counts[c] += 1
            centers[c] += (x - centers[c]) / counts[c]
    return centers


def fit_kmeans(samples, cfg, init=None, log=False):
    """Fit ``cfg.k`` anchors to the pooled ``samples`` (S x d).

    Passes over the data are mini-batch k-means sweeps. A sweep that would
    raise the total within-cluster squared error is replaced by a full Lloyd
    step from the previous centers, so the recorded inertia never increases.
    Iteration stops once no center moves more than ``cfg.tol``.

    ``init`` (an :class:`AnchorSpace` or an array of at most k centers) warm
    starts the fit; missing centers are added by k-means++ seeding. Fewer
    distinct samples than k yields padded duplicate anchors.

    Returns an Euclidean :class:`AnchorSpace`, plus an info dict with the
    ``inertia`` trace when ``log`` is true.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] < 1:
        raise InvalidArgumentError("k-means needs at least one sample")
    if not np.isfinite(X).all():
        raise InvalidArgumentError("samples have non-finite entries")
    rng = np.random.default_rng(cfg.seed)
    if isinstance(init, AnchorSpace):
        init = init.anchors
    centers = kmeans_plus_plus(X, cfg.k, rng, init)
    trace = [inertia(X, centers)]
    counts = np.zeros(cfg.k)
    full_batch = cfg.batch_size >= X.shape[0]
    n_iter = 0
    for n_iter in range(1, cfg.max_iters + 1):
        if full_batch:
            proposal = _lloyd_step(X, centers)
        else:
            proposal = _minibatch_pass(X, centers, counts, cfg.batch_size, rng)
            if inertia(X, proposal) > trace[-1]:
                proposal = _lloyd_step(X, centers)
        shift = np.sqrt(((proposal - centers) ** 2).sum(axis=1)).max()
        centers = proposal
        trace.append(inertia(X, centers))
        if shift <= cfg.tol:
            break
    space = AnchorSpace(centers)
    if log:
        return space, {"inertia": trace, "n_iter": n_iter}
    return space


def nearest_anchor(X, space):
    """Index of the closest anchor for each row of ``X``; ties go to the lowest index."""
    if space.metric != "euclidean":
        raise InvalidArgumentError("one-hot encoding requires the Euclidean anchor metric")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != space.dim:
        raise InvalidArgumentError(f"sample dimension {X.shape[1]} != anchor dimension {space.dim}")
    return cdist(X, space.anchors, metric="euclidean").argmin(axis=1)


def encode_onehot(x, space):
    """One-hot code row of the anchor nearest to ``x``."""
    return onehot(nearest_anchor(np.asarray(x)[None, :], space), space.k)[0]


def encode_onehot_batch(X, space):
    """Return ``(Z, residual_norms)`` for every row of ``X``."""
    idx = nearest_anchor(X, space)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    resid = np.linalg.norm(space.anchors[idx] - X, axis=1)
    return onehot(idx, space.k), resid
