"""
Anchor-space translation of OT problems.

Samples are encoded as rows of a code matrix ``Z`` (each row on the
probability simplex over ``k`` anchors). A distribution with masses ``a`` is
mapped to ``a' = Z^T a`` and transported over the anchors with the shared
``k x k`` anchor cost ``C_s``. The exact value equals an ordinary OT problem
under the reconstructed cost ``Z_x C_s Z_y^T``, which also yields the
L1 error bound against the true ground cost.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import InvalidArgumentError, ParseError
from .transport import SinkhornConfig, euclidean_cost, sinkhorn, solve_exact

METRICS = ("euclidean", "mahalanobis")
ENCODING_TOL = 1e-6
FORMAT_TAG = "asot.anchor-space"
FORMAT_VERSION = 1


def _frozen(x):
    x = np.array(x, dtype=np.float64)
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class AnchorSpace:
    """``k`` anchor points (rows of ``anchors``) and the metric between them.

    For the Mahalanobis metric, ``transform`` is the ``h x d`` matrix ``M`` and
    ``d(w, w') = ||M w - M w'||_2``.
    """

    anchors: np.ndarray
    metric: str = "euclidean"
    transform: np.ndarray = None

    def __post_init__(self):
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
        if anchors.ndim != 2 or anchors.shape[0] < 1:
            raise InvalidArgumentError(f"anchors must be a k x d matrix with k >= 1, got {anchors.shape}")
        if not np.isfinite(anchors).all():
            raise InvalidArgumentError("anchors have non-finite entries")
        if self.metric not in METRICS:
            raise InvalidArgumentError(f"unknown anchor metric {self.metric!r}")
        transform = None
        if self.metric == "mahalanobis":
            if self.transform is None:
                raise InvalidArgumentError("mahalanobis metric needs a transform matrix")
            transform = np.atleast_2d(np.asarray(self.transform, dtype=np.float64))
            if transform.shape[1] != anchors.shape[1]:
                raise InvalidArgumentError(
                    f"transform has {transform.shape[1]} columns, anchors have dimension {anchors.shape[1]}"
                )
            if not np.isfinite(transform).all():
                raise InvalidArgumentError("transform has non-finite entries")
            transform = _frozen(transform)
        elif self.transform is not None:
            raise InvalidArgumentError("a transform is only meaningful for the mahalanobis metric")
        object.__setattr__(self, "anchors", _frozen(anchors))
        object.__setattr__(self, "transform", transform)

    @property
    def k(self):
        return self.anchors.shape[0]

    @property
    def dim(self):
        return self.anchors.shape[1]

    def embedded(self):
        """Anchors in the coordinates where the metric is Euclidean."""
        if self.metric == "mahalanobis":
            return self.anchors @ self.transform.T
        return self.anchors

    def to_record(self):
        record = {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "k": self.k,
            "d": self.dim,
            "metric": self.metric,
            "anchors": self.anchors.ravel().tolist(),
            "transform_rows": None,
            "transform": None,
        }
        if self.transform is not None:
            record["transform_rows"] = self.transform.shape[0]
            record["transform"] = self.transform.ravel().tolist()
        return record

    @classmethod
    def from_record(cls, record):
        if record.get("format") != FORMAT_TAG:
            raise ParseError(f"not an anchor-space record: format={record.get('format')!r}")
        if record.get("version") != FORMAT_VERSION:
            raise ParseError(f"unsupported anchor-space version {record.get('version')!r}")
        k, d = int(record["k"]), int(record["d"])
        anchors = np.asarray(record["anchors"], dtype=np.float64)
        if anchors.size != k * d:
            raise ParseError(f"expected {k * d} anchor values, found {anchors.size}")
        transform = None
        if record.get("transform") is not None:
            h = int(record["transform_rows"])
            transform = np.asarray(record["transform"], dtype=np.float64).reshape(h, d)
        return cls(anchors.reshape(k, d), record["metric"], transform)


def save_anchor_space(space, path, model=None):
    """Write ``space`` (and an optional model checkpoint) as one JSON document.

    Floats are written with ``repr`` precision, so a load round-trips every
    value bit-exactly. Field order: format, version, k, d, metric, anchors
    (row-major), transform_rows, transform (row-major or null), then ``model``
    when given.
    """
    record = space.to_record()
    if model is not None:
        record["model"] = model
    Path(path).write_text(json.dumps(record))


def load_anchor_space(path):
    """Return ``(space, model_record_or_None)`` from :func:`save_anchor_space` output."""
    try:
        record = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path=path, line=exc.lineno) from exc
    return AnchorSpace.from_record(record), record.get("model")


@dataclass
class MappedDistribution:
    """Masses over the ``k`` anchors of an anchor space."""

    mass: np.ndarray

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=np.float64)
        if mass.ndim != 1 or not np.isfinite(mass).all() or np.any(mass < -1e-15):
            raise InvalidArgumentError("mapped mass must be a finite nonnegative vector")
        if abs(mass.sum() - 1.0) > ENCODING_TOL:
            raise InvalidArgumentError(f"mapped mass sums to {mass.sum()!r}")
        self.mass = np.maximum(mass, 0.0)

    @property
    def size(self):
        return self.mass.size


def check_encoding(Z, k=None, onehot=False):
    """Validate a code matrix: rows on the simplex (and one-hot if asked)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if k is not None and Z.shape[1] != k:
        raise InvalidArgumentError(f"encoding has {Z.shape[1]} columns, expected {k}")
    if not np.isfinite(Z).all() or np.any(Z < 0):
        raise InvalidArgumentError("encoding rows must be finite and nonnegative")
    if np.abs(Z.sum(axis=1) - 1).max() > ENCODING_TOL:
        raise InvalidArgumentError("encoding rows must sum to one")
    if onehot and not (np.all((Z == 0) | (Z == 1)) and np.all(Z.sum(axis=1) == 1)):
        raise InvalidArgumentError("encoding rows are not one-hot")
    return Z


def onehot(indices, k):
    Z = np.zeros((len(indices), k))
    Z[np.arange(len(indices)), indices] = 1.0
    return Z


def anchor_cost(space):
    """Pairwise anchor distances ``C_s``; exactly symmetric with zero diagonal."""
    W = space.embedded()
    if W.shape[0] == 1:
        return np.zeros((1, 1))
    return squareform(pdist(W, metric="euclidean"))


def map_distribution(D, Z):
    """Push the masses of ``D`` onto the anchors: ``a' = Z^T a``."""
    Z = check_encoding(Z)
    if Z.shape[0] != D.size:
        raise InvalidArgumentError(f"encoding has {Z.shape[0]} rows for {D.size} samples")
    return MappedDistribution(Z.T @ D.mass)


def _mass(x):
    return x.mass if hasattr(x, "mass") else np.asarray(x, dtype=np.float64)


def asot_exact(ax, bx, C_s):
    """Exact OT between two mapped distributions over the anchors."""
    a, b = _mass(ax), _mass(bx)
    if a.size != b.size:
        raise InvalidArgumentError(f"mapped distributions have sizes {a.size} and {b.size}")
    return solve_exact(a, b, C_s)[1]


def easot(ax, bx, C_s, cfg=None):
    """Entropic (Sinkhorn) OT between two mapped distributions."""
    a, b = _mass(ax), _mass(bx)
    if a.size != b.size:
        raise InvalidArgumentError(f"mapped distributions have sizes {a.size} and {b.size}")
    return sinkhorn(a, b, C_s, cfg or SinkhornConfig())[1]


def reconstructed_cost(Zx, C_s, Zy):
    """``Z_x C_s Z_y^T``: the ground cost implied by the anchor encoding."""
    Zx, Zy = np.atleast_2d(Zx), np.atleast_2d(Zy)
    C_s = np.asarray(C_s, dtype=np.float64)
    if Zx.shape[1] != C_s.shape[0] or Zy.shape[1] != C_s.shape[1]:
        raise InvalidArgumentError(
            f"cannot combine encodings {Zx.shape}, {Zy.shape} with anchor cost {C_s.shape}"
        )
    return np.maximum(Zx @ C_s @ Zy.T, 0.0)


def prop1_bound(C_hat, C):
    """Entrywise L1 distance between the reconstructed and true cost."""
    C_hat, C = np.asarray(C_hat, dtype=np.float64), np.asarray(C, dtype=np.float64)
    if C_hat.shape != C.shape:
        raise InvalidArgumentError(f"shape mismatch: {C_hat.shape} vs {C.shape}")
    return float(np.abs(C_hat - C).sum())


def prop2_bound(res_x, res_y):
    """One-hot error bound ``m * sum(res_x) + n * sum(res_y)``.

    ``res_x`` and ``res_y`` hold the reconstruction residual norms
    ``||W q(x_i) - x_i||`` of the n source and m target samples.
    """
    res_x = np.asarray(res_x, dtype=np.float64).ravel()
    res_y = np.asarray(res_y, dtype=np.float64).ravel()
    if np.any(res_x < 0) or np.any(res_y < 0):
        raise InvalidArgumentError("residual norms must be nonnegative")
    n, m = res_x.size, res_y.size
    return float(m * res_x.sum() + n * res_y.sum())


def residual_norms(X, Z, anchors):
    """Per-sample ``||Z(i,:) W - x_i||_2`` with anchors as rows of ``W``."""
    return np.linalg.norm(np.atleast_2d(Z) @ np.asarray(anchors) - np.atleast_2d(X), axis=1)


def equivalence_check(Dx, Dy, Zx, Zy, space):
    """Solve the same problem twice: over the anchors, and as plain OT under
    the reconstructed cost. Returns ``(w_asot, w_reconstructed_lp)``.
    """
    C_s = anchor_cost(space)
    Zx = check_encoding(Zx, space.k)
    Zy = check_encoding(Zy, space.k)
    w_asot = asot_exact(map_distribution(Dx, Zx), map_distribution(Dy, Zy), C_s)
    w_lp = solve_exact(Dx.mass, Dy.mass, reconstructed_cost(Zx, C_s, Zy))[1]
    return w_asot, w_lp


def true_cost(Dx, Dy):
    return euclidean_cost(Dx.samples, Dy.samples)
