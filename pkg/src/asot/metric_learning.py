"""
Anchor learning by metric regression.

A mapper network sends every sample to a simplex row over ``k`` anchors; the
anchors are compared with a learned Mahalanobis metric ``||M (w_u - w_v)||``.
Anchors, ``M`` and the mapper are fitted so that the reconstructed cost
``z_i^T C_s z_j`` regresses onto the true Euclidean ground cost.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .anchor import AnchorSpace, anchor_cost
from .errors import InvalidArgumentError, NumericalError
from .kmeans import KmeansConfig, fit_kmeans
from .nn import AdamState, Mlp, adam_step, mlp_backward, mlp_forward

EXP_LIMIT = 700.0


@dataclass
class MlModel:
    mapper: Mlp
    anchors: np.ndarray
    M: np.ndarray
    C_weight: float = 100.0

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.M = np.asarray(self.M, dtype=np.float64)
        if self.anchors.ndim != 2 or self.M.ndim != 2 or self.M.shape[1] != self.anchors.shape[1]:
            raise InvalidArgumentError(f"anchors {self.anchors.shape} and M {self.M.shape} do not conform")
        if self.mapper.out_dim != self.anchors.shape[0]:
            raise InvalidArgumentError("mapper output dimension must equal the number of anchors")
        if not (np.isfinite(self.anchors).all() and np.isfinite(self.M).all()):
            raise InvalidArgumentError("model parameters must be finite")
        if not self.C_weight > 0:
            raise InvalidArgumentError("C_weight must be positive")

    @property
    def k(self):
        return self.anchors.shape[0]

    def space(self):
        return AnchorSpace(self.anchors, "mahalanobis", self.M)

    def params(self):
        return [self.anchors, self.M] + self.mapper.params()

    def with_params(self, params):
        return MlModel(self.mapper.with_params(params[2:]), params[0], params[1], self.C_weight)

    def to_record(self):
        return {
            "kind": "ml",
            "C_weight": self.C_weight,
            "anchors": self.anchors.tolist(),
            "M": self.M.tolist(),
            "mapper": self.mapper.to_record(),
        }

    @classmethod
    def from_record(cls, record):
        return cls(Mlp.from_record(record["mapper"]), record["anchors"], record["M"], record["C_weight"])


@dataclass(frozen=True)
class MlTrainConfig:
    k: int
    epochs: int = 500
    batch_graphs: int = 500
    pair_subsample: int = 512
    seed: int = 0
    learning_rate: float = 0.01
    C_weight: float = 100.0
    hidden_factor: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("k must be at least 1")
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be nonnegative")
        if self.batch_graphs < 2 or self.pair_subsample < 1 or self.hidden_factor < 1:
            raise InvalidArgumentError("batch_graphs >= 2, pair_subsample >= 1 and hidden_factor >= 1 required")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")


def init_ml_model(samples, cfg):
    """Mapper ``(D, hidden_factor * D, k)``, k-means anchors and ``M = I``."""
    samples = np.asarray(samples, dtype=np.float64)
    D = samples.shape[1]
    rng = np.random.default_rng(cfg.seed)
    mapper = Mlp.init([D, cfg.hidden_factor * D, cfg.k], rng)
    anchors = fit_kmeans(samples, KmeansConfig(cfg.k, seed=cfg.seed)).anchors
    return MlModel(mapper, anchors.copy(), np.eye(D), cfg.C_weight)


def _normalize_rows(R):
    A = np.abs(R)
    s = A.sum(axis=1)
    dead = s == 0
    Z = np.empty_like(A)
    Z[~dead] = A[~dead] / s[~dead, None]
    Z[dead] = 1.0 / A.shape[1]
    return Z, s, dead


def ml_encode(model, X, return_flags=False):
    """Simplex rows ``|P(x)| / ||P(x)||_1``; all-zero outputs become uniform rows.

    With ``return_flags`` also returns a boolean mask of the fallback rows.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if not np.isfinite(X).all():
        raise InvalidArgumentError("inputs must be finite")
    Z, _, dead = _normalize_rows(mlp_forward(model.mapper, X))
    return (Z, dead) if return_flags else Z


def ml_predicted_cost(model, zi, zj, C_s=None):
    """``z_i^T C_s z_j`` under the model's Mahalanobis anchor cost."""
    if C_s is None:
        C_s = anchor_cost(model.space())
    return float(np.asarray(zi) @ C_s @ np.asarray(zj))


def ml_loss(model, X_batch, Y_batch, C_true):
    """``(C / (n m)) * sum_ij (z_i^T C_s z_j - C_true[i, j])^2``."""
    X = np.atleast_2d(np.asarray(X_batch, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y_batch, dtype=np.float64))
    C_true = np.asarray(C_true, dtype=np.float64)
    if C_true.shape != (X.shape[0], Y.shape[0]):
        raise InvalidArgumentError(f"C_true has shape {C_true.shape}, expected {(X.shape[0], Y.shape[0])}")
    C_s = anchor_cost(model.space())
    F = ml_encode(model, X) @ C_s @ ml_encode(model, Y).T
    return float(model.C_weight * np.mean((F - C_true) ** 2))


def _anchor_cost_backward(anchors, M, G):
    """Gradients of ``sum(G * C_s)`` w.r.t. anchors and ``M``."""
    E = anchors @ M.T
    diff_e = E[:, None, :] - E[None, :, :]
    norm = np.linalg.norm(diff_e, axis=2)
    safe = np.where(norm > 0, norm, 1.0)
    N = np.where(norm[:, :, None] > 0, diff_e / safe[:, :, None], 0.0)
    diff_w = anchors[:, None, :] - anchors[None, :, :]
    dM = np.einsum("uv,uvh,uvd->hd", G, N, diff_w)
    dW = np.einsum("uv,uvh->uh", G + G.T, N) @ M
    return dW, dM


def pair_loss_and_grad(model, S, I, J, c, weights):
    """Weighted loss ``C * sum_p w_p (z_{I_p}^T C_s z_{J_p} - c_p)^2`` and its gradient.

    ``S`` pools the samples; ``I`` and ``J`` index the two sides of every
    evaluated sample pair. Gradients follow :meth:`MlModel.params` order.
    """
    R = mlp_forward(model.mapper, S)
    Z, s, dead = _normalize_rows(R)
    C_s = anchor_cost(model.space())
    ZI, ZJ = Z[I], Z[J]
    f = np.einsum("pu,uv,pv->p", ZI, C_s, ZJ)
    r = f - c
    loss = float(model.C_weight * np.sum(weights * r * r))
    g = 2.0 * model.C_weight * weights * r
    dZ = np.zeros_like(Z)
    np.add.at(dZ, I, g[:, None] * (ZJ @ C_s))
    np.add.at(dZ, J, g[:, None] * (ZI @ C_s))
    G = ZI.T @ (g[:, None] * ZJ)
    dW, dM = _anchor_cost_backward(model.anchors, model.M, G)
    dA = np.zeros_like(Z)
    live = ~dead
    dA[live] = (dZ[live] - np.sum(dZ[live] * Z[live], axis=1, keepdims=True)) / s[live, None]
    dR = dA * np.sign(R)
    mapper_grads, _ = mlp_backward(model.mapper, S, dR)
    return loss, [dW, dM] + mapper_grads


def ml_loss_and_grad(model, X_batch, Y_batch, C_true):
    """:func:`ml_loss` together with its gradient w.r.t. every parameter."""
    X = np.atleast_2d(np.asarray(X_batch, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y_batch, dtype=np.float64))
    n, m = X.shape[0], Y.shape[0]
    I, J = np.meshgrid(np.arange(n), n + np.arange(m), indexing="ij")
    c = np.asarray(C_true, dtype=np.float64).ravel()
    return pair_loss_and_grad(model, np.vstack([X, Y]), I.ravel(), J.ravel(), c, np.full(n * m, 1.0 / (n * m)))


def graph_samples(dataset):
    if hasattr(dataset, "graphs"):
        return [g.node_features for g in dataset.graphs]
    return [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in dataset]


def _pair_batch(graphs, batch, rng, pair_subsample):
    """Randomly match the graphs of ``batch`` and sample pairs of their nodes."""
    perm = rng.permutation(batch)
    offsets = {}
    blocks, pos = [], 0
    for g in perm:
        offsets[g] = pos
        blocks.append(graphs[g])
        pos += graphs[g].shape[0]
    S = np.vstack(blocks)
    pairs = list(zip(perm[0::2], perm[1::2]))
    I, J, c, w = [], [], [], []
    for gx, gy in pairs:
        n, m = graphs[gx].shape[0], graphs[gy].shape[0]
        if n * m <= pair_subsample:
            flat = np.arange(n * m)
        else:
            flat = rng.choice(n * m, pair_subsample, replace=False)
        i, j = flat // m, flat % m
        I.append(offsets[gx] + i)
        J.append(offsets[gy] + j)
        c.append(np.linalg.norm(graphs[gx][i] - graphs[gy][j], axis=1))
        w.append(np.full(flat.size, 1.0 / (flat.size * len(pairs))))
    return S, np.concatenate(I), np.concatenate(J), np.concatenate(c), np.concatenate(w)


def train_ml(dataset, cfg, model=None):
    """Fit anchors, metric and mapper with Adam.

    ``dataset`` is a :class:`GraphDataset` or a list of per-graph sample
    matrices. Each epoch shuffles the graphs into batches of
    ``cfg.batch_graphs``, matches the graphs of a batch into random pairs and
    takes one Adam step on the mean subsampled pair loss. Returns
    ``(model, anchor_space, loss_trace)`` with one trace entry per epoch.

    A non-finite gradient raises :class:`NumericalError` whose ``checkpoint``
    attribute holds the last finite model.
    """
    graphs = graph_samples(dataset)
    if len(graphs) < 2:
        raise InvalidArgumentError("training needs at least two graphs")
    if model is None:
        model = init_ml_model(np.vstack(graphs), cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    params = [p.copy() for p in model.params()]
    state = AdamState.for_params(params, learning_rate=cfg.learning_rate)
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(graphs))
        losses = []
        for start in range(0, len(order), cfg.batch_graphs):
            batch = order[start:start + cfg.batch_graphs]
            if batch.size < 2:
                continue
            S, I, J, c, w = _pair_batch(graphs, batch, rng, cfg.pair_subsample)
            loss, grads = pair_loss_and_grad(model, S, I, J, c, w)
            try:
                params = adam_step(state, params, grads)
                candidate = model.with_params(params)
            except (NumericalError, InvalidArgumentError) as exc:
                err = NumericalError(f"training diverged: {exc}")
                err.checkpoint = model
                raise err from exc
            model = candidate
            losses.append(loss)
        trace.append(float(np.mean(losses)) if losses else float("nan"))
    return model, model.space(), trace


def underflow_risk(C_s, epsilon):
    """Warn when ``exp(-C_s / epsilon)`` is likely to underflow; returns the ratio."""
    ratio = float(np.max(C_s) / epsilon)
    if ratio > EXP_LIMIT:
        warnings.warn(
            f"anchor cost / epsilon reaches {ratio:.1f} (> {EXP_LIMIT:g}); Gibbs kernel entries may underflow",
            RuntimeWarning,
            stacklevel=2,
        )
    return ratio
