"""
Anchor learning with unrolled near-one-hot encoding layers.

Each sample is encoded by ``L`` projected-gradient steps on
``1/2 ||W z - x||^2`` with a per-input shrinkage ``lambda`` predicted by a
small network. The dictionary ``W`` (columns are anchors) and the network
are trained on a reconstruction loss plus penalties that push codes onto
one-hot vertices of the unit simplex.
"""

import math
from dataclasses import dataclass

import numpy as np

from .anchor import AnchorSpace
from .errors import InvalidArgumentError, NumericalError
from .kmeans import KmeansConfig, fit_kmeans
from .metric_learning import graph_samples
from .nn import AdamState, Mlp, adam_step, mlp_backward, mlp_forward


def simplex_project(a, theta):
    """Elementwise ``max(0, a - theta)``."""
    if theta < 0:
        raise InvalidArgumentError("theta must be nonnegative")
    return np.maximum(np.asarray(a, dtype=np.float64) - theta, 0.0)


def near_onehot_layer(z, x, W, lam, step=1.0):
    """One step ``z <- S_lam(z - step * W^T (W z - x))``."""
    z, x, W = np.asarray(z, dtype=np.float64), np.asarray(x, dtype=np.float64), np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape != (x.size, z.size):
        raise InvalidArgumentError(f"dictionary shape {W.shape} does not match x ({x.size}) and z ({z.size})")
    return simplex_project(z - step * W.T @ (W @ z - x), lam)


def softplus(o):
    return np.logaddexp(0.0, o)


def sigmoid(o):
    return 0.5 * (1.0 + np.tanh(0.5 * o))


@dataclass
class DlModel:
    """Dictionary ``W`` (``D x k``), lambda network ``D -> 1`` and loss weights."""

    dictionary: np.ndarray
    lambda_net: Mlp
    layers: int = 20
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    p: float = 2.0

    def __post_init__(self):
        self.dictionary = np.asarray(self.dictionary, dtype=np.float64)
        if self.dictionary.ndim != 2 or not np.isfinite(self.dictionary).all():
            raise InvalidArgumentError("dictionary must be a finite D x k matrix")
        if self.lambda_net.in_dim != self.dictionary.shape[0] or self.lambda_net.out_dim != 1:
            raise InvalidArgumentError("lambda network must map D inputs to one output")
        if self.layers < 1:
            raise InvalidArgumentError("at least one layer required")
        if min(self.alpha, self.beta, self.gamma) < 0 or not self.p > 1:
            raise InvalidArgumentError("loss weights must be nonnegative and p > 1")
        if not np.any(self.dictionary):
            raise InvalidArgumentError("dictionary must not be identically zero")

    @property
    def k(self):
        return self.dictionary.shape[1]

    def step_size(self):
        """``1 / sigma_max(W)^2``, the largest step for which every layer is non-expansive."""
        return 1.0 / np.linalg.norm(self.dictionary, 2) ** 2

    def space(self):
        return AnchorSpace(self.dictionary.T.copy(), "euclidean")

    def params(self):
        return [self.dictionary] + self.lambda_net.params()

    def with_params(self, params):
        return DlModel(
            params[0], self.lambda_net.with_params(params[1:]),
            self.layers, self.alpha, self.beta, self.gamma, self.p,
        )

    def to_record(self):
        return {
            "kind": "dl",
            "layers": self.layers,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "p": self.p,
            "dictionary": self.dictionary.tolist(),
            "lambda_net": self.lambda_net.to_record(),
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            record["dictionary"], Mlp.from_record(record["lambda_net"]), record["layers"],
            record["alpha"], record["beta"], record["gamma"], record["p"],
        )


def _unroll(model, X):
    """Run the layers on a batch; returns raw codes, lambdas and the tape."""
    W = model.dictionary
    eta = model.step_size()
    o = mlp_forward(model.lambda_net, X)[:, 0]
    lam = softplus(o)
    G = W.T @ W
    XW = X @ W
    Z = np.zeros((X.shape[0], W.shape[1]))
    tape = []
    for _ in range(model.layers):
        R = Z @ G - XW
        A = Z - eta * R - lam[:, None]
        tape.append((Z, R, A))
        Z = np.maximum(A, 0.0)
    return Z, lam, o, eta, tape


def _check_batch(model, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dictionary.shape[0]:
        raise InvalidArgumentError(f"inputs have {X.shape[1]} columns, dictionary has {model.dictionary.shape[0]} rows")
    if not np.isfinite(X).all():
        raise InvalidArgumentError("inputs must be finite")
    return X


def dl_codes(model, X):
    """Raw (unnormalized) codes after the last layer."""
    return _unroll(model, _check_batch(model, X))[0]


def dl_encode(model, X, return_flags=False):
    """Encoding rows: the last-layer codes divided by their l1 norms.

    Rows where every coordinate was shrunk to zero fall back to the uniform
    row; ``return_flags`` also returns the mask of those rows. A single
    vector ``x`` gives a single row.
    """
    single = np.ndim(X) == 1
    Z = dl_codes(model, X)
    s = Z.sum(axis=1)
    dead = s <= 0
    out = np.full_like(Z, 1.0 / Z.shape[1])
    out[~dead] = Z[~dead] / s[~dead, None]
    if single:
        out, dead = out[0], dead[0]
    return (out, dead) if return_flags else out


def _lp_norm(Z, p):
    return np.sum(np.abs(Z) ** p, axis=1) ** (1.0 / p)


def dl_loss(model, X_batch, Z_batch):
    """``(total, l_rc, l_lp, l_sp)`` for codes ``Z_batch`` of samples ``X_batch``."""
    X = _check_batch(model, X_batch)
    Z = np.atleast_2d(np.asarray(Z_batch, dtype=np.float64))
    if Z.shape != (X.shape[0], model.k):
        raise InvalidArgumentError(f"codes have shape {Z.shape}, expected {(X.shape[0], model.k)}")
    n = X.shape[0]
    l_rc = float(np.sum((Z @ model.dictionary.T - X) ** 2) / (2 * n))
    l_lp = float(np.sum((_lp_norm(Z, model.p) - 1.0) ** 2) / n)
    l_sp = float(np.sum((Z.sum(axis=1) - 1.0) ** 2) / n)
    total = model.alpha * l_rc + model.beta * l_lp + model.gamma * l_sp
    return total, l_rc, l_lp, l_sp


def dl_loss_and_grad(model, X_batch):
    """Total loss of the encoder's own codes and its gradient.

    Gradients (ordered like :meth:`DlModel.params`) flow through all unrolled
    layers, the step size ``1 / sigma_max(W)^2`` and the lambda network.
    """
    X = _check_batch(model, X_batch)
    W, p, n = model.dictionary, model.p, X.shape[0]
    Z, lam, o, eta, tape = _unroll(model, X)
    total = dl_loss(model, X, Z)[0]

    E = Z @ W.T - X
    dZ = model.alpha * (E @ W) / n
    dW = model.alpha * (E.T @ Z) / n
    norm = _lp_norm(Z, p)
    safe = np.where(norm > 0, norm, 1.0)
    dnorm = np.where(
        norm[:, None] > 0,
        np.sign(Z) * np.abs(Z) ** (p - 1) / safe[:, None] ** (p - 1),
        0.0,
    )
    dZ += model.beta * (2.0 / n) * (norm - 1.0)[:, None] * dnorm
    dZ += model.gamma * (2.0 / n) * (Z.sum(axis=1) - 1.0)[:, None]

    WtW = W.T @ W
    d_eta = 0.0
    d_lam = np.zeros(n)
    for Zp, R, A in reversed(tape):
        Gr = dZ * (A > 0)
        d_eta -= float(np.sum(Gr * R))
        d_lam -= Gr.sum(axis=1)
        dW -= eta * (W @ (Gr.T @ Zp + Zp.T @ Gr) - X.T @ Gr)
        dZ = Gr - eta * (Gr @ WtW)

    # eta = sigma^-2 and d sigma / dW = u v^T for the top singular pair
    U, sig, Vt = np.linalg.svd(W, full_matrices=False)
    dW += d_eta * (-2.0 / sig[0] ** 3) * np.outer(U[:, 0], Vt[0])

    d_o = d_lam * sigmoid(o)
    net_grads, _ = mlp_backward(model.lambda_net, X, d_o[:, None])
    return total, [dW] + net_grads


def min_kink_distance(model, X):
    """Smallest ``|A|`` over all layer pre-projections; small values mark kinks."""
    X = _check_batch(model, X)
    _, _, _, _, tape = _unroll(model, X)
    return float(min(np.abs(A).min() for _, _, A in tape))


@dataclass(frozen=True)
class DlTrainConfig:
    k: int
    epochs: int = 500
    batch_graphs: int = 500
    sample_cap: int = 4096
    seed: int = 0
    learning_rate: float = 0.01
    layers: int = 20
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    p: float = 2.0
    lambda_init: float = 0.01
    init: str = "kmeans"

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("k must be at least 1")
        if self.epochs < 0 or self.batch_graphs < 1 or self.sample_cap < 1 or self.layers < 1:
            raise InvalidArgumentError("epochs >= 0, batch_graphs, sample_cap and layers >= 1 required")
        if not self.learning_rate > 0 or not self.lambda_init > 0:
            raise InvalidArgumentError("learning_rate and lambda_init must be positive")
        if self.init not in ("kmeans", "random"):
            raise InvalidArgumentError(f"unknown dictionary init {self.init!r}")


def init_dl_model(samples, cfg):
    """Dictionary from k-means centers (or random samples), lambda net ``(D, ceil(D/2), 1)``.

    The output bias of the lambda network is set so the initial shrinkage is
    ``softplus(b) = cfg.lambda_init``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    D = samples.shape[1]
    rng = np.random.default_rng(cfg.seed)
    net = Mlp.init([D, math.ceil(D / 2), 1], rng)
    net.weights[-1] = net.weights[-1] * 0.01
    net.biases[-1] = np.array([math.log(math.expm1(cfg.lambda_init))])
    if cfg.init == "kmeans":
        W = fit_kmeans(samples, KmeansConfig(cfg.k, seed=cfg.seed)).anchors.T
    else:
        W = samples[rng.choice(samples.shape[0], cfg.k, replace=samples.shape[0] < cfg.k)].T
    W = np.array(W, dtype=np.float64)
    if not np.any(W):
        W = W + 1e-3 * rng.standard_normal(W.shape)
    return DlModel(W, net, cfg.layers, cfg.alpha, cfg.beta, cfg.gamma, cfg.p)


def train_dl(dataset, cfg, model=None):
    """Fit the dictionary and lambda network with Adam.

    Each epoch shuffles the graphs into batches of ``cfg.batch_graphs``; a
    batch pools its node samples, keeps at most ``cfg.sample_cap`` of them and
    takes one Adam step on the total loss. Returns
    ``(model, anchor_space, loss_trace)``.
    """
    graphs = graph_samples(dataset)
    if not graphs:
        raise InvalidArgumentError("training needs at least one graph")
    if model is None:
        model = init_dl_model(np.vstack(graphs), cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    params = [p.copy() for p in model.params()]
    state = AdamState.for_params(params, learning_rate=cfg.learning_rate)
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(graphs))
        losses = []
        for start in range(0, len(order), cfg.batch_graphs):
            X = np.vstack([graphs[g] for g in order[start:start + cfg.batch_graphs]])
            if X.shape[0] > cfg.sample_cap:
                X = X[np.sort(rng.choice(X.shape[0], cfg.sample_cap, replace=False))]
            loss, grads = dl_loss_and_grad(model, X)
            try:
                params = adam_step(state, params, grads)
                candidate = model.with_params(params)
            except (NumericalError, InvalidArgumentError) as exc:
                err = NumericalError(f"training diverged: {exc}")
                err.checkpoint = model
                raise err from exc
            model = candidate
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return model, model.space(), trace
