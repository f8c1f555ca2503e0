"""
A small dense-network kernel: multilayer perceptrons with hand-written
backpropagation, the Adam optimizer and a finite-difference gradient checker.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericalError

ACTIVATIONS = ("relu",)


@dataclass
class Mlp:
    """Fully connected network ``in -> hidden... -> out``.

    Hidden layers use ReLU; the output layer is linear. ``weights[l]`` has
    shape ``(layer_dims[l], layer_dims[l + 1])``.
    """

    layer_dims: list
    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise InvalidArgumentError(f"bad layer dims {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise InvalidArgumentError("one weight matrix and bias vector per layer required")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[l], self.layer_dims[l + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise InvalidArgumentError(f"layer {l} parameters do not conform to {shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise InvalidArgumentError(f"layer {l} parameters are not finite")

    @classmethod
    def init(cls, layer_dims, rng):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(list(layer_dims), weights, biases)

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params):
        return Mlp(self.layer_dims, list(params[0::2]), list(params[1::2]), self.activation)

    def copy(self):
        return self.with_params([p.copy() for p in self.params()])

    def to_record(self):
        return {
            "layer_dims": self.layer_dims,
            "activation": self.activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_record(cls, record):
        dims = record["layer_dims"]
        weights = [np.asarray(w).reshape(dims[l], dims[l + 1]) for l, w in enumerate(record["weights"])]
        return cls(dims, weights, [np.asarray(b) for b in record["biases"]], record["activation"])


def _forward(net, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise InvalidArgumentError(f"expected a batch with {net.in_dim} columns, got shape {X.shape}")
    inputs, pre = [], []
    h = X
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if l < last else z
    return h, (inputs, pre)


def mlp_forward(net, batch):
    """Evaluate ``net`` on a ``B x in`` batch."""
    return _forward(net, batch)[0]


def mlp_backward(net, batch, upstream_grad):
    """Gradients of ``sum(upstream_grad * mlp_forward(net, batch))``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is ordered
    like :meth:`Mlp.params` (``[dW0, db0, dW1, db1, ...]``).
    """
    out, (inputs, pre) = _forward(net, batch)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != out.shape:
        raise InvalidArgumentError(f"upstream gradient shape {g.shape} != output shape {out.shape}")
    grads = [None] * (2 * len(net.weights))
    for l in range(len(net.weights) - 1, -1, -1):
        if l < len(net.weights) - 1:
            g = g * (pre[l] > 0)
        grads[2 * l] = inputs[l].T @ g
        grads[2 * l + 1] = g.sum(axis=0)
        g = g @ net.weights[l].T
    return grads, g


@dataclass
class AdamState:
    """Moment buffers and hyperparameters of an Adam optimizer."""

    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
            **kwargs,
        )


def adam_step(state, params, grads):
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` is advanced in place (moments and step counter).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidArgumentError("params, grads and optimizer state must have equal length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient passed to adam_step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise InvalidArgumentError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / corr1
        v_hat = state.v[i] / corr2
        new.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_hat))
    return new


def finite_difference(loss_fn, params, step=1e-5):
    """Central-difference gradient of ``loss_fn(params)`` for every entry."""
    params = [np.array(p, dtype=np.float64, order="C") for p in params]
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            plus = loss_fn(params)
            flat[idx] = orig - step
            minus = loss_fn(params)
            flat[idx] = orig
            gflat[idx] = (plus - minus) / (2 * step)
        out.append(g)
    return out


def grad_check(loss_fn, params, step=1e-5, grad_fn=None):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)`` unless ``grad_fn`` is given,
    in which case ``loss_fn`` returns the scalar loss and ``grad_fn(params)``
    the gradient list. The error per entry is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if grad_fn is None:
        scalar = lambda ps: loss_fn(ps)[0]  # noqa: E731
        analytic = loss_fn(params)[1]
    else:
        scalar = loss_fn
        analytic = grad_fn(params)
    numeric = finite_difference(scalar, params, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(np.asarray(a) - n) / np.maximum(1e-8, np.abs(n))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
