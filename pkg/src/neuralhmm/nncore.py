"""Small dense networks with hand-written backpropagation.

An :class:`Mlp` maps ``layer_sizes[0]`` inputs to ``layer_sizes[-1]`` outputs
through ``tanh`` hidden layers and an affine output layer.  Every function
accepts either a single vector or a batch of row vectors; parameter gradients
are summed over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericError

ACTIVATION = "tanh"


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mlp:
    layer_sizes: tuple
    weights: tuple
    biases: tuple
    activation: str = ACTIVATION

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise InvalidArgument(f"invalid layer sizes {list(self.layer_sizes)}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise InvalidArgument("parameter count does not match layer sizes")
        ws, bs = [], []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            w, b = _frozen(w), _frozen(b)
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise InvalidArgument(
                    f"layer {k}: weight {w.shape} / bias {b.shape} do not match "
                    f"sizes {sizes[k]} -> {sizes[k + 1]}"
                )
            ws.append(w)
            bs.append(b)
        if self.activation != ACTIVATION:
            raise InvalidArgument(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def depth(self):
        """Number of hidden layers; 0 means a single affine map."""
        return len(self.layer_sizes) - 2

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layer_sizes=tuple(d["layer_sizes"]),
            weights=tuple(np.asarray(w, dtype=np.float64) for w in d["weights"]),
            biases=tuple(np.asarray(b, dtype=np.float64) for b in d["biases"]),
            activation=d.get("activation", ACTIVATION),
        )

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class ParamGrad:
    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, net):
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def __add__(self, other):
        return ParamGrad(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, alpha):
        return ParamGrad([alpha * w for w in self.weights], [alpha * b for b in self.biases])

    def sq_norm(self):
        return float(sum(np.sum(w * w) for w in self.weights) + sum(np.sum(b * b) for b in self.biases))

    def flat(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)


def mlp_init(layer_sizes, seed):
    """Glorot-uniform weights, zero biases, fully determined by ``seed``."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise InvalidArgument(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(sizes), tuple(weights), tuple(biases))


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise InvalidArgument(f"input has shape {x.shape}, network expects {net.n_in} features")
    if not np.all(np.isfinite(X)):
        raise InvalidArgument("non-finite network input")
    return X, single


def _forward_cache(net, X):
    acts = [X]
    h = X
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = z if k == last else np.tanh(z)
        acts.append(h)
    return acts


def mlp_forward(net, x):
    X, single = _as_batch(net, x)
    out = _forward_cache(net, X)[-1]
    return out[0] if single else out


def mlp_backward(net, x, upstream):
    """Gradients of ``<upstream, mlp_forward(net, x)>``.

    Returns ``(ParamGrad, input_grad)``; for a batch, parameter gradients are
    summed over rows and ``input_grad`` has one row per input.
    """
    X, single = _as_batch(net, x)
    U = np.asarray(upstream, dtype=np.float64)
    U = U[None, :] if U.ndim == 1 else U
    if U.shape != (X.shape[0], net.n_out):
        raise InvalidArgument(f"upstream has shape {np.shape(upstream)}, expected {net.n_out} outputs per row")
    gp, delta = _backprop(net, _forward_cache(net, X), U)
    return gp, (delta[0] if single else delta)


def _backprop(net, acts, U):
    n_layers = len(net.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = U
    for k in range(n_layers - 1, -1, -1):
        if k != n_layers - 1:
            delta = delta * (1.0 - acts[k + 1] ** 2)
        gw[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        delta = delta @ net.weights[k]
    return ParamGrad(gw, gb), delta


@dataclass
class OptimizerState:
    learning_rate: float
    scheme: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgument(f"learning rate must be positive, got {self.learning_rate}")
        if self.scheme not in ("sgd", "adam"):
            raise InvalidArgument(f"unknown optimizer scheme {self.scheme!r}")


def optimizer_step(net, grad, state):
    """One descent step; returns ``(new_net, state)``.

    Callers maximizing an objective pass the negated gradient.
    """
    if len(grad.weights) != len(net.weights):
        raise InvalidArgument("gradient does not match network")
    params = []
    grads = []
    for k, (w, b, gw, gb) in enumerate(zip(net.weights, net.biases, grad.weights, grad.biases)):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise InvalidArgument(f"layer {k}: gradient shape mismatch")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {k}")
        params += [w, b]
        grads += [gw, gb]

    lr = state.learning_rate
    if state.scheme == "sgd":
        new = [p - lr * g for p, g in zip(params, grads)]
    else:
        if not state.m:
            state.m = [np.zeros_like(p) for p in params]
            state.v = [np.zeros_like(p) for p in params]
        state.t += 1
        bc1 = 1.0 - state.beta1 ** state.t
        bc2 = 1.0 - state.beta2 ** state.t
        new = []
        for i, (p, g) in enumerate(zip(params, grads)):
            state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
            state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
            m_hat = state.m[i] / bc1
            v_hat = state.v[i] / bc2
            new.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return Mlp(net.layer_sizes, tuple(new[0::2]), tuple(new[1::2])), state
