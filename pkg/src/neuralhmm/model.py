"""Neural HMM with optional observation memory windows.

Generative story, with ``win(y, e, tau)`` the ``tau`` observations ending at
index ``e`` (left zero-padded)::

    x_0     ~ init_dist
    y_t     ~ N(g_net(x_t, win(y, t - 1, tau_e)))
    x_{t+1} ~ N(f_net(x_t, win(y, t, tau_t)))

Both nets emit ``2 * d`` numbers: the mean followed by the log-variance.
With ``tau_e = tau_t = 0`` this is the plain neural HMM; depth-0 nets give a
linear-Gaussian state-space model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dist import DiagGaussian, clamp_log_var, gauss_sample
from .errors import InvalidArgument
from .nncore import Mlp, mlp_forward, mlp_init


@dataclass(frozen=True)
class NeuralHmm:
    d_h: int
    d_o: int
    f_net: Mlp
    g_net: Mlp
    tau_e: int = 0
    tau_t: int = 0
    init_dist: DiagGaussian = None
    # zero-weight log-variance rows: one learnable variance per dimension
    tie_variance: bool = False

    def __post_init__(self):
        if self.d_h < 1 or self.d_o < 1 or self.tau_e < 0 or self.tau_t < 0:
            raise InvalidArgument("dimensions must be >= 1 and windows >= 0")
        if self.init_dist is None:
            object.__setattr__(self, "init_dist", DiagGaussian.standard(self.d_h))
        if self.init_dist.dim != self.d_h:
            raise InvalidArgument("initial distribution does not live in the latent space")
        f_in = self.d_h + self.tau_t * self.d_o
        g_in = self.d_h + self.tau_e * self.d_o
        if (self.f_net.n_in, self.f_net.n_out) != (f_in, 2 * self.d_h):
            raise InvalidArgument(
                f"transition net maps {self.f_net.n_in}->{self.f_net.n_out}, expected {f_in}->{2 * self.d_h}"
            )
        if (self.g_net.n_in, self.g_net.n_out) != (g_in, 2 * self.d_o):
            raise InvalidArgument(
                f"emission net maps {self.g_net.n_in}->{self.g_net.n_out}, expected {g_in}->{2 * self.d_o}"
            )

    @property
    def is_vanilla(self):
        return self.f_net.depth == 0 and self.g_net.depth == 0

    def to_dict(self):
        return {
            "d_h": self.d_h,
            "d_o": self.d_o,
            "tau_e": self.tau_e,
            "tau_t": self.tau_t,
            "tie_variance": self.tie_variance,
            "init_dist": self.init_dist.to_dict(),
            "f_net": self.f_net.to_dict(),
            "g_net": self.g_net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d_h=int(d["d_h"]),
            d_o=int(d["d_o"]),
            tau_e=int(d.get("tau_e", 0)),
            tau_t=int(d.get("tau_t", 0)),
            tie_variance=bool(d.get("tie_variance", False)),
            init_dist=DiagGaussian.from_dict(d["init_dist"]) if "init_dist" in d else None,
            f_net=Mlp.from_dict(d["f_net"]),
            g_net=Mlp.from_dict(d["g_net"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _tie(net, d):
    """Zero the log-variance rows of the output layer."""
    w = [np.array(x) for x in net.weights]
    w[-1][d:, :] = 0.0
    return Mlp(net.layer_sizes, tuple(w), net.biases)


def make_model(d_h, d_o, depth=3, width=32, seed=0, tau_e=0, tau_t=0, tie_variance=False):
    """Randomly initialized model with ``depth`` hidden layers of ``width`` units."""
    if d_h < 1 or d_o < 1:
        raise InvalidArgument("dimensions must be >= 1")
    if depth < 0 or width < 1:
        raise InvalidArgument("depth must be >= 0 and width >= 1")
    ss = np.random.SeedSequence(seed)
    s_f, s_g = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    f_net = mlp_init([d_h + tau_t * d_o] + [width] * depth + [2 * d_h], s_f)
    g_net = mlp_init([d_h + tau_e * d_o] + [width] * depth + [2 * d_o], s_g)
    if tie_variance:
        f_net, g_net = _tie(f_net, d_h), _tie(g_net, d_o)
    return NeuralHmm(d_h, d_o, f_net, g_net, tau_e=tau_e, tau_t=tau_t, tie_variance=tie_variance)


def make_vanilla(d_h, d_o, seed=0):
    """Affine nets with state-independent noise: a linear-Gaussian model."""
    return make_model(d_h, d_o, depth=0, seed=seed, tie_variance=True)


def obs_window(y, end, tau):
    """Flattened ``y[end - tau + 1 : end + 1]``, zero-padded on the left."""
    y = np.asarray(y, dtype=np.float64)
    d_o = y.shape[-1]
    out = np.zeros(tau * d_o)
    for k in range(tau):
        idx = end - tau + 1 + k
        if 0 <= idx < len(y):
            out[k * d_o:(k + 1) * d_o] = y[idx]
    return out


def all_windows(y, tau, lag):
    """Row ``t`` holds ``obs_window(y, t - lag, tau)`` for every ``t``."""
    y = np.asarray(y, dtype=np.float64)
    n, d_o = y.shape
    if tau == 0:
        return np.zeros((n, 0))
    padded = np.vstack([np.zeros((tau + lag, d_o)), y])
    # row t of padded-index space: observations t-lag-tau+1 .. t-lag
    rows = [padded[t + 1:t + 1 + tau].ravel() for t in range(n)]
    return np.array(rows)


def _net_input(x, w, d_x, tau, d_o):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d_x:
        raise InvalidArgument(f"latent has dimension {x.shape[-1]}, model expects {d_x}")
    if tau == 0:
        return x
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != tau * d_o:
        raise InvalidArgument(f"window has length {w.shape[-1]}, expected {tau * d_o}")
    if x.ndim == 2 and w.ndim == 1:
        w = np.broadcast_to(w, (x.shape[0], w.shape[0]))
    return np.concatenate([x, w], axis=-1)


def _split(out, d):
    return DiagGaussian(out[..., :d], clamp_log_var(out[..., d:]))


def transition_dist(m, x, w=None):
    """Distribution of the next latent given latent(s) ``x`` and window ``w``."""
    return _split(mlp_forward(m.f_net, _net_input(x, w, m.d_h, m.tau_t, m.d_o)), m.d_h)


def emission_dist(m, x, w=None):
    return _split(mlp_forward(m.g_net, _net_input(x, w, m.d_h, m.tau_e, m.d_o)), m.d_o)


def simulate(m, T, rng):
    """Ancestral sample; returns latents ``(T+1, d_h)`` and observations ``(T+1, d_o)``."""
    if T < 0:
        raise InvalidArgument("T must be >= 0")
    xs = np.zeros((T + 1, m.d_h))
    ys = np.zeros((T + 1, m.d_o))
    x = gauss_sample(m.init_dist, rng)
    for t in range(T + 1):
        xs[t] = x
        ys[t] = gauss_sample(emission_dist(m, x, obs_window(ys, t - 1, m.tau_e)), rng)
        if t < T:
            x = gauss_sample(transition_dist(m, x, obs_window(ys, t, m.tau_t)), rng)
    return xs, ys


def with_nets(m, f_net=None, g_net=None):
    return replace(m, f_net=f_net if f_net is not None else m.f_net, g_net=g_net if g_net is not None else m.g_net)
