"""Exact inference for linear-Gaussian state-space models.

Used as ground truth for the particle filter on depth-0 ("vanilla") models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dist import DiagGaussian
from .errors import InvalidArgument, NumericError, UnsupportedModel
from .model import NeuralHmm
from .nncore import Mlp


@dataclass
class LinearGaussianModel:
    """``x_0 ~ N(m0, diag(v0))``, ``x' = A x + b + N(0, diag(Q_var))``, ``y = C x + d + N(0, diag(R_var))``."""

    A: np.ndarray
    b: np.ndarray
    Q_var: np.ndarray
    C: np.ndarray
    d: np.ndarray
    R_var: np.ndarray
    init_mean: np.ndarray
    init_var: np.ndarray

    def __post_init__(self):
        for name in ("A", "b", "Q_var", "C", "d", "R_var", "init_mean", "init_var"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        self.A = np.atleast_2d(self.A)
        self.C = np.atleast_2d(self.C)
        d_h, d_o = self.A.shape[0], self.C.shape[0]
        shapes_ok = (
            self.A.shape == (d_h, d_h) and self.b.shape == (d_h,) and self.Q_var.shape == (d_h,)
            and self.C.shape == (d_o, d_h) and self.d.shape == (d_o,) and self.R_var.shape == (d_o,)
            and self.init_mean.shape == (d_h,) and self.init_var.shape == (d_h,)
        )
        if not shapes_ok:
            raise InvalidArgument("inconsistent linear-Gaussian model shapes")
        if np.any(self.Q_var <= 0) or np.any(self.R_var <= 0) or np.any(self.init_var <= 0):
            raise InvalidArgument("variances must be positive")

    @property
    def d_h(self):
        return self.A.shape[0]

    @property
    def d_o(self):
        return self.C.shape[0]


def from_vanilla(m):
    if not m.is_vanilla or m.tau_e or m.tau_t:
        raise UnsupportedModel("only depth-0 models without observation windows are linear-Gaussian")
    (Wf,), (bf,) = m.f_net.weights, m.f_net.biases
    (Wg,), (bg,) = m.g_net.weights, m.g_net.biases
    if np.any(Wf[m.d_h:] != 0) or np.any(Wg[m.d_o:] != 0):
        raise UnsupportedModel("log-variance depends on the latent state")
    lv_q = np.clip(bf[m.d_h:], -10, 10)
    lv_r = np.clip(bg[m.d_o:], -10, 10)
    return LinearGaussianModel(
        A=Wf[:m.d_h], b=bf[:m.d_h], Q_var=np.exp(lv_q),
        C=Wg[:m.d_o], d=bg[:m.d_o], R_var=np.exp(lv_r),
        init_mean=m.init_dist.mean, init_var=m.init_dist.var,
    )


def to_vanilla(lg):
    d_h, d_o = lg.d_h, lg.d_o
    f = Mlp((d_h, 2 * d_h), (np.vstack([lg.A, np.zeros((d_h, d_h))]),),
            (np.concatenate([lg.b, np.log(lg.Q_var)]),))
    g = Mlp((d_h, 2 * d_o), (np.vstack([lg.C, np.zeros((d_o, d_h))]),),
            (np.concatenate([lg.d, np.log(lg.R_var)]),))
    return NeuralHmm(d_h, d_o, f, g, init_dist=DiagGaussian(lg.init_mean, np.log(lg.init_var)),
                     tie_variance=True)


def kalman_loglik(lg, y):
    """Exact ``log p(y_0:T)`` by the predict/update recursion."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != lg.d_o:
        raise InvalidArgument(f"observations have shape {y.shape}, model expects (T+1, {lg.d_o})")
    mean = lg.init_mean.copy()
    cov = np.diag(lg.init_var)
    Q = np.diag(lg.Q_var)
    R = np.diag(lg.R_var)
    ll = 0.0
    for t in range(y.shape[0]):
        if t > 0:
            mean = lg.A @ mean + lg.b
            cov = lg.A @ cov @ lg.A.T + Q
        innov = y[t] - (lg.C @ mean + lg.d)
        S = lg.C @ cov @ lg.C.T + R
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise NumericError(f"innovation covariance not positive definite at step {t}") from None
        z = np.linalg.solve(L, innov)
        ll += -0.5 * (lg.d_o * np.log(2 * np.pi) + 2 * np.sum(np.log(np.diag(L))) + z @ z)
        K = np.linalg.solve(S, lg.C @ cov).T
        mean = mean + K @ innov
        cov = cov - K @ S @ K.T
        cov = 0.5 * (cov + cov.T)
    return float(ll)
