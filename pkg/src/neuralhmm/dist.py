"""Diagonal Gaussians parameterized by mean and log-variance.

All functions broadcast over leading axes; the last axis is the event
dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        log_var = np.asarray(self.log_var, dtype=np.float64)
        if mean.shape != log_var.shape or mean.ndim == 0:
            raise InvalidArgument(f"mean {mean.shape} and log_var {log_var.shape} differ in shape")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
            raise InvalidArgument("non-finite Gaussian parameters")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def var(self):
        return np.exp(self.log_var)

    @classmethod
    def standard(cls, d):
        return cls(np.zeros(d), np.zeros(d))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "log_var": self.log_var.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["log_var"]))


def clamp_log_var(log_var):
    return np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)


def _check(g, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1:] != g.mean.shape[-1:]:
        raise InvalidArgument(f"observation dimension {y.shape[-1:]} does not match {g.dim}")
    return y


def gauss_logpdf(g, y):
    y = _check(g, y)
    r = y - g.mean
    # far-off observations overflow to -inf, which the filter treats as zero weight
    with np.errstate(over="ignore"):
        return np.sum(-0.5 * LOG_2PI - 0.5 * g.log_var - 0.5 * r * r * np.exp(-g.log_var), axis=-1)


def gauss_sample(g, rng):
    z = rng.standard_normal(g.mean.shape)
    return g.mean + np.exp(0.5 * g.log_var) * z


def gauss_logpdf_grad(g, y):
    """Returns ``(d logpdf / d mean, d logpdf / d log_var)``."""
    y = _check(g, y)
    r = y - g.mean
    inv = np.exp(-g.log_var)
    grad_mean = r * inv
    grad_log_var = 0.5 * (r * r * inv - 1.0)
    return np.broadcast_to(grad_mean, np.broadcast(r, g.log_var).shape).copy(), grad_log_var
