"""Bootstrap particle filter over full latent paths, and the particle Q-function.

Weights are kept in log space throughout.  The filter resamples after every
weighting step (optionally only when the effective sample size drops below
``ess_threshold * N``); the returned paths are the genealogies of the time-T
particles, paired with their normalized time-T weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dist import DiagGaussian, gauss_logpdf, gauss_sample
from .errors import DegenerateFilterError, InvalidArgument
from .model import all_windows, emission_dist, transition_dist


@dataclass
class SmcResult:
    particles: np.ndarray  # (T+1, N, d_h), particles as sampled at each step
    ancestor_table: np.ndarray  # (T+1, N); row t maps particle i at t to its parent at t-1
    log_weights: np.ndarray  # (T+1, N), normalized log-weights after each weighting step
    loglik_increments: np.ndarray  # (T+1,)
    paths: np.ndarray = None  # (N, T+1, d_h)
    path_index: np.ndarray = None  # (N, T+1); paths[i, t] == particles[t, path_index[i, t]]

    def __post_init__(self):
        if self.paths is None or self.path_index is None:
            self.paths, self.path_index = reconstruct_paths(self.particles, self.ancestor_table, True)

    @property
    def n_particles(self):
        return self.particles.shape[1]

    @property
    def T(self):
        return self.particles.shape[0] - 1

    @property
    def final_weights(self):
        return np.exp(self.log_weights[-1])

    def to_dict(self, max_steps=None):
        steps = self.T + 1 if max_steps is None else min(max_steps, self.T + 1)
        return {
            "n_particles": int(self.n_particles),
            "T": int(self.T),
            "final_weights": self.final_weights.tolist(),
            "loglik_increments": self.loglik_increments.tolist(),
            "loglik": estimate_loglik(self),
            "paths": self.paths[:, :steps].tolist(),
        }

    def dump_json(self, path, max_steps=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(max_steps), fh)


def reconstruct_paths(particles, ancestor_table, return_index=False):
    """Trace every time-T particle back through the ancestor table."""
    T1, N = ancestor_table.shape
    paths = np.empty((N, T1, particles.shape[2]))
    index = np.empty((N, T1), dtype=np.int64)
    idx = np.arange(N)
    for t in range(T1 - 1, -1, -1):
        paths[:, t] = particles[t, idx]
        index[:, t] = idx
        idx = ancestor_table[t, idx]
    return (paths, index) if return_index else paths


def resample_multinomial(weights, n_out, rng):
    """Indices of ``n_out`` i.i.d. draws from the categorical law ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidArgument("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidArgument("weights must be non-negative and sum to 1")
    if n_out < 0:
        raise InvalidArgument("n_out must be >= 0")
    cdf = np.cumsum(w)
    idx = np.searchsorted(cdf, rng.random(n_out) * cdf[-1], side="right")
    return np.minimum(idx, w.size - 1)


def logsumexp(a):
    top = np.max(a)
    if not np.isfinite(top):
        return top
    return float(top + np.log(np.sum(np.exp(a - top))))


def ess(log_weights):
    return 1.0 / np.sum(np.exp(2.0 * log_weights))


def _check_obs(m, y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != m.d_o or y.shape[0] < 1:
        raise InvalidArgument(f"observations have shape {y.shape}, model expects (T+1, {m.d_o})")
    return y


def filter_steps(m, y, N, rng, ess_threshold=None):
    """Run the filter step by step.

    Yields ``(t, particles, log_weights, parents, loglik_increment)`` right
    after the time-t weighting, before resampling; ``parents`` indexes the
    previous step's particles (identity at t=0).
    """
    y = _check_obs(m, y)
    if N < 1:
        raise InvalidArgument("particle count must be >= 1")
    T = y.shape[0] - 1
    win_e = all_windows(y, m.tau_e, 1)
    win_t = all_windows(y, m.tau_t, 0)
    log_n = np.log(N)
    mu = m.init_dist
    x = gauss_sample(DiagGaussian(np.tile(mu.mean, (N, 1)), np.tile(mu.log_var, (N, 1))), rng)
    carried = np.full(N, -log_n)
    parents = np.arange(N)
    for t in range(T + 1):
        if t > 0:
            x = gauss_sample(transition_dist(m, x[parents], win_t[t - 1]), rng)
        logw = carried + gauss_logpdf(emission_dist(m, x, win_e[t]), y[t])
        logw = np.where(np.isnan(logw), -np.inf, logw)
        top = np.max(logw)
        if not np.isfinite(top):
            raise DegenerateFilterError(t)
        # shift by the max before taking the log-sum: subtracting the full
        # total from log-weights of magnitude ~1e8 would cost ~1e-8 precision
        shifted = logw - top
        log_norm = np.log(np.sum(np.exp(shifted)))
        log_w = shifted - log_norm
        total = float(top + log_norm)
        yield t, x, log_w, parents, total
        if t == T:
            return
        if ess_threshold is None or ess(log_w) < ess_threshold * N:
            parents = resample_multinomial(np.exp(log_w), N, rng)
            carried = np.full(N, -log_n)
        else:
            parents = np.arange(N)
            carried = log_w


def bootstrap_filter(m, y, N, rng, ess_threshold=None):
    y = _check_obs(m, y)
    T = y.shape[0] - 1
    particles = np.empty((T + 1, N, m.d_h))
    anc = np.empty((T + 1, N), dtype=np.int64)
    log_w = np.empty((T + 1, N))
    incs = np.empty(T + 1)
    for t, x, lw, parents, inc in filter_steps(m, y, N, rng, ess_threshold):
        particles[t] = x
        anc[t] = parents
        log_w[t] = lw
        incs[t] = inc
    return SmcResult(particles, anc, log_w, incs)


def estimate_loglik(r):
    return float(np.sum(r.loglik_increments))


def q_hat(m, r, y, weighting="final"):
    """Particle estimate of the expected complete-data log-likelihood.

    ``weighting="final"`` weights every term of each path by its time-T
    weight; ``"per_step"`` instead weights time-t terms of the time-t particles
    by their own filtering weights.  The fixed initial density is omitted.
    """
    y = _check_obs(m, y)
    if y.shape[0] != r.T + 1:
        raise InvalidArgument(f"result covers {r.T + 1} steps but {y.shape[0]} observations given")
    if r.particles.shape[2] != m.d_h:
        raise InvalidArgument("particle dimension does not match the model latent dimension")
    T, N = r.T, r.n_particles
    win_e = all_windows(y, m.tau_e, 1)
    win_t = all_windows(y, m.tau_t, 0)
    if weighting == "final":
        cur = r.paths  # (N, T+1, d)
        prev = r.paths[:, :-1]
        w = np.broadcast_to(r.final_weights[:, None], (N, T + 1))
    elif weighting == "per_step":
        cur = np.swapaxes(r.particles, 0, 1)
        prev = np.stack([r.particles[t - 1, r.ancestor_table[t]] for t in range(1, T + 1)], axis=1) \
            if T > 0 else np.empty((N, 0, m.d_h))
        w = np.exp(r.log_weights).T
    else:
        raise InvalidArgument(f"unknown weighting {weighting!r}")
    xe = cur.reshape(-1, m.d_h)
    we = np.broadcast_to(win_e, (N,) + win_e.shape).reshape(N * (T + 1), -1)
    ye = np.broadcast_to(y, (N,) + y.shape).reshape(-1, m.d_o)
    em = gauss_logpdf(emission_dist(m, xe, we), ye).reshape(N, T + 1)
    total = np.sum(w * em)
    if T > 0:
        xp = prev.reshape(-1, m.d_h)
        wt = np.broadcast_to(win_t[:-1], (N, T, win_t.shape[1])).reshape(N * T, -1)
        xc = cur[:, 1:].reshape(-1, m.d_h)
        tr = gauss_logpdf(transition_dist(m, xp, wt), xc).reshape(N, T)
        total += np.sum(w[:, 1:] * tr)
    return float(total)
