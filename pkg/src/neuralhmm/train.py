"""Particle EM: filter (a subset of) the trajectories, then ascend the weighted
complete-data log-likelihood of the resulting particle paths.

Each pooled sample is one ``(trajectory j, particle i, time t)`` triple.  Its
loss is the path's final weight times the emission log-density of ``y_t`` plus,
for ``t >= 1``, the transition log-density of ``X_t`` given ``X_{t-1}``.
Summing every sample's loss reproduces :func:`neuralhmm.smc.q_hat`.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import Dataset, child_rng
from .dist import LOG_VAR_MAX, LOG_VAR_MIN, DiagGaussian, gauss_logpdf, gauss_logpdf_grad
from .errors import DegenerateStatisticsError, InvalidArgument, InvalidData, NumericError
from .model import all_windows, emission_dist, transition_dist
from .nncore import Mlp, OptimizerState, ParamGrad, _backprop, _forward_cache, optimizer_step
from .smc import bootstrap_filter, estimate_loglik


@dataclass
class TrainConfig:
    n_em_iters: int = 20
    n_sgd_steps_per_m: int = 50
    minibatch_samples: int = 256
    learning_rate: float = 1e-2
    particle_count: int = 128
    trajectory_fraction: float = 1.0
    fine_tune_iters: int = 0
    seed: int = 0
    optimizer: str = "adam"
    grad_clip: float = 10.0
    m_step: str = "auto"  # "auto", "sgd" or "closed_form"
    ridge: float = 1e-8
    eval_trajectories: int = 10
    ess_threshold: float = None
    threads: int = 1

    def validate(self):
        for name in ("n_em_iters", "n_sgd_steps_per_m", "minibatch_samples", "fine_tune_iters", "eval_trajectories"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")
        if self.particle_count < 1:
            raise InvalidArgument("particle_count must be >= 1")
        if not 0 < self.trajectory_fraction <= 1:
            raise InvalidArgument("trajectory_fraction must lie in (0, 1]")
        if self.learning_rate < 0:
            raise InvalidArgument("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")
        if self.m_step not in ("auto", "sgd", "closed_form"):
            raise InvalidArgument(f"unknown m_step {self.m_step!r}")
        if self.threads < 1:
            raise InvalidArgument("threads must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class IterationRecord:
    iteration: int
    loglik: float
    q_before: float
    q_after: float
    seconds: float
    fraction: float
    n_filters: int
    filtered_loglik: float = float("nan")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    initial_loglik: float = float("nan")

    def __len__(self):
        return len(self.records)

    def write_csv(self, path, timing=True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loglik", "q_before", "q_after", "seconds", "fraction"])
            for r in self.records:
                w.writerow([
                    r.iteration, repr(r.loglik), repr(r.q_before), repr(r.q_after),
                    repr(r.seconds) if timing else "", repr(r.fraction),
                ])


@dataclass
class SampleSet:
    """Pooled ``(j, i, t)`` samples in flat arrays."""

    x_cur: np.ndarray
    x_prev: np.ndarray
    has_prev: np.ndarray
    y: np.ndarray
    win_e: np.ndarray
    win_t: np.ndarray
    weight: np.ndarray
    n_particles: int

    def __len__(self):
        return len(self.weight)

    def take(self, idx):
        return replace(self, **{f: getattr(self, f)[idx] for f in
                                ("x_cur", "x_prev", "has_prev", "y", "win_e", "win_t", "weight")})


def build_samples(m, results, observations, compress=False):
    """Pool every ``(j, i, t)`` sample of the given filter results.

    With ``compress``, samples that share a time-t particle (and therefore its
    parent) are merged and their weights summed; sums over the set are
    unchanged but far fewer rows remain once paths have coalesced.
    """
    parts = []
    for r, y in zip(results, observations):
        y = np.asarray(y, dtype=np.float64)
        N, T1 = r.paths.shape[0], r.paths.shape[1]
        we = all_windows(y, m.tau_e, 1)
        # transition into step t uses the window ending at t-1
        wt = np.vstack([np.zeros((1, m.tau_t * m.d_o)), all_windows(y, m.tau_t, 0)[:-1]])
        W = r.final_weights
        if compress:
            ts, idx, ws = [], [], []
            for t in range(T1):
                u, inv = np.unique(r.path_index[:, t], return_inverse=True)
                ts.append(np.full(len(u), t))
                idx.append(u)
                ws.append(np.bincount(inv, weights=W, minlength=len(u)))
            ts, idx, ws = np.concatenate(ts), np.concatenate(idx), np.concatenate(ws)
            x_cur = r.particles[ts, idx]
            parent = r.ancestor_table[ts, idx]
            x_prev = np.where((ts > 0)[:, None], r.particles[np.maximum(ts - 1, 0), parent], 0.0)
            parts.append((x_cur, x_prev, ts > 0, y[ts], we[ts], wt[ts], ws))
            continue
        prev = np.concatenate([np.zeros((N, 1, m.d_h)), r.paths[:, :-1]], axis=1)
        has_prev = np.broadcast_to(np.arange(T1) > 0, (N, T1))
        parts.append((
            r.paths.reshape(-1, m.d_h),
            prev.reshape(-1, m.d_h),
            has_prev.reshape(-1),
            np.broadcast_to(y, (N, T1, m.d_o)).reshape(-1, m.d_o),
            np.broadcast_to(we, (N,) + we.shape).reshape(N * T1, -1),
            np.broadcast_to(wt, (N,) + wt.shape).reshape(N * T1, -1),
            np.repeat(W, T1),
        ))
    cols = [np.concatenate([p[k] for p in parts]) for k in range(7)]
    n = results[0].n_particles if results else 0
    return SampleSet(*cols, n_particles=n)


def _head_loss_grad(net, inputs, targets, d, weight, tie):
    """Weighted Gaussian log-density of ``targets`` under ``net(inputs)`` and its parameter gradient."""
    acts = _forward_cache(net, inputs)
    out = acts[-1]
    mean, raw_lv = out[:, :d], out[:, d:]
    lv = np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)
    g = DiagGaussian(mean, lv)
    logp = gauss_logpdf(g, targets)
    value = float(np.sum(weight * logp))
    gm, glv = gauss_logpdf_grad(g, targets)
    glv = glv * ((raw_lv > LOG_VAR_MIN) & (raw_lv < LOG_VAR_MAX))
    U = weight[:, None] * np.concatenate([gm, glv], axis=1)
    grad, _ = _backprop(net, acts, U)
    if tie:
        grad.weights[-1][d:, :] = 0.0
    return value, grad


def batch_loss_grad(m, s):
    """Sum of sample losses over ``s`` and its gradients for ``(f_net, g_net)``."""
    ge_in = np.concatenate([s.x_cur, s.win_e], axis=1) if m.tau_e else s.x_cur
    v_e, grad_g = _head_loss_grad(m.g_net, ge_in, s.y, m.d_o, s.weight, m.tie_variance)
    mask = s.has_prev
    if np.any(mask):
        ft_in = np.concatenate([s.x_prev[mask], s.win_t[mask]], axis=1) if m.tau_t else s.x_prev[mask]
        v_t, grad_f = _head_loss_grad(m.f_net, ft_in, s.x_cur[mask], m.d_h, s.weight[mask], m.tie_variance)
    else:
        v_t, grad_f = 0.0, ParamGrad.zeros_like(m.f_net)
    value = v_e + v_t
    if not math.isfinite(value):
        raise NumericError("non-finite sample loss")
    return value, grad_f, grad_g


def sample_loss_grad(m, sample, weight):
    """Loss of one pooled sample and its gradients ``(value, grad_f, grad_g)``.

    ``sample`` maps ``y``, ``x`` (current particle), ``x_prev`` (``None`` at
    t=0), and optionally the windows ``win_e`` / ``win_t``.
    """
    x = np.asarray(sample["x"], dtype=np.float64)
    y = np.asarray(sample["y"], dtype=np.float64)
    if x.shape != (m.d_h,) or y.shape != (m.d_o,):
        raise InvalidArgument("sample shapes do not match the model")
    x_prev = sample.get("x_prev")
    has_prev = x_prev is not None
    x_prev = np.zeros(m.d_h) if x_prev is None else np.asarray(x_prev, dtype=np.float64)
    if x_prev.shape != (m.d_h,):
        raise InvalidArgument("previous particle has the wrong dimension")
    win_e = np.asarray(sample.get("win_e", np.zeros(m.tau_e * m.d_o)), dtype=np.float64)
    win_t = np.asarray(sample.get("win_t", np.zeros(m.tau_t * m.d_o)), dtype=np.float64)
    if win_e.shape != (m.tau_e * m.d_o,) or win_t.shape != (m.tau_t * m.d_o,):
        raise InvalidArgument("window lengths do not match the model")
    s = SampleSet(x[None], x_prev[None], np.array([has_prev]), y[None], win_e[None], win_t[None],
                  np.array([float(weight)]), 1)
    return batch_loss_grad(m, s)


def samples_q(m, s, chunk=65536):
    """Q-hat summed over every trajectory represented in ``s`` (no gradients)."""
    total = 0.0
    for lo in range(0, len(s), chunk):
        c = s.take(slice(lo, lo + chunk))
        total += float(c.weight @ gauss_logpdf(emission_dist(m, c.x_cur, c.win_e), c.y))
        mask = c.has_prev
        if np.any(mask):
            tr = transition_dist(m, c.x_prev[mask], c.win_t[mask])
            total += float(c.weight[mask] @ gauss_logpdf(tr, c.x_cur[mask]))
    return total


def _clip(grads, max_norm):
    norm = math.sqrt(sum(g.sq_norm() for g in grads))
    if max_norm and norm > max_norm:
        return [g.scale(max_norm / norm) for g in grads]
    return grads


def sgd_m_step(m, s, cfg, rng, opt_state):
    """``cfg.n_sgd_steps_per_m`` ascent steps on minibatches of ``s``."""
    n = len(s)
    full = cfg.minibatch_samples <= 0 or cfg.minibatch_samples >= n
    for _ in range(cfg.n_sgd_steps_per_m):
        batch = s if full else s.take(rng.integers(n, size=cfg.minibatch_samples))
        scale = s.n_particles / len(batch)
        _, gf, gg = batch_loss_grad(m, batch)
        gf, gg = _clip([gf.scale(-scale), gg.scale(-scale)], cfg.grad_clip)
        f_net, opt_state["f"] = optimizer_step(m.f_net, gf, opt_state["f"])
        g_net, opt_state["g"] = optimizer_step(m.g_net, gg, opt_state["g"])
        m = replace(m, f_net=f_net, g_net=g_net)
    return m


def _wls(phi, targets, w, ridge):
    A = phi.T @ (w[:, None] * phi) + ridge * np.eye(phi.shape[1])
    rhs = phi.T @ (w[:, None] * targets)
    try:
        beta = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        raise DegenerateStatisticsError("singular normal equations; add a ridge term") from None
    if not np.all(np.isfinite(beta)):
        raise DegenerateStatisticsError("non-finite regression coefficients")
    resid = targets - phi @ beta
    var = (w @ (resid * resid)) / w.sum()
    var = np.clip(var, np.exp(LOG_VAR_MIN), np.exp(LOG_VAR_MAX))
    return beta, var


def _affine_head(beta, var, d, n_in):
    w = np.vstack([beta[:-1].T, np.zeros((d, n_in))])
    b = np.concatenate([beta[-1], np.log(var)])
    return Mlp((n_in, 2 * d), (w,), (b,))


def closed_form_m_step(m, filters, data, ridge=1e-8):
    """Exact maximizer of Q-hat over affine means and constant variances.

    Observation windows, when present, enter as extra regressors.
    """
    if not m.is_vanilla:
        raise InvalidArgument("closed-form M-step needs depth-0 nets")
    obs = [tr.observations for tr in data] if isinstance(data, Dataset) else list(data)
    if len(obs) != len(filters):
        raise InvalidArgument("one filter result per trajectory is required")
    s = build_samples(m, filters, obs)
    ones = np.ones((len(s), 1))
    beta_e, var_e = _wls(np.hstack([s.x_cur, s.win_e, ones]), s.y, s.weight, ridge)
    g_net = _affine_head(beta_e, var_e, m.d_o, m.g_net.n_in)
    f_net = m.f_net
    mask = s.has_prev
    if np.any(mask):
        phi = np.hstack([s.x_prev[mask], s.win_t[mask], ones[mask]])
        beta_t, var_t = _wls(phi, s.x_cur[mask], s.weight[mask], ridge)
        f_net = _affine_head(beta_t, var_t, m.d_h, m.f_net.n_in)
    return replace(m, f_net=f_net, g_net=g_net, tie_variance=True)


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def run_filters(m, data, indices, N, seed, threads=1, ess_threshold=None):
    """Filter each selected trajectory with its own generator ``child_rng(seed, j)``."""
    def one(j):
        return bootstrap_filter(m, data[j].observations, N, child_rng(seed, j), ess_threshold)
    return _map(one, list(indices), threads)


def _use_closed_form(m, cfg):
    if cfg.m_step == "closed_form":
        return True
    return cfg.m_step == "auto" and m.is_vanilla and m.tie_variance


def new_optimizer_state(cfg):
    lr = cfg.learning_rate if cfg.learning_rate > 0 else 1.0
    return {"f": OptimizerState(lr, cfg.optimizer), "g": OptimizerState(lr, cfg.optimizer)}


def _check_data(m, data):
    if len(data) == 0:
        raise InvalidArgument("empty dataset")
    if data.require_dim() != m.d_o:
        raise InvalidData(f"dataset has feature dimension {data.feature_dim} but the model observes {m.d_o}")


def em_sgd_iteration(m, data, cfg, rng, opt_state=None, fraction=None, iteration=0):
    """One E-step over ``ceil(fraction * K)`` trajectories and one M-step.

    Returns ``(new_model, IterationRecord)``; ``q_before`` / ``q_after`` are
    evaluated on the same particles.
    """
    _check_data(m, data)
    start = time.perf_counter()
    rho = cfg.trajectory_fraction if fraction is None else fraction
    K = len(data)
    n_sel = min(K, math.ceil(rho * K - 1e-9))
    sel = np.sort(rng.choice(K, size=n_sel, replace=False))
    filter_seed = int(rng.integers(2**63))
    results = run_filters(m, data, sel, cfg.particle_count, filter_seed, cfg.threads, cfg.ess_threshold)
    obs = [data[j].observations for j in sel]
    samples = build_samples(m, results, obs)
    merged = build_samples(m, results, obs, compress=True)
    q_before = samples_q(m, merged)
    if _use_closed_form(m, cfg):
        new = closed_form_m_step(m, results, obs, cfg.ridge)
    elif cfg.learning_rate == 0 or cfg.n_sgd_steps_per_m == 0:
        new = m
    else:
        if opt_state is None:
            opt_state = new_optimizer_state(cfg)
        new = sgd_m_step(m, samples, cfg, rng, opt_state)
    q_after = samples_q(new, merged)
    rec = IterationRecord(
        iteration=iteration,
        loglik=float(sum(estimate_loglik(r) for r in results)),
        q_before=q_before,
        q_after=q_after,
        seconds=time.perf_counter() - start,
        fraction=rho,
        n_filters=len(results),
        filtered_loglik=float(sum(estimate_loglik(r) for r in results)),
    )
    return new, rec


def eval_indices(data, cfg):
    k = min(len(data), cfg.eval_trajectories)
    return np.sort(child_rng(cfg.seed, 3).choice(len(data), size=k, replace=False))


def eval_loglik(m, data, indices, cfg):
    if len(indices) == 0:
        return float("nan")
    results = run_filters(m, data, indices, cfg.particle_count, int(child_rng(cfg.seed, 4).integers(2**63)),
                          cfg.threads, cfg.ess_threshold)
    return float(sum(estimate_loglik(r) for r in results))


def train(m, data, cfg, callback=None):
    """``n_em_iters`` iterations at the configured fraction, then ``fine_tune_iters`` on all data."""
    cfg.validate()
    _check_data(m, data)
    history = TrainHistory()
    total = cfg.n_em_iters + cfg.fine_tune_iters
    if total == 0:
        return m, history
    rng = child_rng(cfg.seed, 2)
    opt_state = new_optimizer_state(cfg)
    ev = eval_indices(data, cfg)
    history.initial_loglik = eval_loglik(m, data, ev, cfg)
    for k in range(total):
        rho = cfg.trajectory_fraction if k < cfg.n_em_iters else 1.0
        m, rec = em_sgd_iteration(m, data, cfg, rng, opt_state, fraction=rho, iteration=k)
        t0 = time.perf_counter()
        rec.loglik = eval_loglik(m, data, ev, cfg)
        rec.seconds += time.perf_counter() - t0
        history.records.append(rec)
        if callback is not None:
            callback(rec)
    return m, history


def config_dict(cfg):
    return asdict(cfg)
