"""Prediction metrics and latent-space interpretability tools."""

from __future__ import annotations

import csv
import json
import logging
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import child_rng
from .dist import gauss_sample
from .errors import InvalidArgument, InvalidData
from .model import all_windows, emission_dist, transition_dist
from .smc import bootstrap_filter, estimate_loglik, filter_steps
from .train import _map

log = logging.getLogger(__name__)


@dataclass
class PredictionReport:
    traj_ids: list
    per_trajectory: list
    mean: float
    std: float
    n_particles: int
    model: str = ""
    metric: str = "euclidean"
    skipped: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["traj_id", "mean_error"])
            for tid, e in zip(self.traj_ids, self.per_trajectory):
                w.writerow([tid, repr(float(e))])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def traj_rng(seed, traj_id):
    """Generator for one trajectory, keyed by its id rather than its position."""
    return child_rng(seed, 5, zlib.crc32(str(traj_id).encode("utf-8")))


def describe(m):
    return f"d_h={m.d_h} d_o={m.d_o} depth=({m.f_net.depth},{m.g_net.depth}) tau=({m.tau_e},{m.tau_t})"


def predict_trajectory(m, y, N, rng, point="mean"):
    """One-step-ahead predictions ``yhat[t]`` of ``y[t+1]`` for ``t < T``."""
    y = np.asarray(y, dtype=np.float64)
    T = y.shape[0] - 1
    win_e = all_windows(y, m.tau_e, 0)  # emission at t+1 sees observations up to t
    win_t = all_windows(y, m.tau_t, 0)
    preds = np.empty((T, m.d_o))
    for t, x, log_w, _, _ in filter_steps(m, y, N, rng):
        if t == T:
            break
        w = np.exp(log_w)
        trans = transition_dist(m, x, win_t[t])
        x_next = trans.mean if point == "mean" else gauss_sample(trans, rng)
        emit = emission_dist(m, x_next, win_e[t])
        y_next = emit.mean if point == "mean" else gauss_sample(emit, rng)
        preds[t] = w @ y_next
    return preds


def one_step_error(m, data, N, seed=0, metric="euclidean", point="mean", threads=1):
    """Mean one-step-ahead prediction error per trajectory.

    Each trajectory is filtered with a generator keyed by its id, so results
    depend neither on ``threads`` nor on the order of the trajectories.
    """
    if metric not in ("euclidean", "mse"):
        raise InvalidArgument(f"unknown metric {metric!r}")
    if point not in ("mean", "sample"):
        raise InvalidArgument(f"unknown point estimate {point!r}")
    if len(data) and data.require_dim() != m.d_o:
        raise InvalidData(f"dataset has feature dimension {data.feature_dim} but the model observes {m.d_o}")
    usable = [j for j, tr in enumerate(data) if tr.T > 0]
    skipped = len(data) - len(usable)
    if skipped:
        log.warning("skipping %d trajectories with a single observation", skipped)

    def one(j):
        y = data[j].observations
        pred = predict_trajectory(m, y, N, traj_rng(seed, data[j].id), point)
        diff = pred - y[1:]
        if metric == "euclidean":
            return float(np.mean(np.linalg.norm(diff, axis=1)))
        return float(np.mean(np.sum(diff * diff, axis=1)))

    errs = _map(one, usable, threads)
    arr = np.array(errs)
    return PredictionReport(
        traj_ids=[data[j].id for j in usable],
        per_trajectory=errs,
        mean=float(arr.mean()) if len(arr) else float("nan"),
        std=float(arr.std()) if len(arr) else float("nan"),
        n_particles=N,
        model=describe(m),
        metric=metric,
        skipped=skipped,
    )


def heldout_loglik(m, data, N, seed=0, threads=1):
    """Per-trajectory particle log-likelihood estimates."""
    def one(j):
        return estimate_loglik(bootstrap_filter(m, data[j].observations, N, traj_rng(seed, data[j].id)))
    return np.array(_map(one, list(range(len(data))), threads))


@dataclass
class LatentPath:
    traj_id: str
    states: np.ndarray  # (T+1, d_h)
    method: str


def extract_latents(m, traj, N, rng, method="max_weight"):
    r = bootstrap_filter(m, traj.observations, N, rng)
    if method == "max_weight":
        states = r.paths[int(np.argmax(r.final_weights))]
    elif method == "weighted_mean":
        states = np.einsum("i,itd->td", r.final_weights, r.paths)
    else:
        raise InvalidArgument(f"unknown extraction method {method!r}")
    return LatentPath(traj.id, states.copy(), method)


def _sq_dists(points, centroids):
    return np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)


def kmeans(points, k, seed=0, max_iters=100, return_history=False):
    """Lloyd's algorithm with distance-weighted (k-means++) seeding.

    Returns ``(labels, centroids)`` and, with ``return_history``, the inertia
    after every assignment step.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise InvalidArgument("points must be a non-empty 2-D array")
    n = len(X)
    if not 1 <= k <= n:
        raise InvalidArgument(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = _sq_dists(X, centroids[:1]).ravel()
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            i = min(i, n - 1)
        else:
            i = int(rng.integers(n))
        centroids[c] = X[i]
        d2 = np.minimum(d2, _sq_dists(X, centroids[c:c + 1]).ravel())

    history = []
    labels = None
    for _ in range(max_iters):
        D = _sq_dists(X, centroids)
        new_labels = np.argmin(D, axis=1)  # argmin keeps the lowest index on ties
        history.append(float(D[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(D[np.arange(n), labels]))
                centroids[c] = X[far]
                labels[far] = c
    D = _sq_dists(X, centroids)
    labels = np.argmin(D, axis=1)
    if return_history:
        return labels, centroids, history
    return labels, centroids


def inertia(points, labels, centroids):
    X = np.asarray(points, dtype=np.float64)
    return float(np.sum((X - centroids[labels]) ** 2))


def pca(points, n_components, tol=1e-10, max_iters=10000):
    """Principal components by power iteration with deflation.

    Returns ``(projected, components, explained_variance)`` with components as
    rows.  Stops early, with a warning, once the remaining variance vanishes.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidArgument("points must be a 2-D array")
    n, dim = X.shape
    if not 1 <= n_components <= dim or dim > n:
        raise InvalidArgument(f"need n_components <= dim <= #points, got {n_components}, {dim}, {n}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(n - 1, 1)
    scale = np.trace(cov)
    rng = np.random.default_rng(0)
    comps, evals = [], []
    work = cov.copy()
    for _ in range(n_components):
        if scale <= 0 or np.trace(work) <= tol * scale:
            warnings.warn("covariance is degenerate; returning fewer components", RuntimeWarning)
            break
        v = rng.standard_normal(dim)
        for c in comps:
            v -= (v @ c) * c
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iters):
            w = work @ v
            for c in comps:
                w -= (w @ c) * c
            lam = float(v @ w)
            if np.linalg.norm(w - lam * v) <= tol * scale:
                break
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            v = w / norm
        if lam <= tol * scale:
            warnings.warn("covariance is degenerate; returning fewer components", RuntimeWarning)
            break
        comps.append(v)
        evals.append(lam)
        work = work - lam * np.outer(v, v)
    C = np.array(comps).reshape(len(comps), dim)
    return Xc @ C.T, C, np.array(evals)


def label_agreement(labels, truth):
    """Fraction of matching labels under the best one-to-one relabelling."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    if labels.shape != truth.shape:
        raise InvalidArgument("label arrays differ in length")
    a = np.unique(labels)
    b = np.unique(truth)
    counts = np.array([[np.sum((labels == i) & (truth == j)) for j in b] for i in a])
    if len(a) <= 6 and len(b) <= 6 and len(a) <= len(b):
        best = max(sum(counts[i, p[i]] for i in range(len(a))) for p in permutations(range(len(b)), len(a)))
    else:
        r, c = linear_sum_assignment(-counts)
        best = counts[r, c].sum()
    return float(best) / len(labels)


def write_latents_csv(paths, path, labels=None, columns=None):
    """``traj_id,t,h0..`` rows, plus a ``label`` column when labels are given."""
    rows_written = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = paths[0].states.shape[1] if paths else 0
        names = columns or [f"h{k}" for k in range(dim)]
        w.writerow(["traj_id", "t"] + names + (["label"] if labels is not None else []))
        for lp in paths:
            for t, z in enumerate(lp.states):
                row = [lp.traj_id, t] + [repr(float(v)) for v in z]
                if labels is not None:
                    row.append(int(labels[rows_written]))
                w.writerow(row)
                rows_written += 1


def read_latents_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    cols = [i for i, c in enumerate(header) if c.startswith("h")]
    groups = {}
    for row in rows[1:]:
        groups.setdefault(row[0], []).append([float(row[i]) for i in cols])
    return [LatentPath(tid, np.array(v), "file") for tid, v in groups.items()]
