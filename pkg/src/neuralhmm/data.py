"""Trajectory datasets: the bouncing-between-targets generator and CSV persistence.

CSV layout, one row per time step, sorted by ``(traj_id, t)``::

    traj_id,t,y0,...,y{d-1}[,target_idx,x0,...,x{d-1}]
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, InvalidData, ParseError


def child_rng(seed, *keys):
    """Generator for stream ``keys`` under ``seed``, independent of call order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


@dataclass
class Trajectory:
    id: str
    observations: np.ndarray  # (T+1, d)
    targets: np.ndarray = None  # (T+1,) target index i_t, synthetic data only
    latents: np.ndarray = None  # (T+1, d) sampled point x_t, synthetic data only

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))

    @property
    def T(self):
        return self.observations.shape[0] - 1

    @property
    def dim(self):
        return self.observations.shape[1]


@dataclass
class Dataset:
    trajectories: list
    feature_dim: int = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {tr.dim for tr in self.trajectories}
        if len(dims) > 1:
            raise InvalidData(f"trajectories have inconsistent dimensions {sorted(dims)}")
        if dims:
            d = dims.pop()
            if self.feature_dim is not None and self.feature_dim != d:
                raise InvalidData(f"declared feature_dim {self.feature_dim} but trajectories have {d}")
            self.feature_dim = d

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def by_id(self, traj_id):
        for tr in self.trajectories:
            if tr.id == traj_id:
                return tr
        raise KeyError(traj_id)

    def require_dim(self):
        if self.feature_dim is None:
            raise InvalidData("dataset is empty; feature dimension undefined")
        return self.feature_dim

    def subset(self, indices):
        return Dataset([self.trajectories[i] for i in indices], self.feature_dim, dict(self.provenance))


@dataclass
class SyntheticConfig:
    n_targets: int = 5
    feature_dim: int = 2
    sigma: float = 0.5
    epsilon: float = 1.0
    T: int = 200
    K: int = 50
    box_low: float = 0.0
    box_high: float = 10.0
    seed: int = 0

    def validate(self):
        if self.n_targets < 1 or self.feature_dim < 1:
            raise InvalidArgument("need at least one target and one feature dimension")
        if not (self.sigma > 0 and self.epsilon > 0):
            raise InvalidArgument("sigma and epsilon must be positive")
        if self.T < 0 or self.K < 0:
            raise InvalidArgument("T and K must be non-negative")
        if not self.box_high > self.box_low:
            raise InvalidArgument("empty target box")

    def to_dict(self):
        return asdict(self)


def generate_targets(cfg):
    rng = child_rng(cfg.seed, 0)
    return rng.uniform(cfg.box_low, cfg.box_high, size=(cfg.n_targets, cfg.feature_dim))


def generate_trajectory(cfg, targets, rng, traj_id):
    d, T = cfg.feature_dim, cfg.T
    ys = np.empty((T + 1, d))
    xs = np.empty((T + 1, d))
    idx = np.empty(T + 1, dtype=np.int64)
    y = rng.uniform(cfg.box_low, cfg.box_high, size=d)
    i_prev = rng.integers(cfg.n_targets)
    for t in range(T + 1):
        ys[t] = y
        if np.linalg.norm(y - targets[i_prev]) <= cfg.epsilon:
            i = rng.integers(cfg.n_targets)
        else:
            i = i_prev
        x = targets[i] + cfg.sigma * rng.standard_normal(d)
        # x == y has probability zero; redraw if it happens
        while not np.linalg.norm(x - y) > 0:
            x = targets[i] + cfg.sigma * rng.standard_normal(d)
        xs[t] = x
        idx[t] = i
        step = x - y
        y = y + step / np.linalg.norm(step)
        i_prev = i
    return Trajectory(traj_id, ys, idx, xs)


def generate_synthetic(cfg):
    cfg.validate()
    targets = generate_targets(cfg)
    width = len(str(max(cfg.K - 1, 0)))
    trajs = [
        generate_trajectory(cfg, targets, child_rng(cfg.seed, 1, j), f"s{j:0{width}d}")
        for j in range(cfg.K)
    ]
    prov = {"source": "synthetic", "config": cfg.to_dict(), "targets": targets.tolist()}
    return Dataset(trajs, cfg.feature_dim, prov)


def _fmt(v):
    return repr(float(v))


def save_csv(data, path):
    d = data.feature_dim or 0
    has_latents = len(data) > 0 and all(tr.targets is not None and tr.latents is not None for tr in data)
    header = ["traj_id", "t"] + [f"y{k}" for k in range(d)]
    if has_latents:
        header += ["target_idx"] + [f"x{k}" for k in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for tr in sorted(data, key=lambda tr: tr.id):
            for t in range(tr.T + 1):
                row = [tr.id, str(t)] + [_fmt(v) for v in tr.observations[t]]
                if has_latents:
                    row += [str(int(tr.targets[t]))] + [_fmt(v) for v in tr.latents[t]]
                w.writerow(row)


def load_csv(path):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return Dataset([], None, {"source": "csv", "path": str(path)})
    header = rows[0]
    if header[:2] != ["traj_id", "t"]:
        raise ParseError("header must start with traj_id,t", line=1, path=path)
    ycols = [c for c in header[2:] if c.startswith("y")]
    d = len(ycols)
    if header[2:2 + d] != [f"y{k}" for k in range(d)] or d == 0:
        raise ParseError("expected observation columns y0..y{d-1}", line=1, path=path)
    rest = header[2 + d:]
    has_latents = bool(rest)
    if has_latents and rest != ["target_idx"] + [f"x{k}" for k in range(d)]:
        raise ParseError("expected latent columns target_idx,x0..x{d-1}", line=1, path=path)
    groups = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} columns, found {len(row)}", line=lineno, path=path)
        try:
            t = int(row[1])
            y = [float(v) for v in row[2:2 + d]]
            lat = (int(row[2 + d]), [float(v) for v in row[3 + d:]]) if has_latents else None
        except ValueError as exc:
            raise ParseError(f"non-numeric value ({exc})", line=lineno, path=path) from None
        groups.setdefault(row[0], []).append((t, y, lat, lineno))
    trajs = []
    for tid in sorted(groups):
        recs = sorted(groups[tid], key=lambda r: r[0])
        ts = [r[0] for r in recs]
        if ts != list(range(len(ts))):
            raise ParseError(f"trajectory {tid!r} has non-contiguous time steps", line=recs[0][3], path=path)
        obs = np.array([r[1] for r in recs])
        targets = latents = None
        if has_latents:
            targets = np.array([r[2][0] for r in recs], dtype=np.int64)
            latents = np.array([r[2][1] for r in recs])
        trajs.append(Trajectory(tid, obs, targets, latents))
    return Dataset(trajs, d, {"source": "csv", "path": str(path)})


def train_test_split(data, test_fraction, seed):
    """Trajectory-level split; returns ``(train, test)``."""
    if not 0 < test_fraction < 1:
        raise InvalidArgument(f"test fraction must lie in (0, 1), got {test_fraction}")
    K = len(data)
    n_test = int(round(test_fraction * K))
    perm = child_rng(seed, 7).permutation(K)
    test_idx = sorted(perm[:n_test].tolist())
    train_idx = sorted(perm[n_test:].tolist())
    return data.subset(train_idx), data.subset(test_idx)


def standardize(data, mean=None, std=None):
    """Per-feature affine rescaling of every observation.

    Statistics default to those pooled over ``data``; pass the training
    statistics to transform a test split consistently.  Returns
    ``(dataset, mean, std)``; synthetic latents are kept unchanged.
    """
    if len(data) == 0:
        raise InvalidData("cannot standardize an empty dataset")
    if mean is None or std is None:
        pooled = np.vstack([tr.observations for tr in data])
        mean = pooled.mean(axis=0) if mean is None else mean
        std = pooled.std(axis=0) if std is None else std
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise InvalidData("a feature is constant; cannot standardize")
    trajs = [Trajectory(tr.id, (tr.observations - mean) / std, tr.targets, tr.latents) for tr in data]
    prov = dict(data.provenance, standardized={"mean": mean.tolist(), "std": std.tolist()})
    return Dataset(trajs, data.feature_dim, prov), mean, std


def write_sidecar(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
