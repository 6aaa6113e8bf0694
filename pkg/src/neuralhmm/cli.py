"""Command-line entry point: ``neuralhmm {generate,train,eval,latents,cluster}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Outputs go to ``--out`` / ``--out-dir``, defaulting to ``$NEURALHMM_OUT``
(or the working directory).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .data import SyntheticConfig, generate_synthetic, load_csv, save_csv, train_test_split, write_sidecar
from .errors import InvalidArgument, InvalidData, NumericError
from .model import NeuralHmm, make_model
from .train import TrainConfig, train

log = logging.getLogger("neuralhmm")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
OUT_ENV = "NEURALHMM_OUT"


class UsageError(Exception):
    pass


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _default_out():
    return Path(os.environ.get(OUT_ENV, "."))


def _out_dir(args):
    d = Path(args.out_dir) if args.out_dir else _default_out()
    d.mkdir(parents=True, exist_ok=True)
    return d


def _add_model_args(p):
    p.add_argument("--depth", type=_nonneg_int, default=3, help="hidden layers per net (0 = linear-Gaussian)")
    p.add_argument("--width", type=_positive_int, default=32)
    p.add_argument("--dh", type=_positive_int, default=2, help="latent dimension")
    p.add_argument("--tau-e", type=_nonneg_int, default=0, help="emission observation window")
    p.add_argument("--tau-t", type=_nonneg_int, default=0, help="transition observation window")
    p.add_argument("--tie-variance", action="store_true", help="one learnable variance per dimension")


def _add_train_args(p):
    d = TrainConfig()
    p.add_argument("--particles", type=_positive_int, default=d.particle_count)
    p.add_argument("--em-iters", type=_nonneg_int, default=d.n_em_iters)
    p.add_argument("--sgd-steps", type=_nonneg_int, default=d.n_sgd_steps_per_m)
    p.add_argument("--minibatch", type=_nonneg_int, default=d.minibatch_samples)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=d.optimizer)
    p.add_argument("--fraction", type=_positive_float, default=d.trajectory_fraction,
                   help="fraction of trajectories filtered per E-step")
    p.add_argument("--fine-tune-iters", type=_nonneg_int, default=d.fine_tune_iters)
    p.add_argument("--eval-trajs", type=_nonneg_int, default=d.eval_trajectories)


def _add_common(p):
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    p.add_argument("--config", help="JSON file whose keys override command-line flags")


def build_parser():
    parser = argparse.ArgumentParser(prog="neuralhmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthetic bouncing-between-targets dataset")
    g.add_argument("--targets", type=_positive_int, default=5)
    g.add_argument("--dim", type=_positive_int, default=2)
    g.add_argument("--steps", type=_nonneg_int, default=200)
    g.add_argument("--trajs", type=_nonneg_int, default=50)
    g.add_argument("--sigma", type=_positive_float, default=0.5)
    g.add_argument("--epsilon", type=_positive_float, default=1.0)
    g.add_argument("--box-low", type=float, default=0.0)
    g.add_argument("--box-high", type=float, default=10.0)
    g.add_argument("--out", help="dataset CSV path (a .json sidecar is written next to it)")
    _add_common(g)

    t = sub.add_parser("train", help="fit a neural HMM by particle EM")
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir")
    t.add_argument("--timing", action="store_true", help="record wall-clock seconds in history.csv")
    _add_model_args(t)
    _add_train_args(t)
    _add_common(t)

    e = sub.add_parser("eval", help="train and evaluate over a parameter sweep")
    e.add_argument("--data", required=True)
    e.add_argument("--out-dir")
    e.add_argument("--sweep", choices=["depth", "dh", "particles", "fraction"], required=True)
    e.add_argument("--values", required=True, help="comma-separated sweep values")
    e.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed)")
    e.add_argument("--test-fraction", type=float, default=0.2)
    e.add_argument("--eval-particles", type=_positive_int, default=None,
                   help="particles for evaluation (default: training particle count)")
    _add_model_args(e)
    _add_train_args(e)
    _add_common(e)

    la = sub.add_parser("latents", help="extract latent paths with the particle filter")
    la.add_argument("--model", required=True)
    la.add_argument("--data", required=True)
    la.add_argument("--traj", action="append", help="trajectory id (repeatable; default all)")
    la.add_argument("--particles", type=_positive_int, default=256)
    la.add_argument("--method", choices=["max_weight", "weighted_mean"], default="max_weight")
    la.add_argument("--out")
    _add_common(la)

    c = sub.add_parser("cluster", help="K-means (and optional PCA) over latent paths")
    c.add_argument("--latents", help="latents CSV from the latents command")
    c.add_argument("--model")
    c.add_argument("--data", help="dataset CSV; also used to score agreement with synthetic targets")
    c.add_argument("--traj", action="append")
    c.add_argument("--particles", type=_positive_int, default=256)
    c.add_argument("--method", choices=["max_weight", "weighted_mean"], default="max_weight")
    c.add_argument("--k", type=_positive_int, required=True)
    c.add_argument("--pca", type=_nonneg_int, default=0, help="project onto this many components (0 = off)")
    c.add_argument("--max-iters", type=_positive_int, default=100)
    c.add_argument("--out")
    _add_common(c)
    return parser


def apply_config(args, parser):
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config) as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest) or dest in ("command", "config"):
            raise UsageError(f"unknown config key {key!r}")
        setattr(args, dest, value)
    return args


def _train_config(args, **over):
    cfg = TrainConfig(
        n_em_iters=args.em_iters,
        n_sgd_steps_per_m=args.sgd_steps,
        minibatch_samples=args.minibatch,
        learning_rate=args.lr,
        particle_count=args.particles,
        trajectory_fraction=args.fraction,
        fine_tune_iters=args.fine_tune_iters,
        seed=args.seed,
        optimizer=args.optimizer,
        eval_trajectories=args.eval_trajs,
        threads=args.threads,
    )
    for k, v in over.items():
        setattr(cfg, k, v)
    try:
        return cfg.validate()
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None


def _build_model(args, d_o, seed, depth=None, d_h=None):
    depth = args.depth if depth is None else depth
    d_h = args.dh if d_h is None else d_h
    if depth == 0:
        # affine nets with tied variance: trained by the closed-form M-step
        return make_model(d_h, d_o, depth=0, seed=seed, tau_e=args.tau_e, tau_t=args.tau_t, tie_variance=True)
    return make_model(d_h, d_o, depth=depth, width=args.width, seed=seed,
                      tau_e=args.tau_e, tau_t=args.tau_t, tie_variance=args.tie_variance)


def cmd_generate(args):
    cfg = SyntheticConfig(
        n_targets=args.targets, feature_dim=args.dim, sigma=args.sigma, epsilon=args.epsilon,
        T=args.steps, K=args.trajs, box_low=args.box_low, box_high=args.box_high, seed=args.seed,
    )
    try:
        cfg.validate()
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out) if args.out else _default_out() / "data.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(cfg)
    save_csv(data, out)
    write_sidecar(cfg, out.with_suffix(".json"))
    log.info("wrote %d trajectories to %s", len(data), out)


def cmd_train(args):
    data = load_csv(args.data)
    d_o = data.require_dim()
    m = _build_model(args, d_o, args.seed)
    cfg = _train_config(args)
    out = _out_dir(args)

    def progress(rec):
        log.info("iter %d loglik %.4f q %.4f -> %.4f", rec.iteration, rec.loglik, rec.q_before, rec.q_after)

    m, history = train(m, data, cfg, callback=progress)
    m.save(out / "model.json")
    history.write_csv(out / "history.csv", timing=args.timing)
    (out / "train_config.json").write_text(json.dumps(cfg.__dict__, indent=1, sort_keys=True) + "\n")


def _parse_values(text, kind):
    items = [s for s in (x.strip() for x in str(text).split(",")) if s]
    if not items:
        raise UsageError("empty sweep list")
    try:
        return [kind(s) for s in items]
    except ValueError:
        raise UsageError(f"cannot parse sweep values {text!r}") from None


def cmd_eval(args):
    data = load_csv(args.data)
    d_o = data.require_dim()
    kind = float if args.sweep == "fraction" else int
    values = _parse_values(args.values, kind)
    seeds = _parse_values(args.seeds, int) if args.seeds is not None else [args.seed]
    if not 0 < args.test_fraction < 1:
        raise UsageError("--test-fraction must lie in (0, 1)")
    out = _out_dir(args)
    rows = []
    for seed in seeds:
        train_set, test_set = train_test_split(data, args.test_fraction, seed)
        for value in values:
            depth, d_h, over = None, None, {"seed": seed}
            if args.sweep == "depth":
                depth = value
            elif args.sweep == "dh":
                d_h = value
            elif args.sweep == "particles":
                over["particle_count"] = value
            else:
                over["trajectory_fraction"] = value
            cfg = _train_config(args, **over)
            m = _build_model(args, d_o, seed, depth=depth, d_h=d_h)
            m, _ = train(m, train_set, cfg)
            n_eval = args.eval_particles or cfg.particle_count
            rep = analysis.one_step_error(m, test_set, n_eval, seed=seed, threads=args.threads)
            ll = analysis.heldout_loglik(m, test_set, n_eval, seed=seed, threads=args.threads)
            rows.append((args.sweep, value, "one_step_error", rep.mean, rep.std, seed))
            rows.append((args.sweep, value, "heldout_loglik", float(ll.mean()), float(ll.std()), seed))
            log.info("%s=%s seed=%d error %.4f loglik %.3f", args.sweep, value, seed, rep.mean, ll.mean())
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep_var", "value", "metric", "mean", "std", "seed"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), r[2], repr(r[3]), repr(r[4]), r[5]])
    summary = {}
    for var, value, metric, mean, _, _ in rows:
        summary.setdefault(metric, {}).setdefault(repr(value), []).append(mean)
    summary = {
        metric: {v: {"mean": float(np.mean(ms)), "std": float(np.std(ms)), "n_seeds": len(ms)} for v, ms in by_v.items()}
        for metric, by_v in summary.items()
    }
    (out / "sweep_summary.json").write_text(
        json.dumps({"sweep_var": args.sweep, "values": values, "seeds": seeds, "metrics": summary},
                   indent=1, sort_keys=True) + "\n")


def _load_model(path):
    try:
        return NeuralHmm.load(path)
    except FileNotFoundError:
        raise InvalidData(f"model file not found: {path}") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise InvalidData(f"malformed model file {path}: {exc}") from None


def _latent_paths(args):
    m = _load_model(args.model)
    data = load_csv(args.data)
    if data.require_dim() != m.d_o:
        raise InvalidData(f"dataset has feature dimension {data.feature_dim} but the model observes {m.d_o}")
    ids = args.traj or [tr.id for tr in data]
    paths = []
    for tid in ids:
        try:
            idx = next(j for j, tr in enumerate(data) if tr.id == tid)
        except StopIteration:
            raise InvalidData(f"trajectory {tid!r} not in {args.data}") from None
        rng = analysis.traj_rng(args.seed, tid)
        paths.append(analysis.extract_latents(m, data[idx], args.particles, rng, args.method))
    return paths, data


def cmd_latents(args):
    paths, _ = _latent_paths(args)
    out = Path(args.out) if args.out else _default_out() / "latents.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_latents_csv(paths, out)


def cmd_cluster(args):
    data = None
    if args.latents:
        try:
            paths = analysis.read_latents_csv(args.latents)
        except FileNotFoundError:
            raise InvalidData(f"latents file not found: {args.latents}") from None
        if args.data:
            data = load_csv(args.data)
    elif args.model and args.data:
        paths, data = _latent_paths(args)
    else:
        raise UsageError("cluster needs --latents or both --model and --data")
    points = np.vstack([p.states for p in paths])
    if args.k > len(points):
        raise UsageError(f"--k {args.k} exceeds the number of latent states ({len(points)})")
    columns = None
    summary = {"k": args.k, "n_points": int(len(points))}
    if args.pca:
        if args.pca > points.shape[1]:
            raise UsageError(f"--pca {args.pca} exceeds the latent dimension {points.shape[1]}")
        proj, comps, evals = analysis.pca(points, args.pca)
        points = proj
        columns = [f"pc{k}" for k in range(proj.shape[1])]
        summary["explained_variance"] = evals.tolist()
    labels, centroids = analysis.kmeans(points, args.k, seed=args.seed, max_iters=args.max_iters)
    summary["inertia"] = analysis.inertia(points, labels, centroids)
    if data is not None and all(data.by_id(p.traj_id).targets is not None for p in paths):
        truth = np.concatenate([data.by_id(p.traj_id).targets for p in paths])
        summary["target_agreement"] = analysis.label_agreement(labels, truth)
    out = Path(args.out) if args.out else _default_out() / "clusters.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    projected = []
    start = 0
    for p in paths:
        n = len(p.states)
        projected.append(analysis.LatentPath(p.traj_id, points[start:start + n], p.method))
        start += n
    analysis.write_latents_csv(projected, out, labels=labels, columns=columns)
    out.with_suffix(".json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "latents": cmd_latents,
    "cluster": cmd_cluster,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        apply_config(args, parser)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"neuralhmm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidData, OSError) as exc:
        print(f"neuralhmm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidArgument as exc:
        print(f"neuralhmm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"neuralhmm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
