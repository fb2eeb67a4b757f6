"""
Command-line interface.

    noisecov [--config C] [--seed S] [--out DIR] [--threads N] <command> [options]

Commands: simulate, fit, estimate, predict, interpolate, decode, fisher,
evaluate, cv, run. Each prints a JSON summary on stdout and exits 0; on
failure it prints ``{"error": .., "message": ..}`` on stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisecov", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("--config", help="JSON config (see noisecov.harness.experiment)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default="noisecov-out", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="generate a synthetic dataset from config.data.synthetic")

    s = sub.add_parser("fit", help="fit the Wishart model to a dataset")
    s.add_argument("--data", required=True)

    s = sub.add_parser("estimate", help="baseline covariance estimates")
    s.add_argument("--data", required=True)
    s.add_argument("--method", required=True, choices=["empirical", "grand", "wa", "lw", "glasso"])
    s.add_argument("--alpha", type=float, default=0.5, help="weighted-average mixing weight")
    s.add_argument("--rho", type=float, default=0.1, help="graphical lasso penalty")

    s = sub.add_parser("predict", help="posterior moments at query conditions")
    s.add_argument("--posterior", required=True)
    s.add_argument("--coords", required=True, help="JSON list of points, or a CSV file with one point per row")
    s.add_argument("--samples", type=int, default=100)

    s = sub.add_parser("interpolate", help="hold out conditions, fit, and predict them")
    s.add_argument("--data", default=None, help="dataset directory (default: config data)")
    s.add_argument("--holdout", default=None, help="JSON list of condition indices")
    s.add_argument("--fraction", type=float, default=0.2)

    s = sub.add_parser("decode", help="QDA/LDA decoding accuracy on test trials")
    s.add_argument("--data", required=True, help="test dataset directory")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--posterior")
    src.add_argument("--moments", help="moment directory written by fit/estimate")
    s.add_argument("--mode", choices=["qda", "lda"], default="qda")

    s = sub.add_parser("fisher", help="Fisher information curve along one axis")
    s.add_argument("--posterior", required=True)
    s.add_argument("--points", type=int, default=40)
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--axis", type=int, default=0)

    s = sub.add_parser("evaluate", help="held-out log-likelihood (and operator norm if truth is known)")
    s.add_argument("--data", required=True, help="test dataset directory")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--posterior")
    src.add_argument("--moments")
    s.add_argument("--mode", choices=["single_sample", "mc"], default="single_sample")
    s.add_argument("--samples", type=int, default=1)

    s = sub.add_parser("cv", help="cross-validated hyperparameter selection (config.cv.grid)")
    s.add_argument("--data", default=None)
    s.add_argument("--folds", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)

    sub.add_parser("run", help="full experiment from the config")
    return p


def _limit_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be >= 1")
    for v in _THREAD_VARS:
        os.environ[v] = str(n)
    try:  # optional; the environment variables cover the common BLAS builds
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:
        pass


def _config(args) -> dict:
    from .harness.experiment import load_config

    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    return load_config(raw)


def _fit_config(cfg, observation):
    from .inference import FitConfig

    fc = {"seed": cfg["seed"], **cfg["fit"]}
    if observation == "poisson":
        return FitConfig.poisson_defaults(**{k: v for k, v in fc.items() if k in FitConfig.__dataclass_fields__})
    return FitConfig.from_dict(fc)


def _coords(text):
    import numpy as np

    if os.path.exists(text):
        return np.loadtxt(text, delimiter=",", ndmin=2)
    return np.asarray(json.loads(text), dtype=float)


def _moments_source(args, ds, seed):
    """(mu, Sigma, description) at the dataset's conditions."""
    from .harness.bundle import load_posterior
    from .harness.data import read_moments
    from .posterior import predict_moments

    if args.posterior:
        post = load_posterior(args.posterior)
        S = 1 if post.q.family == "delta" else 20
        ms = predict_moments(post, ds.grid.coords, S=S, seed=seed)
        return ms.mu.mean(0), ms.Sigma.mean(0), post
    mf = read_moments(args.moments)
    if mf.Sigma.shape[0] != ds.C:
        raise ValueError("moment files and dataset disagree on the number of conditions")
    return mf.mu, mf.Sigma, None


def _run(args) -> dict:
    import numpy as np

    from . import baselines as bl
    from .harness import data as hd
    from .harness.bundle import load_posterior, save_posterior, write_elbo_trace
    from .harness.cv import build_spec, cv_select
    from .harness.experiment import gaussian_heldout_loglik, load_data, run_experiment
    from .inference import fit
    from .model import MomentField

    cfg = _config(args)
    seed = int(cfg["seed"])
    out = args.out
    os.makedirs(out, exist_ok=True)
    cmd = args.command

    if cmd == "simulate":
        ds = load_data(cfg)
        hd.write_dataset(ds, out)
        return {"dataset": out, "N": ds.N, "C": ds.C, "trials": int(ds.counts.sum())}

    if cmd == "fit":
        ds = hd.read_dataset(args.data)
        spec = build_spec(ds.grid, ds.N, observation=ds.observation, **cfg["model"])
        post = fit(spec, ds.grid.coords, ds.trials, _fit_config(cfg, ds.observation))
        save_posterior(post, os.path.join(out, "posterior.npz"))
        write_elbo_trace(os.path.join(out, "elbo_trace.csv"), post.elbo_trace)
        from .posterior import predict_moments

        S = 1 if post.q.family == "delta" else 20
        ms = predict_moments(post, ds.grid.coords, S=S, seed=seed)
        hd.write_moments(os.path.join(out, "moments"), MomentField(ms.mu.mean(0), ms.Sigma.mean(0)))
        return {"posterior": os.path.join(out, "posterior.npz"), "final_elbo": float(post.elbo_trace[-1])}

    if cmd == "estimate":
        ds = hd.read_dataset(args.data)
        params = {"alpha": args.alpha} if args.method == "wa" else {"rho": args.rho} if args.method == "glasso" else {}
        est = bl.estimate(ds.trials, args.method, **params)
        hd.write_moments(out, MomentField(bl.condition_means(ds.trials), est.Sigma))
        return {"method": args.method, "moments": out, "singular_conditions": int(np.sum(est.singular))}

    if cmd == "predict":
        from .posterior import predict_moments

        post = load_posterior(args.posterior)
        ms = predict_moments(post, _coords(args.coords), S=args.samples, seed=seed)
        hd.write_moments(out, MomentField(ms.mu.mean(0), ms.Sigma.mean(0)))
        hd.write_matrix_csv(os.path.join(out, "coords.csv"), ms.coords,
                            [f"x{i}" for i in range(ms.coords.shape[1])])
        return {"moments": out, "points": int(ms.coords.shape[0]), "samples": ms.S, "lifted": ms.lifted}

    if cmd == "interpolate":
        c = dict(cfg)
        if args.data:
            c["data"] = {"path": args.data}
        c["split"] = {"scheme": "holdout_conditions"}
        if args.holdout:
            c["split"]["indices"] = json.loads(args.holdout)
        else:
            c["split"]["fraction"] = args.fraction
        c["methods"] = ["wishart", "grand"]
        c["metrics"] = ["loglik", "opnorm"]
        rep = run_experiment(c, out)
        return {"report": os.path.join(out, "report.json"), "incomplete": rep["incomplete"]}

    if cmd == "decode":
        from .analysis import ClassModel, confusion_counts, decode_accuracy

        ds = hd.read_dataset(args.data)
        mu, Sig, _ = _moments_source(args, ds, seed)
        if args.mode == "lda":
            Sig = Sig.mean(axis=0)
        model = ClassModel(mu, Sig, args.mode)
        labels = np.concatenate([np.full(len(t), c) for c, t in enumerate(ds.trials)])
        Y = np.vstack(ds.trials)
        res = {"mode": args.mode, "accuracy": decode_accuracy(model, Y, labels),
               "confusion": confusion_counts(model, Y, labels).tolist()}
        hd.dump_json(res, os.path.join(out, "decode.json"))
        return res

    if cmd == "fisher":
        from .analysis import fisher_curve

        post = load_posterior(args.posterior)
        coords = post.coords
        spec_axis = post.spec.k_mu.axes[args.axis]
        if spec_axis.periodic:
            pts = np.arange(args.points) * (spec_axis.period / args.points)
        else:
            pts = np.linspace(coords[:, args.axis].min(), coords[:, args.axis].max(), args.points)
        X = np.tile(np.median(coords, axis=0), (args.points, 1))
        X[:, args.axis] = pts
        fe = fisher_curve(post, X, axis=args.axis, S=args.samples, seed=seed)
        hd.write_matrix_csv(os.path.join(out, "fisher.csv"), fe.table(),
                            [f"x{i}" for i in range(X.shape[1])] + ["mean", "lower", "upper"])
        lo, hi = fe.interval
        res = {"axis": args.axis, "points": pts.tolist(), "mean": fe.mean.tolist(), "lower": lo.tolist(),
               "upper": hi.tolist()}
        hd.dump_json(res, os.path.join(out, "fisher.json"))
        return {"fisher": os.path.join(out, "fisher.csv"), "points": args.points}

    if cmd == "evaluate":
        from .analysis import operator_norm_error
        from .posterior import heldout_loglik

        ds = hd.read_dataset(args.data)
        mu, Sig, post = _moments_source(args, ds, seed)
        res = {}
        if post is not None:
            res["loglik"] = heldout_loglik(post, ds.trials, mode=args.mode, S=args.samples, seed=seed,
                                           coords=ds.grid.coords)
            res["loglik_kind"] = f"gaussian-{args.mode}"
        else:
            res["loglik"] = gaussian_heldout_loglik(ds, mu, Sig)
            res["loglik_kind"] = "gaussian-plugin"
        if ds.truth is not None:
            res["opnorm_mean"] = float(np.mean(operator_norm_error(Sig, ds.truth.Sigma)))
        else:
            res["opnorm_mean"] = None
            res["opnorm_note"] = "unavailable: dataset has no ground truth"
        hd.dump_json(res, os.path.join(out, "evaluate.json"))
        return res

    if cmd == "cv":
        ds = hd.read_dataset(args.data) if args.data else load_data(cfg)
        cvc = cfg.get("cv", {})
        grid = cvc.get("grid", {"lambda_sigma": [0.1, 1.0, 10.0]})
        folds = args.folds or int(cvc.get("folds", 3))
        base = {k: v for k, v in cfg["model"].items()}
        res = cv_select(ds, grid, folds=folds, seed=seed, config=_fit_config(cfg, ds.observation),
                        base=base, n_jobs=args.jobs)
        hd.dump_json(res.to_dict(), os.path.join(out, "cv.json"))
        return {"best": res.best, "best_score": res.best_score}

    if cmd == "run":
        rep = run_experiment(cfg, out)
        return {"report": os.path.join(out, "report.json"), "incomplete": rep["incomplete"]}

    raise ValueError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _limit_threads(args.threads)
        res = _run(args)
    except Exception as err:  # reported as JSON, never as a traceback
        print(json.dumps({"error": type(err).__name__, "message": str(err), "command": args.command}),
              file=sys.stderr)
        return 1
    from .harness.data import dump_json

    sys.stdout.write(dump_json(res))
    return 0


if __name__ == "__main__":
    sys.exit(main())
