"""
Config-driven experiments: data -> split -> fits -> evaluation -> report.

Config schema (``schema_version`` 1), every key optional except as noted::

    {
      "schema_version": 1,
      "seed": 0,
      "data": {"synthetic": {<SyntheticParams fields>}}  or  {"path": "<dataset dir>"},
      "split": {"scheme": "trial_fraction", "fractions": [0.6, 0.25, 0.15]}
            or {"scheme": "holdout_conditions", "indices": [..]}
            or {"scheme": "holdout_conditions", "fraction": 0.2},
      "model": {"variant": "scaled-lrd", "P": 2, "lambda_mu": 1.0, "lambda_sigma": 1.0,
                "gamma": 0.001, "beta": 1.0, "use_diag": false},
      "fit": {<FitConfig fields>},
      "methods": ["wishart", "grand", "lw", "wa", "empirical", "glasso"],
      "wa_alphas": [0, 0.25, 0.5, 0.75, 1],
      "glasso_rho": 0.1,
      "metrics": ["loglik", "opnorm", "decode", "fisher"],
      "eval": {"loglik_mode": "single_sample", "S": 1, "moment_samples": 20},
      "fisher": {"points": 40, "S": 100, "axis": 0}
    }

A method entry may also be a dict ``{"name": .., "kind": "wishart", "model":
{..}, "fit": {..}}`` overriding the shared model and fit settings.

Outputs in ``out_dir``: ``report.json``, ``split.json``, per-method moment
CSVs under ``moments/<name>/``, and for Wishart methods ``<name>/posterior.npz``,
``<name>/elbo_trace.csv`` and ``<name>/fisher.csv``. No timestamps are
written, so identical configs give identical bytes.
"""

from __future__ import annotations

import copy
import json
import os

import numpy as np

from .. import baselines as bl
from ..analysis import ClassModel, confusion_counts, decode_accuracy, fisher_curve, operator_norm_error
from ..errors import FitError, SingularMatrixError
from ..inference import FitConfig, fit
from ..model import LOG_2PI, MomentField
from ..posterior import heldout_loglik, marginal_loglik_poisson, predict_moments
from .bundle import save_posterior, write_elbo_trace
from .cv import build_spec, split
from .data import Dataset, dump_json, read_dataset, write_matrix_csv, write_moments
from .synthetic import SyntheticParams, generate_synthetic

__all__ = ["SCHEMA_VERSION", "DEFAULT_CONFIG", "load_config", "load_data", "run_experiment",
           "gaussian_heldout_loglik"]

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "data": {"synthetic": {}},
    "split": {"scheme": "trial_fraction", "fractions": [0.6, 0.25, 0.15]},
    "model": {"variant": "scaled-lrd", "P": 2, "lambda_mu": 1.0, "lambda_sigma": 1.0,
              "gamma": 0.001, "beta": 1.0, "use_diag": False},
    "fit": {},
    "methods": ["wishart", "grand", "lw", "wa", "empirical"],
    "wa_alphas": [0.0, 0.25, 0.5, 0.75, 1.0],
    "glasso_rho": 0.1,
    "metrics": ["loglik", "opnorm", "decode", "fisher"],
    "eval": {"loglik_mode": "single_sample", "S": 1, "moment_samples": 20},
    "fisher": {"points": 40, "S": 100, "axis": 0},
}

BASELINES = ("empirical", "grand", "wa", "lw", "glasso")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(cfg) -> dict:
    """Fill defaults and check the schema version. Accepts a dict or a JSON path."""
    if isinstance(cfg, (str, os.PathLike)):
        with open(cfg) as fh:
            cfg = json.load(fh)
    cfg = dict(cfg or {})
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {version}, expected {SCHEMA_VERSION}")
    out = _merge(DEFAULT_CONFIG, cfg)
    if "data" in cfg:
        out["data"] = copy.deepcopy(cfg["data"])
    for m in out["methods"]:
        name = m if isinstance(m, str) else m.get("kind", "wishart")
        if name not in BASELINES and name != "wishart":
            raise ValueError(f"unknown method {name!r}")
    return out


def load_data(cfg: dict) -> Dataset:
    data = cfg["data"]
    if "path" in data:
        return read_dataset(data["path"])
    params = dict(data.get("synthetic", {}))
    params.setdefault("seed", cfg["seed"])
    return generate_synthetic(SyntheticParams(**params))


def gaussian_heldout_loglik(test: Dataset, mu, Sigma, per_condition=False):
    """Gaussian log-likelihood of test trials; ``-inf`` for a condition whose covariance is singular."""
    out = np.empty(test.C)
    for c, Y in enumerate(test.trials):
        if Y.shape[0] == 0:
            out[c] = 0.0
            continue
        if bl.is_singular(Sigma[c]):
            out[c] = -np.inf
            continue
        try:
            chol = np.linalg.cholesky(Sigma[c])
        except np.linalg.LinAlgError:
            out[c] = -np.inf
            continue
        sol = np.linalg.solve(chol, (Y - mu[c]).T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[c] = -0.5 * (np.sum(sol * sol) + Y.shape[0] * (logdet + Y.shape[1] * LOG_2PI))
    return out if per_condition else float(np.sum(out))


def _method_entries(cfg):
    out = []
    for m in cfg["methods"]:
        if isinstance(m, str):
            out.append({"name": m, "kind": "wishart" if m == "wishart" else m})
        else:
            e = dict(m)
            e.setdefault("kind", "wishart")
            e.setdefault("name", e["kind"])
            out.append(e)
    return out


def _fisher_points(grid, axis, n):
    ax = grid.axes[axis]
    if ax.topology == "periodic":
        return np.arange(n) * (ax.period / n)
    lo, hi = grid.coords[:, axis].min(), grid.coords[:, axis].max()
    return np.linspace(lo, hi, n)


def _decode(mu, Sigma, test: Dataset, mode="qda"):
    labels = np.concatenate([np.full(len(t), c) for c, t in enumerate(test.trials)])
    Y = np.vstack(test.trials)
    model = ClassModel(mu, Sigma, mode)
    return {"mode": mode, "accuracy": decode_accuracy(model, Y, labels),
            "confusion": confusion_counts(model, Y, labels).tolist()}


def _take_nonempty(ds: Dataset, part_idx):
    keep = [c for c in range(ds.C) if len(part_idx[c]) > 0]
    return keep


def run_experiment(config, out_dir=None) -> dict:
    """Run one experiment and return the report (also written to ``out_dir``)."""
    cfg = load_config(config)
    seed = int(cfg["seed"])
    metrics = set(cfg["metrics"])
    report = {"schema_version": SCHEMA_VERSION, "config": cfg, "methods": {}, "incomplete": []}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    ds = load_data(cfg)
    report["dataset"] = {"N": ds.N, "C": ds.C, "K": ds.counts.tolist(), "observation": ds.observation,
                         "has_truth": ds.truth is not None}
    sp = dict(cfg["split"])
    scheme = sp.get("scheme", "trial_fraction")
    if scheme == "holdout_conditions" and "indices" not in sp:
        n_out = int(round(sp.get("fraction", 0.2) * ds.C))
        sp["indices"] = np.sort(np.random.default_rng([seed, 7]).permutation(ds.C)[:n_out]).tolist()
    plan = split(ds, scheme, sp.get("fractions", (0.6, 0.25, 0.15)), seed=seed, indices=sp.get("indices"))
    holdout = scheme == "holdout_conditions"
    if out_dir is not None:
        dump_json(plan.to_dict(), os.path.join(out_dir, "split.json"))

    train = plan.part(ds, "train")
    test = plan.part(ds, "test")
    if holdout:
        val = None
        # every condition in a holdout plan keeps all its trials, so the trial split is trivial
        test_fold_conditions = plan.test_conditions
    else:
        fold = plan.folds[0]
        val_keep = _take_nonempty(ds, fold.val)
        val = ds.take_trials(fold.val) if val_keep else None
        test_fold_conditions = np.array(_take_nonempty(ds, fold.test))
    # truth and coordinates aligned with the test conditions
    truth = ds.truth
    test_truth = None if truth is None else MomentField(truth.mu[test_fold_conditions], truth.Sigma[test_fold_conditions])
    train_cond = plan.train_conditions if holdout else np.arange(ds.C)
    train_truth = None if truth is None else MomentField(truth.mu[train_cond], truth.Sigma[train_cond])
    report["split"] = {"scheme": scheme, "train_conditions": int(train.C), "test_conditions": int(test.C),
                       "train_trials": int(train.counts.sum()), "test_trials": int(test.counts.sum())}

    means_train = bl.condition_means(train.trials)
    grand = bl.grand_empirical(train.trials)

    for entry in _method_entries(cfg):
        name, kind = entry["name"], entry["kind"]
        res = {"kind": kind, "status": "ok"}
        try:
            if kind == "wishart":
                eval_truth = test_truth if holdout else train_truth
                res.update(_run_wishart(entry, cfg, ds, train, test, eval_truth, test_fold_conditions, holdout,
                                        metrics, seed, out_dir))
            else:
                res.update(_run_baseline(kind, cfg, train, val, test, means_train, grand, test_truth,
                                         train_truth, test_fold_conditions, holdout, metrics, ds))
        except (FitError, SingularMatrixError, ValueError, np.linalg.LinAlgError) as err:
            res["status"] = "failed"
            res["error"] = f"{type(err).__name__}: {err}"
            report["incomplete"].append(name)
        report["methods"][name] = res
        if out_dir is not None and "_moments" in res:
            write_moments(os.path.join(out_dir, "moments", name), res["_moments"])
        res.pop("_moments", None)

    if out_dir is not None:
        dump_json(report, os.path.join(out_dir, "report.json"))
    return report


def _opnorm(Sig, truth):
    if truth is None:
        return {"available": False, "reason": "no ground truth"}
    errs = operator_norm_error(Sig, truth.Sigma)
    return {"available": True, "mean": float(np.mean(errs)), "per_condition": np.asarray(errs).tolist()}


def _run_wishart(entry, cfg, ds, train, test, eval_truth, test_conditions, holdout, metrics, seed, out_dir):
    mcfg = _merge(cfg["model"], entry.get("model"))
    fcfg = _merge({"seed": seed}, _merge(cfg["fit"], entry.get("fit")))
    if ds.observation == "poisson" and mcfg.get("observation", "poisson") == "poisson":
        mcfg["observation"] = "poisson"
        config = FitConfig.poisson_defaults(**{k: v for k, v in fcfg.items() if k in FitConfig.__dataclass_fields__})
    else:
        mcfg["observation"] = mcfg.get("observation", "normal")
        config = FitConfig.from_dict(fcfg)
    spec = build_spec(train.grid, train.N, **mcfg)
    post = fit(spec, train.grid.coords, train.trials, config)
    out = {"spec": spec.to_dict(), "fit": config.to_dict(), "final_elbo": float(post.elbo_trace[-1])
           if len(post.elbo_trace) else None}
    name = entry["name"]
    if out_dir is not None:
        d = os.path.join(out_dir, name)
        os.makedirs(d, exist_ok=True)
        save_posterior(post, os.path.join(d, "posterior.npz"))
        write_elbo_trace(os.path.join(d, "elbo_trace.csv"), post.elbo_trace)
    ec = cfg["eval"]
    coords = test.grid.coords
    if "loglik" in metrics:
        if spec.observation == "poisson":
            out["loglik"] = marginal_loglik_poisson(post, test.trials, S=max(int(ec.get("S", 1)), 100),
                                                    seed=seed, coords=coords)
            out["loglik_kind"] = "poisson-marginal"
        else:
            mode = ec.get("loglik_mode", "single_sample")
            out["loglik"] = heldout_loglik(post, test.trials, mode=mode, S=int(ec.get("S", 1)), seed=seed,
                                           coords=coords)
            out["loglik_kind"] = f"gaussian-{mode}"
    # moments at the held-out conditions, or at every training condition
    S_m = 1 if post.q.family == "delta" else int(ec.get("moment_samples", 20))
    ms = predict_moments(post, coords if holdout else train.grid.coords, S=S_m, seed=seed)
    Sig = ms.Sigma.mean(axis=0)
    mu = ms.mu.mean(axis=0)
    out["_moments"] = MomentField(mu, Sig)
    out["moments_path"] = f"posterior mean over {S_m} draws"
    if "opnorm" in metrics:
        out["opnorm"] = _opnorm(Sig, eval_truth)
    if "decode" in metrics:
        if holdout:
            out["decode"] = {"available": False, "reason": "held-out conditions are not classes of the model"}
        else:
            out["decode"] = _decode(mu[test_conditions], Sig[test_conditions], test, "qda")
    if "fisher" in metrics and spec.observation == "normal":
        fc = cfg["fisher"]
        axis = int(fc.get("axis", 0))
        pts = _fisher_points(train.grid, axis, int(fc.get("points", 40)))
        X = np.zeros((len(pts), train.grid.ndim))
        X[:, axis] = pts
        if train.grid.ndim > 1:
            others = [a for a in range(train.grid.ndim) if a != axis]
            X[:, others] = np.median(train.grid.coords[:, others], axis=0)
        fe = fisher_curve(post, X, axis=axis, S=int(fc.get("S", 100)), seed=seed)
        lo, hi = fe.interval
        out["fisher"] = {"axis": axis, "points": pts.tolist(), "mean": fe.mean.tolist(),
                         "lower": lo.tolist(), "upper": hi.tolist()}
        if out_dir is not None:
            write_matrix_csv(os.path.join(out_dir, name, "fisher.csv"), fe.table(),
                             [f"x{i}" for i in range(train.grid.ndim)] + ["mean", "lower", "upper"])
    return out


def _run_baseline(kind, cfg, train, val, test, means_train, grand, test_truth, train_truth,
                  test_conditions, holdout, metrics, ds):
    out = {}
    if holdout:
        # only condition-independent estimates transfer to unseen conditions
        if kind != "grand":
            raise ValueError(f"{kind} has no estimate at unseen conditions")
        Sig = np.stack([grand] * test.C)
        if "opnorm" in metrics:
            out["opnorm"] = _opnorm(Sig, test_truth)
        if "loglik" in metrics:
            out["loglik"] = None
            out["loglik_note"] = "unavailable: no mean estimate at unseen conditions"
        out["_moments"] = MomentField(np.full((test.C, train.N), np.nan), Sig)
        return out
    if kind == "wa":
        alphas = [float(a) for a in cfg["wa_alphas"]]
        per_alpha = {}
        for a in alphas:
            S_a = bl.weighted_average(train.trials, a)
            per_alpha[repr(a)] = gaussian_heldout_loglik(test, means_train[test_conditions], S_a[test_conditions])
        out["loglik_per_alpha"] = per_alpha
        if val is not None:
            val_cond = _val_conditions(val, ds)
            scores = []
            for a in alphas:
                S_a = bl.weighted_average(train.trials, a)
                scores.append(gaussian_heldout_loglik(val, means_train[val_cond], S_a[val_cond]))
            alpha = alphas[int(np.argmax(scores))]
            out["alpha_selection"] = "validation"
        else:
            alpha = alphas[int(np.argmax([per_alpha[repr(a)] for a in alphas]))]
            out["alpha_selection"] = "test (no validation trials)"
        out["alpha"] = alpha
        Sig = bl.weighted_average(train.trials, alpha)
    elif kind == "glasso":
        Sig = bl.estimate(train.trials, "glasso", rho=float(cfg["glasso_rho"])).Sigma
        out["rho"] = float(cfg["glasso_rho"])
    else:
        est = bl.estimate(train.trials, kind)
        Sig = est.Sigma
        out["singular_conditions"] = int(np.sum(est.singular))
    Sig_t = Sig[test_conditions]
    mu_t = means_train[test_conditions]
    if "loglik" in metrics:
        out["loglik"] = gaussian_heldout_loglik(test, mu_t, Sig_t)
        out["loglik_kind"] = "gaussian"
    if "opnorm" in metrics:
        out["opnorm"] = _opnorm(Sig, train_truth)
    if "decode" in metrics:
        mode = "lda" if kind == "grand" else "qda"
        try:
            out["decode"] = _decode(mu_t, Sig_t[0] if mode == "lda" else Sig_t, test, mode)
        except SingularMatrixError as err:
            out["decode"] = {"available": False, "reason": str(err)}
    out["_moments"] = MomentField(means_train, Sig)
    return out


def _val_conditions(val: Dataset, ds: Dataset):
    # validation datasets drop conditions without validation trials; map back by coordinates
    idx = []
    for x in val.grid.coords:
        idx.append(int(np.flatnonzero(np.all(ds.grid.coords == x, axis=1))[0]))
    return idx
