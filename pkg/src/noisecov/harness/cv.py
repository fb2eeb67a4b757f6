"""
Trial splits and hyperparameter selection by held-out likelihood.

Seeds: a split with seed ``s`` shuffles condition ``c`` with
``default_rng([s, c])``; fold ``f`` of a cross-validation run uses split
seed ``[seed, f]`` and fit seed ``seed + 1000 * f``. Every (fold, grid point)
cell therefore has its own stream and cells can run in any order.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import FitError, SingularMatrixError
from ..inference import FitConfig, fit
from ..kernels import AxisKernel, ProductKernel
from ..model import ModelSpec
from ..posterior import heldout_loglik, marginal_loglik_poisson
from .data import ConditionGrid, Dataset

__all__ = ["Fold", "CvPlan", "split", "build_spec", "CvResult", "cv_select", "expand_grid"]


@dataclass
class Fold:
    """Trial indices per condition for each part of one split."""

    train: list
    val: list
    test: list


@dataclass
class CvPlan:
    """Either stratified trial folds or a whole-condition holdout."""

    scheme: str
    folds: list = field(default_factory=list)
    train_conditions: np.ndarray | None = None
    test_conditions: np.ndarray | None = None

    def part(self, dataset: Dataset, name: str, fold: int = 0) -> Dataset:
        """Sub-dataset for ``name`` in {'train', 'val', 'test'}."""
        if self.scheme == "holdout_conditions":
            if name == "train":
                return dataset.take_conditions(self.train_conditions)
            if name == "test":
                return dataset.take_conditions(self.test_conditions)
            raise ValueError("holdout plans have only 'train' and 'test' parts")
        idx = getattr(self.folds[fold], name)
        return dataset.take_trials(idx)

    def to_dict(self) -> dict:
        if self.scheme == "holdout_conditions":
            return {"scheme": self.scheme, "train_conditions": self.train_conditions.tolist(),
                    "test_conditions": self.test_conditions.tolist()}
        return {"scheme": self.scheme,
                "folds": [{k: [np.asarray(i).tolist() for i in getattr(f, k)] for k in ("train", "val", "test")}
                          for f in self.folds]}


def _fraction_fold(counts, fractions, seed) -> Fold:
    f_train, f_val, _ = fractions
    train, val, test = [], [], []
    for c, K in enumerate(counts):
        perm = np.random.default_rng(np.append(np.atleast_1d(seed), c)).permutation(K)
        n_tr = math.floor(f_train * K + 1e-9)
        n_va = math.floor(f_val * K + 1e-9)
        if n_tr < 1:
            raise ValueError(f"condition {c} has {K} trials, leaving none for training")
        train.append(np.sort(perm[:n_tr]))
        val.append(np.sort(perm[n_tr : n_tr + n_va]))
        test.append(np.sort(perm[n_tr + n_va :]))
    return Fold(train, val, test)


def split(dataset: Dataset, scheme: str = "trial_fraction", fractions=(0.6, 0.25, 0.15), seed=0,
          indices=None) -> CvPlan:
    """Partition trials into train / validation / test.

    ``trial_fraction`` splits each condition separately with
    ``floor(f_train K)`` training and ``floor(f_val K)`` validation trials,
    the rest going to test. ``holdout_conditions`` removes whole conditions
    (``indices``) from training.

    A small tolerance inside the floor keeps e.g. ``0.6 * 20`` at 12.
    """
    if scheme == "trial_fraction":
        fr = tuple(float(f) for f in fractions)
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
        return CvPlan(scheme, [_fraction_fold(dataset.counts, fr, seed)])
    if scheme == "holdout_conditions":
        if indices is None:
            raise ValueError("holdout_conditions needs condition indices")
        test = np.unique(np.asarray(indices, dtype=int))
        if test.size and (test.min() < 0 or test.max() >= dataset.C):
            raise ValueError("holdout index out of range")
        train = np.setdiff1d(np.arange(dataset.C), test)
        if train.size == 0:
            raise ValueError("holdout leaves no training conditions")
        return CvPlan(scheme, [], train, test)
    raise ValueError(f"unknown split scheme {scheme!r}")


def build_spec(grid: ConditionGrid, N: int, lambda_mu=1.0, lambda_sigma=1.0, P=2,
               variant="scaled-lrd", use_diag=False, gamma=0.001, beta=1.0,
               observation="normal", **_ignored) -> ModelSpec:
    """Model spec whose kernels follow the grid's axis topologies.

    Periodic axes get periodic kernels with the axis period, linear axes
    squared-exponential kernels; bandwidths are shared across axes.
    """

    def kernel(lam):
        axes = []
        for ax in grid.axes:
            if ax.topology == "periodic":
                axes.append(AxisKernel("periodic", gamma, beta, lam, ax.period))
            else:
                axes.append(AxisKernel("squared-exponential", gamma, beta, lam))
        return ProductKernel(axes)

    return ModelSpec(N, int(P), kernel(float(lambda_mu)), kernel(float(lambda_sigma)), variant,
                     bool(use_diag), observation)


def expand_grid(grid) -> list:
    """``{'lambda_sigma': [..], 'P': [..]}`` -> list of dicts; lists pass through."""
    if isinstance(grid, dict):
        keys = sorted(grid)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    out = [dict(g) for g in grid]
    if not out:
        raise ValueError("empty hyperparameter grid")
    return out


@dataclass
class CvResult:
    best: dict
    best_score: float
    table: list
    per_fold_best: list

    def to_dict(self) -> dict:
        return {"best": self.best, "best_score": self.best_score, "table": self.table,
                "per_fold_best": self.per_fold_best}


def _score_cell(args):
    dataset, plan, fold, hp, config, base, seed = args
    train = plan.part(dataset, "train", fold)
    val = plan.part(dataset, "val", fold)
    opts = {**base, **hp}
    try:
        spec = build_spec(dataset.grid, dataset.N, observation=dataset.observation, **opts)
        post = fit(spec, train.grid.coords, train.trials, config)
        if dataset.observation == "poisson":
            return marginal_loglik_poisson(post, val.trials, S=100, seed=seed, coords=val.grid.coords), None
        return heldout_loglik(post, val.trials, seed=seed, coords=val.grid.coords), None
    except (FitError, SingularMatrixError, ValueError, np.linalg.LinAlgError) as err:
        return -np.inf, f"{type(err).__name__}: {err}"


def cv_select(dataset: Dataset, grid, folds: int = 3, seed=0, config: FitConfig | None = None,
              fractions=(0.8, 0.2, 0.0), base: dict | None = None, n_jobs: int = 1) -> CvResult:
    """Pick hyperparameters maximizing validation log-likelihood.

    Each fold is an independent stratified split. A cell whose fit fails is
    scored ``-inf`` and the error recorded; the sweep carries on. Scores are
    averaged over folds; ties go to the earlier grid point.
    """
    points = expand_grid(grid)
    config = config or FitConfig()
    base = dict(base or {})
    plans = []
    for f in range(folds):
        plan = split(dataset, "trial_fraction", fractions, seed=[seed, f])
        if all(len(v) == 0 for v in plan.folds[0].val):
            raise ValueError("validation fraction leaves no validation trials")
        plans.append(plan)
    jobs = []
    for f in range(folds):
        cfg = FitConfig.from_dict({**config.to_dict(), "seed": config.seed + 1000 * f})
        for hp in points:
            jobs.append((dataset, plans[f], 0, hp, cfg, base, seed + f))
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            results = list(ex.map(_score_cell, jobs))
        # map preserves order, so the table is identical to a serial run
    else:
        results = [_score_cell(j) for j in jobs]
    table = []
    scores = np.empty((folds, len(points)))
    i = 0
    for f in range(folds):
        for g, hp in enumerate(points):
            score, err = results[i]
            i += 1
            scores[f, g] = score
            table.append({"fold": f, "params": hp, "score": float(score), "error": err})
    mean = scores.mean(axis=0)
    # argmax keeps the first of equal scores; all -inf still returns point 0
    b = int(np.argmax(mean))
    per_fold = [points[int(np.argmax(scores[f]))] for f in range(folds)]
    return CvResult(points[b], float(mean[b]), table, per_fold)
