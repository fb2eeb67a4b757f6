"""
Downstream uses of moment fields: Gaussian discriminant decoding, Fisher
information and comparison metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularMatrixError
from .model import LOG_2PI

__all__ = [
    "ClassModel",
    "classify",
    "log_densities",
    "decode_accuracy",
    "confusion_counts",
    "fisher_information",
    "FisherEstimate",
    "fisher_curve",
    "operator_norm_error",
    "participation_ratio",
]


class ClassModel:
    """Gaussian class-conditional model for maximum-likelihood decoding.

    Parameters
    ----------
    means : array (C, N)
    covariances : array (C, N, N) for ``qda`` or (N, N) for ``lda``
    mode : {'qda', 'lda'}
    """

    def __init__(self, means, covariances, mode: str = "qda"):
        if mode not in ("qda", "lda"):
            raise ValueError(f"unknown mode {mode!r}")
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        cov = np.asarray(covariances, dtype=float)
        C, N = self.means.shape
        if C < 1:
            raise ValueError("class model needs at least one class")
        if mode == "lda":
            if cov.ndim == 3:
                raise ValueError("lda stores a single shared covariance")
            cov = np.atleast_2d(cov)
            if cov.shape != (N, N):
                raise ValueError(f"covariance shape {cov.shape} does not match N={N}")
        else:
            if cov.ndim == 2 and N == 1 and cov.shape == (C, 1):
                cov = cov[:, :, None]
            if cov.shape != (C, N, N):
                raise ValueError(f"qda needs covariances of shape {(C, N, N)}, got {cov.shape}")
        self.covariances = cov
        self.mode = mode
        self._factors = None

    @classmethod
    def qda(cls, means, covariances):
        return cls(means, covariances, "qda")

    @classmethod
    def lda(cls, means, covariance):
        return cls(means, covariance, "lda")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def N(self) -> int:
        return self.means.shape[1]

    def _chol(self):
        if self._factors is None:
            covs = self.covariances[None] if self.mode == "lda" else self.covariances
            chols = []
            for c, S in enumerate(covs):
                try:
                    chols.append(np.linalg.cholesky(S))
                except np.linalg.LinAlgError:
                    who = "shared covariance" if self.mode == "lda" else f"class {c}"
                    raise SingularMatrixError(f"covariance of {who} is not positive definite",
                                              index=None if self.mode == "lda" else c) from None
            chols = np.stack(chols)
            logdet = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=-2, axis2=-1)), axis=-1)
            self._factors = (chols, logdet)
        return self._factors


def log_densities(model: ClassModel, Y) -> np.ndarray:
    """Gaussian log-density of each row of ``Y`` under each class, shape (T, C)."""
    Y = np.asarray(Y, dtype=float)
    Y = Y.reshape(-1, model.N)
    chols, logdet = model._chol()
    out = np.empty((Y.shape[0], model.n_classes))
    for c in range(model.n_classes):
        j = 0 if model.mode == "lda" else c
        R = (Y - model.means[c]).T
        sol = np.linalg.solve(chols[j], R)
        out[:, c] = -0.5 * (np.sum(sol * sol, axis=0) + logdet[j] + model.N * LOG_2PI)
    return out


def classify(model: ClassModel, y):
    """Most likely class of ``y``; exact ties go to the lowest class index.

    A single vector returns an int, a (T, N) array returns T labels.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim <= 1
    lab = np.argmax(log_densities(model, y), axis=1)  # argmax keeps the first maximum
    return int(lab[0]) if single else lab


def decode_accuracy(model: ClassModel, Y, labels) -> float:
    """Fraction of test trials assigned their own label."""
    Y = np.asarray(Y, dtype=float).reshape(-1, model.N)
    labels = np.asarray(labels).ravel()
    if Y.shape[0] == 0:
        raise ValueError("empty test set")
    if labels.shape[0] != Y.shape[0]:
        raise ValueError("one label per test trial required")
    if np.any(labels < 0) or np.any(labels >= model.n_classes):
        raise ValueError("labels outside the model's classes")
    return float(np.mean(classify(model, Y) == labels))


def confusion_counts(model: ClassModel, Y, labels) -> np.ndarray:
    """Counts[i, j] of trials of class i decoded as j."""
    Y = np.asarray(Y, dtype=float).reshape(-1, model.N)
    labels = np.asarray(labels).ravel()
    pred = classify(model, Y)
    out = np.zeros((model.n_classes, model.n_classes), dtype=int)
    np.add.at(out, (labels, pred), 1)
    return out


# ---------------------------------------------------------------------------
# Fisher information
# ---------------------------------------------------------------------------


def fisher_information(dmu, Sigma=None, dSigma=None, precision=None, return_terms=False):
    """``mu'^T Sigma^{-1} mu' + 1/2 tr((Sigma^{-1} Sigma')^2)``.

    Pass either ``Sigma`` or ``precision``. With ``Sigma = R R^T`` both terms
    are squared norms, ``|R^{-1} mu'|^2`` and ``|R^{-1} Sigma' R^{-T}|_F^2``,
    so the result is never negative. ``return_terms`` gives
    ``(total, mean_term, covariance_term)``.
    """
    dmu = np.atleast_1d(np.asarray(dmu, dtype=float))
    N = dmu.shape[0]
    if (Sigma is None) == (precision is None):
        raise ValueError("pass exactly one of Sigma and precision")
    dS = np.zeros((N, N)) if dSigma is None else np.atleast_2d(np.asarray(dSigma, dtype=float))
    M = np.atleast_2d(np.asarray(Sigma if precision is None else precision, dtype=float))
    try:
        R = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("covariance is not positive definite") from None
    if precision is None:
        a = np.linalg.solve(R, dmu)
        T = np.linalg.solve(R, np.linalg.solve(R, dS).T)
    else:
        # Sigma^{-1} = R R^T
        a = R.T @ dmu
        T = R.T @ dS @ R
    mean_term = float(a @ a)
    cov_term = float(0.5 * np.sum(T * T))
    total = mean_term + cov_term
    if return_terms:
        return total, mean_term, cov_term
    return total


@dataclass
class FisherEstimate:
    """Posterior draws of directional Fisher information on a grid of conditions.

    ``draws``, ``mean_term`` and ``cov_term`` have shape (S, M).
    """

    coords: np.ndarray
    axis: int
    draws: np.ndarray
    mean_term: np.ndarray
    cov_term: np.ndarray
    level: float = 0.9

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    @property
    def interval(self):
        a = 0.5 * (1.0 - self.level)
        return np.quantile(self.draws, a, axis=0), np.quantile(self.draws, 1.0 - a, axis=0)

    def table(self) -> np.ndarray:
        """Columns: coordinates, mean, lower, upper."""
        lo, hi = self.interval
        return np.column_stack([self.coords, self.mean, lo, hi])


def fisher_curve(post, X_eval, axis: int = 0, S: int = 200, seed=0, mode: str = "sample") -> FisherEstimate:
    """Fisher information along ``axis`` at every point of ``X_eval``, per posterior draw."""
    from .posterior import posterior_gradients

    gs = posterior_gradients(post, X_eval, axis=axis, S=S, seed=seed, mode=mode)
    Sn, M = gs.mu.shape[:2]
    tot = np.empty((Sn, M))
    mt = np.empty((Sn, M))
    ct = np.empty((Sn, M))
    for s in range(Sn):
        for m in range(M):
            if gs.precision is not None:
                t = fisher_information(gs.dmu[s, m], dSigma=gs.dSigma[s, m],
                                       precision=gs.precision[s, m], return_terms=True)
            else:
                t = fisher_information(gs.dmu[s, m], gs.Sigma[s, m], gs.dSigma[s, m], return_terms=True)
            tot[s, m], mt[s, m], ct[s, m] = t
    return FisherEstimate(gs.coords, axis, tot, mt, ct)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def operator_norm_error(A, B) -> float:
    """Largest singular value of ``A - B`` for symmetric inputs."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    D = A - B
    D = 0.5 * (D + np.swapaxes(D, -1, -2))
    return np.abs(np.linalg.eigvalsh(D)).max(axis=-1) if D.ndim > 2 else float(np.abs(np.linalg.eigvalsh(D)).max())


def participation_ratio(Sigma) -> float:
    """``(sum lambda)^2 / sum lambda^2``, computed as ``tr^2 / |Sigma|_F^2``."""
    S = np.atleast_2d(np.asarray(Sigma, dtype=float))
    fro2 = float(np.sum(S * S))
    if fro2 == 0.0:
        raise ValueError("participation ratio of the zero matrix is undefined")
    return float(np.trace(S) ** 2 / fro2)
