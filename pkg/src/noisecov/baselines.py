"""
Classical covariance estimators used as comparison targets.

All per-condition estimators use the 1/K normalization. With K < N the
empirical covariance is singular and is flagged as such.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BaselineEstimate",
    "GlassoResult",
    "empirical",
    "grand_empirical",
    "weighted_average",
    "ledoit_wolf",
    "graphical_lasso",
    "glasso_objective",
    "is_singular",
    "estimate",
    "condition_means",
]


def is_singular(S) -> bool:
    S = np.asarray(S, dtype=float)
    N = S.shape[-1]
    tr = np.trace(S)
    if tr <= 0:
        return True
    return bool(np.linalg.eigvalsh(S)[0] < 1e-12 * tr / N)


@dataclass
class BaselineEstimate:
    """Per-condition covariance matrices from one baseline method."""

    Sigma: np.ndarray
    method: str
    params: dict = field(default_factory=dict)
    singular: np.ndarray | None = None

    def __post_init__(self):
        if self.singular is None:
            self.singular = np.array([is_singular(S) for S in self.Sigma])


def _trials(Y_c) -> np.ndarray:
    Y_c = np.asarray(Y_c, dtype=float)
    if Y_c.ndim == 1:
        Y_c = Y_c[:, None]
    if Y_c.shape[0] < 1:
        raise ValueError("need at least one trial")
    return Y_c


def empirical(Y_c) -> np.ndarray:
    """Within-condition covariance ``(1/K) sum_k (y_k - ybar)(y_k - ybar)^T``."""
    Y_c = _trials(Y_c)
    R = Y_c - Y_c.mean(axis=0)
    S = R.T @ R / Y_c.shape[0]
    return 0.5 * (S + S.T)


def grand_empirical(Y) -> np.ndarray:
    """Condition-centered covariance pooled over every trial of every condition.

    With balanced trials this equals the average of the per-condition
    empirical covariances; with unbalanced trials each centered trial gets
    weight ``1 / sum_c K_c``.
    """
    blocks = [_trials(y) for y in _as_blocks(Y)]
    R = np.vstack([b - b.mean(axis=0) for b in blocks])
    S = R.T @ R / R.shape[0]
    return 0.5 * (S + S.T)


def _as_blocks(Y):
    if hasattr(Y, "trials"):
        Y = Y.trials
    if isinstance(Y, np.ndarray) and Y.ndim == 3:
        return list(Y)
    return list(Y)


def condition_means(Y) -> np.ndarray:
    return np.stack([_trials(y).mean(axis=0) for y in _as_blocks(Y)])


def weighted_average(Y, alpha: float) -> np.ndarray:
    """``alpha * empirical_c + (1 - alpha) * grand`` for every condition."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    blocks = _as_blocks(Y)
    G = grand_empirical(blocks)
    return np.stack([alpha * empirical(b) + (1.0 - alpha) * G for b in blocks])


def ledoit_wolf(Y_c, target: str = "identity"):
    """Ledoit-Wolf shrinkage with the analytically optimal intensity.

    ``target='identity'`` shrinks toward ``trace(S)/N * I`` (the 2004
    estimator); ``target='diagonal'`` shrinks toward ``diag(S)``, only the
    off-diagonal entries being pulled in.

    Returns
    -------
    (Sigma, intensity)
    """
    Y_c = _trials(Y_c)
    K, N = Y_c.shape
    if K < 2:
        raise ValueError("Ledoit-Wolf needs at least two trials")
    X = Y_c - Y_c.mean(axis=0)
    S = X.T @ X / K
    if target == "identity":
        T = np.trace(S) / N * np.eye(N)
        offmask = np.ones((N, N))
    elif target == "diagonal":
        T = np.diag(np.diag(S))
        offmask = 1.0 - np.eye(N)
    else:
        raise ValueError(f"unknown target {target!r}")
    # squared Frobenius norms, scaled by 1/N as in the original estimator
    delta2 = np.sum(((S - T) * offmask) ** 2) / N
    # sum_k ||x_k x_k^T - S||^2 without forming K outer products
    X2 = X * X
    sq = X2.T @ X2  # sum_k x_ki^2 x_kj^2
    beta_sum = np.sum(sq * offmask) - K * np.sum((S * S) * offmask)
    beta_bar2 = beta_sum / (K * K) / N
    if delta2 <= 0:
        intensity = 0.0
    else:
        intensity = float(np.clip(min(beta_bar2, delta2) / delta2, 0.0, 1.0))
    Sigma = intensity * T + (1.0 - intensity) * S
    return 0.5 * (Sigma + Sigma.T), intensity


# ---------------------------------------------------------------------------
# graphical lasso
# ---------------------------------------------------------------------------


@dataclass
class GlassoResult:
    covariance: np.ndarray
    precision: np.ndarray
    converged: bool
    sweeps: int
    objective: list

    def __iter__(self):
        # unpacks as (covariance, precision)
        return iter((self.covariance, self.precision))


def glasso_objective(Theta, S, rho) -> float:
    """``-logdet(Theta) + tr(S Theta) + rho * sum_{i != j} |Theta_ij|``."""
    sign, logdet = np.linalg.slogdet(Theta)
    if sign <= 0:
        return np.inf
    off = np.abs(Theta).sum() - np.abs(np.diag(Theta)).sum()
    return float(-logdet + np.sum(S * Theta) + rho * off)


def _lasso_cd(Q, b, lam, beta, tol=1e-12, max_iter=10000):
    """Minimize ``beta^T Q beta + 2 b^T beta + 2 lam ||beta||_1`` by coordinate descent."""
    n = len(b)
    Qb = Q @ beta
    for _ in range(max_iter):
        delta = 0.0
        for i in range(n):
            qii = Q[i, i]
            old = beta[i]
            c = Qb[i] - qii * old + b[i]
            new = -np.sign(c) * max(abs(c) - lam, 0.0) / qii
            if new != old:
                Qb += Q[:, i] * (new - old)
                beta[i] = new
                delta = max(delta, abs(new - old))
        if delta < tol:
            break
    return beta


def graphical_lasso(S, rho: float, tol: float = 1e-6, max_sweeps: int = 500) -> GlassoResult:
    """l1-penalized Gaussian maximum likelihood for the precision matrix.

    Block coordinate descent on the primal: each column update minimizes the
    objective exactly over one row/column of the precision, so the objective
    never increases from sweep to sweep and every iterate stays positive
    definite. Off-diagonal entries only are penalized.

    Stops when the largest change in the precision during a sweep drops below
    ``tol`` or after ``max_sweeps`` sweeps (``converged=False``).
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    N = S.shape[0]
    if rho < 0:
        raise ValueError("rho must be >= 0")
    d = np.diag(S)
    if np.any(d <= 0):
        raise ValueError("sample covariance needs a positive diagonal")
    Theta = np.diag(1.0 / d)
    W = np.diag(d)
    objective = [glasso_objective(Theta, S, rho)]
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        change = 0.0
        for j in range(N):
            rest = np.r_[0:j, j + 1 : N]
            # inverse of Theta_11 from the current covariance W = Theta^{-1}
            w22 = W[j, j]
            w12 = W[rest, j]
            M = W[np.ix_(rest, rest)] - np.outer(w12, w12) / w22
            s22 = S[j, j]
            theta12 = Theta[rest, j].copy()
            theta12 = _lasso_cd(s22 * M, S[rest, j], rho, theta12)
            Mt = M @ theta12
            theta22 = 1.0 / s22 + theta12 @ Mt
            change = max(change, np.max(np.abs(theta12 - Theta[rest, j]), initial=0.0),
                         abs(theta22 - Theta[j, j]))
            Theta[rest, j] = theta12
            Theta[j, rest] = theta12
            Theta[j, j] = theta22
            # block inverse with gamma = theta22 - theta12^T M theta12 = 1 / s22
            W[j, j] = s22
            W[rest, j] = -s22 * Mt
            W[j, rest] = -s22 * Mt
            W[np.ix_(rest, rest)] = M + s22 * np.outer(Mt, Mt)
        objective.append(glasso_objective(Theta, S, rho))
        if change < tol:
            converged = True
            break
    W = 0.5 * (W + W.T)
    return GlassoResult(W, Theta.copy(), converged, sweeps, objective)


def estimate(Y, method: str, **params) -> BaselineEstimate:
    """Run one baseline over every condition of ``Y``.

    Methods: 'empirical', 'grand', 'wa' (``alpha``), 'lw' (``target``),
    'glasso' (``rho``).
    """
    blocks = _as_blocks(Y)
    if method == "empirical":
        Sig = np.stack([empirical(b) for b in blocks])
    elif method == "grand":
        G = grand_empirical(blocks)
        Sig = np.stack([G] * len(blocks))
    elif method == "wa":
        params.setdefault("alpha", 0.5)
        Sig = weighted_average(blocks, params["alpha"])
    elif method == "lw":
        params.setdefault("target", "identity")
        out = [ledoit_wolf(b, params["target"]) for b in blocks]
        Sig = np.stack([o[0] for o in out])
        params["intensity"] = [o[1] for o in out]
    elif method == "glasso":
        params.setdefault("rho", 0.1)
        res = []
        for b in blocks:
            E = empirical(b)
            # keep the diagonal usable when a neuron is silent within a condition
            E = E + 1e-10 * max(np.trace(E), 1.0) * np.eye(E.shape[0])
            res.append(graphical_lasso(E, params["rho"]))
        Sig = np.stack([r.covariance for r in res])
        params["converged"] = [bool(r.converged) for r in res]
    else:
        raise ValueError(f"unknown method {method!r}")
    return BaselineEstimate(Sig, method, params)
