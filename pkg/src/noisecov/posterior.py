"""
Posterior predictive quantities: moments at seen and unseen conditions,
held-out likelihoods, joint value/slope draws for Fisher information, and
spike-count summaries for the Poisson model.

Unseen conditions are handled by noiseless GP conditioning of every scalar
latent on its value at the training conditions. Conditioning happens on
draws from q, not on the variational means, unless ``mode='plugin'`` is
requested. A query that coincides exactly with a training condition returns
the training value itself.

Seeds: every public function takes an integer seed and builds one
``numpy.random.Generator`` from it; draws are consumed in a fixed order
(training latents, then new-point noise, per posterior sample), so results
are reproducible bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import SingularMatrixError
from .inference import Posterior, _GPPrior, as_trials
from .kernels import ProductKernel
from .model import LOG_2PI, inner_matrix, log_softplus, softplus

__all__ = [
    "MomentSamples",
    "GradientSamples",
    "condition_gp",
    "predict_moments",
    "heldout_loglik",
    "posterior_gradients",
    "poisson_summary_stats",
    "marginal_loglik_poisson",
]


@dataclass
class MomentSamples:
    """Draws of ``(mu, Sigma)`` at query conditions.

    Arrays are indexed ``[draw, point, ...]``. ``lifted`` counts covariance
    draws that needed a diagonal lift to stay positive definite.
    """

    coords: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    seed: object
    precision: np.ndarray | None = None
    lifted: int = 0

    @property
    def S(self) -> int:
        return self.mu.shape[0]

    def mean_sigma(self) -> np.ndarray:
        return self.Sigma.mean(axis=0)


@dataclass
class GradientSamples:
    """Joint draws of moments and their slopes along one condition axis."""

    coords: np.ndarray
    axis: int
    mu: np.ndarray
    Sigma: np.ndarray
    dmu: np.ndarray
    dSigma: np.ndarray
    seed: object
    precision: np.ndarray | None = None


# ---------------------------------------------------------------------------
# GP conditioning
# ---------------------------------------------------------------------------


def _coincident(X_train, X_query) -> np.ndarray:
    """Index of the training point equal to each query, or -1."""
    eq = np.all(X_query[:, None, :] == X_train[None, :, :], axis=-1)
    idx = np.where(eq.any(axis=1), eq.argmax(axis=1), -1)
    return idx


def condition_gp(kernel: ProductKernel, X_train, values, x_star):
    """Noiseless conditioning of a zero-mean GP on training values.

    Parameters
    ----------
    kernel : ProductKernel
    X_train : array (C, D)
    values : array (C,) or (C, m)
        Function values at the training points; extra columns are conditioned
        independently.
    x_star : array (D,) or (M, D)

    Returns
    -------
    mean : array (M,) or (M, m)
    variance : array (M,)
    """
    X_train = kernel._points(X_train)
    Xq = np.atleast_2d(np.asarray(x_star, dtype=float))
    if Xq.shape[-1] != kernel.ndim and Xq.size == kernel.ndim:
        Xq = Xq.reshape(1, -1)
    if kernel.ndim == 1 and Xq.shape[-1] != 1:
        Xq = Xq.reshape(-1, 1)
    Xq = kernel._points(Xq)
    values = np.asarray(values, dtype=float)
    prior = _GPPrior(kernel, X_train)
    Kq = kernel.matrix(Xq, X_train)
    W = np.linalg.solve(prior.chol.T, np.linalg.solve(prior.chol, Kq.T)).T
    mean = W @ values
    var = kernel.diag_value - np.sum(W * Kq, axis=1)
    hit = _coincident(X_train, Xq)
    for i, c in enumerate(hit):
        if c >= 0:
            mean[i] = values[c]
            var[i] = 0.0
    var = np.maximum(var, 0.0)
    if np.ndim(x_star) <= 1 and Xq.shape[0] == 1 and np.size(x_star) == kernel.ndim:
        return mean[0], float(var[0])
    return mean, var


class _Conditioner:
    """Linear map and noise factor for joint GP queries given training values.

    Queries are values at ``Xq`` and, if ``axis`` is given, slopes along that
    axis at the same points, stacked as ``[values; slopes]``.
    """

    def __init__(self, kernel: ProductKernel, prior: _GPPrior, X_train, Xq, axis=None):
        Kq = kernel.matrix(Xq, X_train)
        Kqq = kernel.matrix(Xq, Xq)
        if axis is not None:
            dK = kernel.d_matrix(Xq, X_train, axis)
            dKq = kernel.d_matrix(Xq, Xq, axis)  # cov(f'(a), f(b))
            d2K = kernel.d2_matrix(Xq, Xq, axis)
            Kq = np.vstack([Kq, dK])
            Kqq = np.block([[Kqq, dKq.T], [dKq, d2K]])
        W = np.linalg.solve(prior.chol.T, np.linalg.solve(prior.chol, Kq.T)).T
        cov = Kqq - W @ Kq.T
        M = Xq.shape[0]
        hit = _coincident(X_train, Xq)
        for i, c in enumerate(hit):
            if c >= 0:
                W[i] = 0.0
                W[i, c] = 1.0
                cov[i, :] = 0.0
                cov[:, i] = 0.0
        cov = 0.5 * (cov + cov.T)
        lam, V = np.linalg.eigh(cov)
        self.W = W
        self.R = V * np.sqrt(np.clip(lam, 0.0, None))
        self.M = M

    def draw(self, F_train, rng, noise=True):
        """Query values for training values ``F_train (C, m)``."""
        out = self.W @ F_train
        if noise:
            out = out + self.R @ rng.standard_normal(out.shape)
        return out


def _query_points(post: Posterior, x_star) -> np.ndarray:
    Xq = np.asarray(x_star, dtype=float)
    D = post.coords.shape[1]
    if Xq.ndim == 0:
        Xq = Xq.reshape(1, 1)
    elif Xq.ndim == 1:
        Xq = Xq.reshape(-1, 1) if D == 1 else Xq.reshape(1, -1)
    if Xq.shape[1] != D:
        raise ValueError(f"query points have dimension {Xq.shape[1]}, expected {D}")
    return Xq


def _spd_lift(Sigma):
    """Lift draws with tiny or negative eigenvalues; returns (Sigma, n_lifted)."""
    N = Sigma.shape[-1]
    tr = np.trace(Sigma, axis1=-2, axis2=-1)
    lam = np.linalg.eigvalsh(Sigma)
    bad = lam[..., 0] < 1e-10 * tr / N
    n = int(np.sum(bad))
    if n:
        idx = np.arange(N)
        floor = 1e-8 * tr / N
        lift = np.where(bad, np.maximum(floor - lam[..., 0], 0.0) + floor, 0.0)
        Sigma = Sigma.copy()
        Sigma[..., idx, idx] += lift[..., None]
    return Sigma, n


def _latent_queries(post: Posterior, Xq, axis=None):
    k_mu_prior, k_sigma_prior = post.gp_factors()
    cm = _Conditioner(post.spec.k_mu, k_mu_prior, post.coords, Xq, axis)
    cs = _Conditioner(post.spec.k_sigma, k_sigma_prior, post.coords, Xq, axis)
    return cm, cs


def _draw_latents_at(post, cm, cs, rng, mode):
    """Latents at query points (plus slopes if the conditioners carry them)."""
    if mode == "plugin":
        lat = post.q.point()
        noise = False
    else:
        lat = post.q.sample(rng)
        noise = True
    C, N = lat["mu"].shape
    P = post.spec.P
    mu = cm.draw(lat["mu"], rng, noise)
    U = cs.draw(lat["U"].reshape(C, N * P), rng, noise)
    z = cs.draw(lat["z"], rng, noise)
    return mu, U.reshape(mu.shape[0], N, P), z


def _assemble(post: Posterior, U, z):
    spec = post.spec
    A = inner_matrix(U, z, spec.diag_mode)
    if not spec.scaled:
        return A, None
    L = post.L
    B = L @ A @ L.T
    B = 0.5 * (B + np.swapaxes(B, -1, -2))
    if not spec.inverse:
        return B, None
    return _inverse_spd(B), B


def _inverse_spd(B):
    try:
        chol = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("precision draw is not positive definite") from None
    eye = np.broadcast_to(np.eye(B.shape[-1]), B.shape)
    Linv = np.linalg.solve(chol, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv


def predict_moments(post: Posterior, x_star, S: int = 1, seed=0, mode: str = "sample") -> MomentSamples:
    """Sample ``(mu, Sigma)`` at arbitrary conditions.

    ``mode='sample'`` draws latents from q and conditions on them;
    ``mode='plugin'`` conditions on the variational means without noise,
    a point estimate rather than a posterior draw.
    """
    if mode not in ("sample", "plugin"):
        raise ValueError(f"unknown mode {mode!r}")
    if S < 1:
        raise ValueError("S must be >= 1")
    Xq = _query_points(post, x_star)
    cm, cs = _latent_queries(post, Xq)
    rng = np.random.default_rng(seed)
    mus, sigmas, precs = [], [], []
    lifted = 0
    for _ in range(S):
        mu, U, z = _draw_latents_at(post, cm, cs, rng, mode)
        Sigma, prec = _assemble(post, U, z)
        Sigma, n = _spd_lift(Sigma)
        lifted += n
        mus.append(mu)
        sigmas.append(Sigma)
        precs.append(prec)
    if lifted:
        warnings.warn(f"{lifted} covariance draws needed a diagonal lift", RuntimeWarning)
    prec = np.stack(precs) if post.spec.inverse else None
    return MomentSamples(Xq, np.stack(mus), np.stack(sigmas), seed, prec, lifted)


def _trial_loglik(Y, mask, mu, Sigma):
    """Per-trial Gaussian log-densities, ``Y (C, K, N)`` -> ``(C, K)``; -inf when singular."""
    C, K, N = Y.shape
    out = np.full((C, K), -np.inf)
    for c in range(C):
        try:
            chol = np.linalg.cholesky(Sigma[c])
        except np.linalg.LinAlgError:
            continue
        R = (Y[c] - mu[c]).T
        sol = np.linalg.solve(chol, R)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[c] = -0.5 * (np.sum(sol * sol, axis=0) + logdet + N * LOG_2PI)
    return np.where(mask, out, 0.0)


def _test_data(post, Y_test, coords):
    trials = as_trials(Y_test)
    if coords is None:
        coords = getattr(getattr(Y_test, "grid", None), "coords", None)
    Xq = post.coords if coords is None else _query_points(post, coords)
    if Xq.shape[0] != trials.Y.shape[0]:
        raise ValueError("test data and test conditions disagree on the number of conditions")
    return trials, Xq


def heldout_loglik(post: Posterior, Y_test, mode: str = "single_sample", S: int = 1, seed=0,
                   coords=None, per_trial=False):
    """Log-likelihood of held-out trials.

    ``single_sample`` uses one draw of the latents; ``mc`` averages the
    likelihood of each trial over ``S`` draws (log-mean-exp) and sums.
    Test conditions default to the training grid; pass ``coords`` (or a
    Dataset with its own grid) for unseen conditions.
    """
    if mode == "single_sample":
        S = 1
    elif mode != "mc":
        raise ValueError(f"unknown mode {mode!r}")
    trials, Xq = _test_data(post, Y_test, coords)
    ms = predict_moments(post, Xq, S, seed)
    ll = np.stack([_trial_loglik(trials.Y, trials.mask, ms.mu[s], ms.Sigma[s]) for s in range(S)])
    per = logsumexp(ll, axis=0) - np.log(S)
    per = np.where(trials.mask, per, 0.0)
    if per_trial:
        return per
    return float(np.sum(per))


def posterior_gradients(post: Posterior, x_star, axis: int = 0, S: int = 1, seed=0,
                        mode: str = "sample") -> GradientSamples:
    """Joint draws of moments and their derivatives along ``axis``.

    Each scalar latent is sampled jointly with its slope from the GP
    conditioned on a q-draw at the training conditions. The covariance slope
    follows the chain rule of the chosen variant.
    """
    spec = post.spec
    spec.k_mu._check_axis(axis)
    Xq = _query_points(post, x_star)
    M = Xq.shape[0]
    cm, cs = _latent_queries(post, Xq, axis)
    rng = np.random.default_rng(seed)
    N = spec.N
    L = post.L
    out = {k: [] for k in ("mu", "Sigma", "dmu", "dSigma", "prec")}
    for _ in range(S):
        mu2, U2, z2 = _draw_latents_at(post, cm, cs, rng, mode)
        mu, dmu = mu2[:M], mu2[M:]
        U, dU = U2[:M], U2[M:]
        z, dz = z2[:M], z2[M:]
        A = inner_matrix(U, z, spec.diag_mode)
        dA = dU @ np.swapaxes(U, -1, -2)
        dA = dA + np.swapaxes(dA, -1, -2)
        if spec.diag_mode == "softplus":
            idx = np.arange(N)
            dA[:, idx, idx] += (1.0 / (1.0 + np.exp(-z))) * dz
        if spec.scaled:
            B = L @ A @ L.T
            dB = L @ dA @ L.T
        else:
            B, dB = A, dA
        B = 0.5 * (B + np.swapaxes(B, -1, -2))
        dB = 0.5 * (dB + np.swapaxes(dB, -1, -2))
        if spec.inverse:
            Sigma = _inverse_spd(B)
            dSigma = -Sigma @ dB @ Sigma
            dSigma = 0.5 * (dSigma + np.swapaxes(dSigma, -1, -2))
            out["prec"].append(B)
        else:
            Sigma, dSigma = B, dB
        out["mu"].append(mu)
        out["Sigma"].append(Sigma)
        out["dmu"].append(dmu)
        out["dSigma"].append(dSigma)
    prec = np.stack(out["prec"]) if spec.inverse else None
    return GradientSamples(
        Xq, axis, np.stack(out["mu"]), np.stack(out["Sigma"]), np.stack(out["dmu"]),
        np.stack(out["dSigma"]), seed, prec,
    )


# ---------------------------------------------------------------------------
# Poisson summaries
# ---------------------------------------------------------------------------


def _require_poisson(post: Posterior):
    if post.spec.observation != "poisson":
        raise ValueError("this quantity is only defined for Poisson-observation models")


def _gain_draws(mu, Sigma, n, rng):
    """``n`` gain vectors per moment pair, tolerating singular covariances."""
    lam, V = np.linalg.eigh(Sigma)
    root = V * np.sqrt(np.clip(lam, 0.0, None))[..., None, :]
    eps = rng.standard_normal(mu.shape[:-1] + (n, mu.shape[-1]))
    return mu[..., None, :] + eps @ np.swapaxes(root, -1, -2)


def poisson_summary_stats(post: Posterior, x_c, statistic: str = "mean", S: int = 1000, seed=0):
    """Monte-Carlo mean or covariance of spike counts at one condition.

    Chain per draw: moments from q (conditioned if ``x_c`` is unseen), a gain
    vector from ``N(mu, Sigma)``, counts from ``Poisson(softplus(r + g))``.
    """
    _require_poisson(post)
    if statistic not in ("mean", "covariance"):
        raise ValueError(f"unknown statistic {statistic!r}")
    rng = np.random.default_rng(seed)
    ms = predict_moments(post, np.atleast_2d(np.asarray(x_c, dtype=float)).reshape(1, -1), S, rng)
    g = _gain_draws(ms.mu[:, 0], ms.Sigma[:, 0], 1, rng)[:, 0]
    y = rng.poisson(softplus(post.r + g)).astype(float)
    m = y.mean(axis=0)
    if statistic == "mean":
        return m
    D = y - m
    cov = D.T @ D / S
    return 0.5 * (cov + cov.T)


def marginal_loglik_poisson(post: Posterior, Y_test, S: int = 100, seed=0, coords=None,
                            per_trial=False):
    """Held-out count log-likelihood with gains and moments integrated out by Monte Carlo.

    For each test trial, ``log (1/S) sum_s Poisson(y | softplus(r + g_s))``
    with ``(mu_s, Sigma_s) ~ q`` and ``g_s ~ N(mu_s, Sigma_s)``; summed over trials.
    """
    _require_poisson(post)
    trials, Xq = _test_data(post, Y_test, coords)
    Y, mask = trials.Y, trials.mask
    if np.any(Y[mask] < 0):
        raise ValueError("counts must be nonnegative")
    rng = np.random.default_rng(seed)
    ms = predict_moments(post, Xq, S, rng)
    C, K, N = Y.shape
    # (S, C, K, N) gain draws, one per trial and sample
    g = _gain_draws(ms.mu, ms.Sigma, K, rng)
    x = post.r + g
    lp = np.sum(Y * log_softplus(x) - softplus(x) - gammaln(Y + 1.0), axis=-1)
    per = logsumexp(lp, axis=0) - np.log(S)
    per = np.where(mask, per, 0.0)
    if per_trial:
        return per
    return float(np.sum(per))
