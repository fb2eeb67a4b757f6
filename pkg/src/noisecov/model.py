"""
Generative model: GP priors over means, Wishart-process factors and a
softplus-positive diagonal field, assembled into per-condition covariances.

Covariance variants
-------------------
vanilla             Sigma = U U^T
lrd                 Sigma = U U^T + Lambda
scaled-lrd          Sigma = L (U U^T + Lambda) L^T
inverse-scaled-lrd  Sigma = (L (U U^T + Lambda) L^T)^{-1}

``Lambda = diag(softplus(z))`` when the diagonal field is switched on, the
identity when it is off (lrd variants), and zero for vanilla.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln

from .errors import SingularMatrixError
from .kernels import ProductKernel, gram

__all__ = [
    "VARIANTS",
    "ModelSpec",
    "LatentState",
    "MomentField",
    "softplus",
    "softplus_inv",
    "log_softplus",
    "inner_matrix",
    "assemble_covariance",
    "assemble_batch",
    "sample_prior",
    "loglik_normal",
    "loglik_poisson_given_gain",
    "cholesky_batch",
]

VARIANTS = ("vanilla", "lrd", "scaled-lrd", "inverse-scaled-lrd")
OBSERVATIONS = ("normal", "poisson")

LOG_2PI = np.log(2.0 * np.pi)


def softplus(x):
    """``log(1 + e^x)`` evaluated without overflow."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    """Inverse of :func:`softplus` for ``y > 0``."""
    y = np.asarray(y, dtype=float)
    # log(e^y - 1) = y + log(1 - e^-y)
    return y + np.log(-np.expm1(-y))


def log_softplus(x):
    """``log(softplus(x))``, accurate for very negative ``x``."""
    x = np.asarray(x, dtype=float)
    safe = np.where(x > -30.0, x, 0.0)
    return np.where(x > -30.0, np.log(softplus(safe)), x)


@dataclass(frozen=True)
class ModelSpec:
    """Full generative specification.

    Parameters
    ----------
    N : int
        Number of neurons.
    P : int
        Number of Wishart factor columns.
    k_mu, k_sigma : ProductKernel
        Kernels for the mean GP and for the covariance factors / diagonal field.
    variant : str
        One of :data:`VARIANTS`.
    use_diag : bool
        Learn a condition-dependent diagonal ``Lambda(x)``. When off, the lrd
        variants use the identity.
    observation : {'normal', 'poisson'}
    """

    N: int
    P: int
    k_mu: ProductKernel
    k_sigma: ProductKernel
    variant: str = "scaled-lrd"
    use_diag: bool = False
    observation: str = "normal"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.observation not in OBSERVATIONS:
            raise ValueError(f"unknown observation family {self.observation!r}")
        if self.N < 1 or self.P < 0:
            raise ValueError("need N >= 1 and P >= 0")
        if self.variant == "vanilla" and self.P < self.N:
            # U U^T has rank P, so anything smaller is singular everywhere
            raise ValueError("vanilla variant requires P >= N")
        if self.variant != "vanilla" and self.P == 0 and not self.use_diag:
            raise ValueError("P = 0 needs the diagonal field (use_diag=True)")
        if self.k_mu.ndim != self.k_sigma.ndim:
            raise ValueError("k_mu and k_sigma must cover the same number of condition axes")

    @property
    def scaled(self) -> bool:
        return self.variant in ("scaled-lrd", "inverse-scaled-lrd")

    @property
    def inverse(self) -> bool:
        return self.variant == "inverse-scaled-lrd"

    @property
    def diag_mode(self) -> str:
        """'zero', 'identity' or 'softplus'."""
        if self.variant == "vanilla":
            return "zero"
        return "softplus" if self.use_diag else "identity"

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "P": self.P,
            "k_mu": self.k_mu.to_dict(),
            "k_sigma": self.k_sigma.to_dict(),
            "variant": self.variant,
            "use_diag": self.use_diag,
            "observation": self.observation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            N=int(d["N"]),
            P=int(d["P"]),
            k_mu=ProductKernel.from_dict(d["k_mu"]),
            k_sigma=ProductKernel.from_dict(d["k_sigma"]),
            variant=d.get("variant", "scaled-lrd"),
            use_diag=bool(d.get("use_diag", False)),
            observation=d.get("observation", "normal"),
        )

    def with_(self, **kw) -> "ModelSpec":
        return replace(self, **kw)


@dataclass
class LatentState:
    """Latent values at the training conditions plus global parameters.

    Shapes: ``mu (C, N)``, ``U (C, N, P)``, ``z (C, N)``, ``L (N, N)``,
    ``r (N,)`` and, for Poisson observations, ``g (C, K, N)``.
    """

    mu: np.ndarray
    U: np.ndarray
    z: np.ndarray
    L: np.ndarray | None = None
    r: np.ndarray | None = None
    g: np.ndarray | None = None


@dataclass
class MomentField:
    """Per-condition means and covariances.

    For the inverse variant ``precision`` holds the directly modelled
    precision matrices; ``Sigma`` is derived from them.
    """

    mu: np.ndarray
    Sigma: np.ndarray
    precision: np.ndarray | None = None

    def __len__(self):
        return len(self.mu)

    def precision_matrices(self) -> np.ndarray:
        if self.precision is not None:
            return self.precision
        return np.linalg.inv(self.Sigma)


def inner_matrix(U, z, diag_mode: str):
    """``U U^T + Lambda`` for one or many conditions."""
    U = np.asarray(U, dtype=float)
    A = U @ np.swapaxes(U, -1, -2)
    n = A.shape[-1]
    idx = np.arange(n)
    if diag_mode == "softplus":
        A[..., idx, idx] += softplus(z)
    elif diag_mode == "identity":
        A[..., idx, idx] += 1.0
    elif diag_mode != "zero":
        raise ValueError(f"unknown diagonal mode {diag_mode!r}")
    return A


def cholesky_batch(M, what="matrix"):
    """Batched lower Cholesky factor, raising :class:`SingularMatrixError` with the failing index."""
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        if M.ndim == 2:
            raise SingularMatrixError(f"{what} is not positive definite") from None
        for c in range(M.shape[0]):
            try:
                np.linalg.cholesky(M[c])
            except np.linalg.LinAlgError:
                raise SingularMatrixError(
                    f"{what} at condition {c} is not positive definite", index=c
                ) from None
        raise


def assemble_batch(U, z, L, variant, use_diag=False):
    """Assemble per-condition matrices for a batch of conditions.

    Returns ``(Sigma, precision)``. ``precision`` is None except for the
    inverse variant, where it is the modelled quantity and ``Sigma`` is
    obtained from it through a Cholesky solve.
    """
    diag_mode = "zero" if variant == "vanilla" else ("softplus" if use_diag else "identity")
    A = inner_matrix(U, z, diag_mode)
    if variant in ("vanilla", "lrd"):
        return A, None
    L = np.asarray(L, dtype=float)
    B = L @ A @ L.T
    if variant == "scaled-lrd":
        return B, None
    B = 0.5 * (B + np.swapaxes(B, -1, -2))
    chol = cholesky_batch(B, "precision")
    # Sigma = B^{-1} = chol^{-T} chol^{-1}
    eye = np.broadcast_to(np.eye(B.shape[-1]), B.shape)
    Linv = np.linalg.solve(chol, eye)
    Sigma = np.swapaxes(Linv, -1, -2) @ Linv
    return Sigma, B


def assemble_covariance(U_c, z_c, L, variant, use_diag=True, index=None):
    """Covariance of a single condition for the given variant.

    ``use_diag`` picks between the softplus diagonal (True) and the identity
    (False) for the lrd variants. A covariance that is not positive definite
    raises :class:`SingularMatrixError` naming ``index``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    U_c = np.asarray(U_c, dtype=float)
    z_c = np.asarray(z_c, dtype=float)
    try:
        Sigma, _ = assemble_batch(U_c, z_c, L, variant, use_diag)
        Sigma = 0.5 * (Sigma + Sigma.T)
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(
            f"covariance at condition {index} is singular", index=index
        ) from None
    return Sigma


def _gp_draws(k: ProductKernel, X, ncols: int, rng) -> np.ndarray:
    G = gram(k, X)
    K = G.jittered(k.diag_value)
    try:
        chol = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("Gram matrix is not positive definite") from None
    return chol @ rng.standard_normal((K.shape[0], ncols))


def sample_prior(spec: ModelSpec, X, seed, L=None, r=None, n_trials=None):
    """Draw latents and moments from the prior over the conditions ``X``.

    Parameters
    ----------
    spec : ModelSpec
    X : array, shape (C, D)
        Condition coordinates.
    seed : int or numpy Generator
    L : array (N, N), optional
        Scale factor for the scaled variants, identity by default.
    r : array (N,), optional
        Baseline rates for Poisson observations, zero by default.
    n_trials : int, optional
        Number of trials per condition for which Poisson gains are drawn.

    Returns
    -------
    (LatentState, MomentField)
    """
    rng = np.random.default_rng(seed)
    X = spec.k_mu._points(X)
    C, N, P = X.shape[0], spec.N, spec.P
    mu = _gp_draws(spec.k_mu, X, N, rng)
    U = _gp_draws(spec.k_sigma, X, N * P, rng).reshape(C, N, P)
    z = _gp_draws(spec.k_sigma, X, N, rng)
    L = np.eye(N) if L is None else np.asarray(L, dtype=float)
    Sigma, prec = assemble_batch(U, z, L, spec.variant, spec.use_diag)
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, -1, -2))
    g = None
    if spec.observation == "poisson":
        r = np.zeros(N) if r is None else np.asarray(r, dtype=float)
        if n_trials:
            chol = cholesky_batch(Sigma, "covariance")
            eps = rng.standard_normal((C, n_trials, N))
            g = mu[:, None, :] + eps @ np.swapaxes(chol, -1, -2)
    latents = LatentState(mu=mu, U=U, z=z, L=L, r=r, g=g)
    return latents, MomentField(mu=mu, Sigma=Sigma, precision=prec)


def loglik_normal(Y_c, mu_c, Sigma_c) -> float:
    """Sum of multivariate normal log-densities of the rows of ``Y_c``."""
    Y_c = np.atleast_2d(np.asarray(Y_c, dtype=float))
    Sigma_c = np.atleast_2d(np.asarray(Sigma_c, dtype=float))
    try:
        cf = linalg.cho_factor(Sigma_c, lower=True, check_finite=True)
    except linalg.LinAlgError:
        raise SingularMatrixError("covariance is not positive definite") from None
    R = Y_c - np.asarray(mu_c, dtype=float)
    sol = linalg.cho_solve(cf, R.T)
    maha = np.sum(R.T * sol)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    K, N = R.shape
    return float(-0.5 * (maha + K * (logdet + N * LOG_2PI)))


def loglik_poisson_given_gain(y, g, r) -> float:
    """Poisson log-likelihood of counts ``y`` at rates ``softplus(r + g)``."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("counts must be nonnegative integers")
    x = np.asarray(r, dtype=float) + np.asarray(g, dtype=float)
    return float(np.sum(y * log_softplus(x) - softplus(x) - gammaln(y + 1.0)))


def poisson_rate_ratio(x):
    """``sigmoid(x) / softplus(x)``, stable for very negative ``x``."""
    x = np.asarray(x, dtype=float)
    safe = np.where(x > -30.0, x, 0.0)
    return np.where(x > -30.0, expit(safe) / softplus(safe), 1.0)
