"""
Mean-field stochastic variational inference for the Wishart-process model.

Every scalar latent (entries of mu(x_c), U(x_c), z(x_c) and, for Poisson
observations, the gains g_ck) gets an independent Gaussian factor
``N(loc, exp(log_scale)^2)``, or a point mass for the ``delta`` family (MAP).
The generative parameters are the scale factor L, stored as a lower
triangle with log-diagonal, and the Poisson baseline rates r.

Gradients are analytic and pathwise (reparameterized); there is no autodiff
dependency. The whole log joint costs one Cholesky per condition plus one
Cholesky per kernel, which is cached.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln

from .errors import FitError, SingularMatrixError
from .kernels import ProductKernel, gram
from .model import (
    LOG_2PI,
    LatentState,
    ModelSpec,
    cholesky_batch,
    inner_matrix,
    log_softplus,
    poisson_rate_ratio,
    softplus,
    softplus_inv,
)

__all__ = [
    "VariationalState",
    "FitConfig",
    "Posterior",
    "TrialArray",
    "as_trials",
    "grid_coords",
    "scale_factor",
    "log_joint",
    "elbo",
    "elbo_gradient",
    "adam_step",
    "init_state",
    "fit",
]

LATENT_KEYS = ("mu", "U", "z")


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


@dataclass
class TrialArray:
    """Ragged trials padded into ``Y (C, Kmax, N)`` with a boolean ``mask (C, Kmax)``."""

    Y: np.ndarray
    mask: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def shape(self):
        return self.Y.shape

    def per_condition(self):
        return [self.Y[c, self.mask[c]] for c in range(self.Y.shape[0])]


def as_trials(Y) -> TrialArray:
    """Accept a Dataset, a list of ``(K_c, N)`` arrays or a ``(C, K, N)`` array."""
    if isinstance(Y, TrialArray):
        return Y
    if hasattr(Y, "trials"):
        Y = Y.trials
    if isinstance(Y, np.ndarray) and Y.ndim == 3:
        return TrialArray(np.asarray(Y, dtype=float), np.ones(Y.shape[:2], dtype=bool))
    blocks = [np.atleast_2d(np.asarray(y, dtype=float)) for y in Y]
    if not blocks:
        raise ValueError("no conditions given")
    N = blocks[0].shape[1]
    if any(b.shape[1] != N for b in blocks):
        raise ValueError("all conditions must have the same number of neurons")
    Kmax = max(b.shape[0] for b in blocks)
    out = np.zeros((len(blocks), Kmax, N))
    mask = np.zeros((len(blocks), Kmax), dtype=bool)
    for c, b in enumerate(blocks):
        out[c, : len(b)] = b
        mask[c, : len(b)] = True
    return TrialArray(out, mask)


def grid_coords(grid) -> np.ndarray:
    """Condition coordinates as a ``(C, D)`` float array."""
    X = getattr(grid, "coords", grid)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def scale_factor(L_raw) -> np.ndarray:
    """Lower-triangular L from its unconstrained form (log-diagonal)."""
    L = np.tril(L_raw, -1)
    idx = np.arange(L.shape[0])
    L[idx, idx] = np.exp(np.diagonal(L_raw))
    return L


def scale_factor_raw(L) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    raw = np.tril(L, -1)
    d = np.diagonal(L)
    if np.any(d <= 0):
        raise ValueError("scale factor needs a positive diagonal")
    idx = np.arange(L.shape[0])
    raw[idx, idx] = np.log(d)
    return raw


# ---------------------------------------------------------------------------
# variational state
# ---------------------------------------------------------------------------


@dataclass
class VariationalState:
    """Variational parameters phi together with the generative parameters theta.

    ``loc`` and ``log_scale`` map latent names ('mu', 'U', 'z' and, for
    Poisson observations, 'g') to arrays. ``log_scale`` is empty for the
    delta family. ``r`` holds the baseline rates. The scale factor is
    ``L = L_base @ M`` where ``M`` is lower triangular with unconstrained form
    ``L_raw`` (log-diagonal) and ``L_base`` is a fixed lower-triangular
    reference, the identity when absent. Optimizing ``M`` rather than ``L``
    keeps Adam's steps relative to the scale of the data. Gradients are
    returned in the same container.
    """

    family: str
    loc: dict
    log_scale: dict
    L_raw: np.ndarray
    r: np.ndarray
    L_base: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in ("gaussian", "delta"):
            raise ValueError(f"unknown variational family {self.family!r}")

    @property
    def L(self) -> np.ndarray:
        M = scale_factor(self.L_raw)
        return M if self.L_base is None else self.L_base @ M

    @property
    def n_variational(self) -> int:
        """Number of latent scalars covered by q."""
        return int(sum(v.size for v in self.loc.values()))

    def copy(self) -> "VariationalState":
        return copy.deepcopy(self)

    def params(self) -> dict:
        """Flat name -> array view used by the optimizer."""
        out = {f"loc.{k}": v for k, v in self.loc.items()}
        out.update({f"log_scale.{k}": v for k, v in self.log_scale.items()})
        out["L_raw"] = self.L_raw
        out["r"] = self.r
        return out

    @classmethod
    def from_params(cls, family: str, params: dict, L_base=None) -> "VariationalState":
        loc = {k[4:]: v for k, v in params.items() if k.startswith("loc.")}
        ls = {k[10:]: v for k, v in params.items() if k.startswith("log_scale.")}
        return cls(family, loc, ls, params["L_raw"], params["r"], L_base)

    def point(self) -> dict:
        """Variational means as a latent dict."""
        return {k: v.copy() for k, v in self.loc.items()}

    def sample(self, rng) -> dict:
        """One draw of every latent from q."""
        if self.family == "delta":
            return self.point()
        return {
            k: v + np.exp(self.log_scale[k]) * rng.standard_normal(v.shape)
            for k, v in self.loc.items()
        }


@dataclass
class FitConfig:
    """Optimizer and objective settings.

    Defaults follow the Normal-observation recipe (step 0.001, 10000
    iterations, one ELBO sample). Use :meth:`poisson_defaults` for count data.
    """

    step: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    iterations: int = 10000
    elbo_samples: int = 1
    minibatch: int | None = None
    seed: int = 0
    learn_L: bool = True
    learn_r: bool = True
    family: str = "gaussian"
    init_scale: float = 0.01

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.elbo_samples < 1:
            raise ValueError("elbo_samples must be >= 1")
        if self.minibatch is not None and self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")

    @classmethod
    def poisson_defaults(cls, **kw) -> "FitConfig":
        kw.setdefault("step", 0.005)
        kw.setdefault("iterations", 50000)
        return cls(**kw)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "step_size" in d:
            d["step"] = d.pop("step_size")
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------


class _GPPrior:
    """Cached zero-mean GP prior over the training conditions."""

    def __init__(self, k: ProductKernel, X):
        G = gram(k, X)
        self.K = G.jittered(k.diag_value)
        try:
            self.chol = np.linalg.cholesky(self.K)
        except np.linalg.LinAlgError:
            raise SingularMatrixError("Gram matrix is not positive definite") from None
        eye = np.eye(len(self.K))
        Linv = np.linalg.solve(self.chol, eye)
        self.Kinv = Linv.T @ Linv
        self.logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))

    def logpdf(self, F):
        """Sum of column log-densities of ``F (C, ...)`` and its gradient."""
        C = F.shape[0]
        F2 = F.reshape(C, -1)
        KF = self.Kinv @ F2
        m = F2.shape[1]
        val = -0.5 * np.sum(F2 * KF) - 0.5 * m * (C * LOG_2PI + self.logdet)
        return val, -KF.reshape(F.shape)


class Problem:
    """A model spec bound to training conditions and data, with cached GP factors."""

    def __init__(self, spec: ModelSpec, grid, Y):
        self.spec = spec
        self.X = grid_coords(grid)
        self.data = as_trials(Y)
        C, Kmax, N = self.data.Y.shape
        if C != self.X.shape[0]:
            raise ValueError(f"data has {C} conditions but the grid has {self.X.shape[0]}")
        if N != spec.N:
            raise ValueError(f"data has {N} neurons but the model expects {spec.N}")
        if np.any(self.data.counts < 1):
            raise ValueError("every condition needs at least one trial")
        if spec.observation == "poisson":
            y = self.data.Y[self.data.mask]
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise ValueError("Poisson observations must be nonnegative integer counts")
            self._lgam = gammaln(self.data.Y + 1.0)
        self.prior_mu = _GPPrior(spec.k_mu, self.X)
        self.prior_sigma = _GPPrior(spec.k_sigma, self.X)

    @property
    def C(self):
        return self.data.Y.shape[0]

    def latent_shapes(self) -> dict:
        C, Kmax, N = self.data.Y.shape
        shapes = {"mu": (C, N), "U": (C, N, self.spec.P), "z": (C, N)}
        if self.spec.observation == "poisson":
            shapes["g"] = (C, Kmax, N)
        return shapes

    def full_weights(self) -> np.ndarray:
        return self.data.mask.astype(float)

    def minibatch_weights(self, batch, rng) -> np.ndarray:
        """Trial weights for one minibatch: ``K_c / B_c`` on the sampled trials."""
        mask = self.data.mask
        w = np.zeros(mask.shape)
        for c in range(mask.shape[0]):
            valid = np.flatnonzero(mask[c])
            if batch >= len(valid):
                w[c, valid] = 1.0
                continue
            pick = rng.choice(valid, size=batch, replace=False)
            w[c, pick] = len(valid) / batch
        return w

    def evaluate(self, lat: dict, L, r, w, want_grad=True):
        """Log joint at latent values ``lat`` with trial weights ``w``.

        Returns ``(value, terms, grads)`` where ``grads`` holds derivatives
        with respect to every latent array and to the matrix L and vector r.
        """
        spec = self.spec
        mu, U, z = lat["mu"], lat["U"], lat["z"]
        C, N = mu.shape
        diag_mode = spec.diag_mode
        A = inner_matrix(U, z, diag_mode)
        if spec.scaled:
            M = L @ A @ L.T
        else:
            M = A
        M = 0.5 * (M + np.swapaxes(M, -1, -2))
        chol = cholesky_batch(M, "precision" if spec.inverse else "covariance")
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        eye = np.broadcast_to(np.eye(N), M.shape)
        Linv = np.linalg.solve(chol, eye)
        Minv = np.swapaxes(Linv, -1, -2) @ Linv

        poisson = spec.observation == "poisson"
        target = lat["g"] if poisson else self.data.Y
        R = target - mu[:, None, :]
        Rw = R * w[..., None]
        n = w.sum(axis=1)
        S = np.swapaxes(Rw, -1, -2) @ R
        rs = Rw.sum(axis=1)

        if spec.inverse:
            gauss = -0.5 * n * (N * LOG_2PI - logdet) - 0.5 * np.sum(M * S, axis=(-1, -2))
        else:
            gauss = -0.5 * n * (N * LOG_2PI + logdet) - 0.5 * np.sum(Minv * S, axis=(-1, -2))
        gauss_total = float(np.sum(gauss))

        pm, g_mu_prior = self.prior_mu.logpdf(mu)
        pu, g_U_prior = self.prior_sigma.logpdf(U)
        pz, g_z_prior = self.prior_sigma.logpdf(z)
        prior = pm + pu + pz
        terms = {"prior": prior}

        if poisson:
            x = r + lat["g"]
            lp = self.data.Y * log_softplus(x) - softplus(x) - self._lgam
            pois = float(np.sum(w[..., None] * lp))
            terms["gain"] = gauss_total
            terms["observation"] = pois
            value = prior + gauss_total + pois
        else:
            terms["observation"] = gauss_total
            value = prior + gauss_total

        if not want_grad:
            return value, terms, None

        if spec.inverse:
            GM = 0.5 * (n[:, None, None] * Minv - S)
            g_mu = np.einsum("cij,cj->ci", M, rs)
            g_target = -Rw @ M
        else:
            MS = Minv @ S
            GM = 0.5 * (MS @ Minv - n[:, None, None] * Minv)
            g_mu = np.einsum("cij,cj->ci", Minv, rs)
            g_target = -Rw @ Minv

        if spec.scaled:
            GA = L.T @ GM @ L
            g_L = 2.0 * np.sum(GM @ L @ A, axis=0)
        else:
            GA = GM
            g_L = np.zeros((N, N))
        g_U = 2.0 * GA @ U
        if diag_mode == "softplus":
            g_z = np.diagonal(GA, axis1=-2, axis2=-1) * expit(z)
        else:
            g_z = np.zeros_like(z)

        grads = {
            "mu": g_mu + g_mu_prior,
            "U": g_U + g_U_prior,
            "z": g_z + g_z_prior,
            "L": np.tril(g_L),
        }
        if poisson:
            x = r + lat["g"]
            sig = expit(x)
            dx = w[..., None] * (self.data.Y * poisson_rate_ratio(x) - sig)
            grads["g"] = g_target + dx
            grads["r"] = dx.sum(axis=(0, 1))
        else:
            grads["r"] = np.zeros_like(r)
        return value, terms, grads

    def default_L(self) -> np.ndarray:
        return np.eye(self.spec.N)


def _entropy_weights(problem: Problem, key: str, w):
    """Per-scalar weights of the entropy term; gains follow their trial weight."""
    if key == "g":
        return np.broadcast_to(w[..., None], problem.latent_shapes()["g"])
    return 1.0


def _objective(problem: Problem, q: VariationalState, eps: dict | None, w, want_grad=True):
    """ELBO integrand for one noise draw, with its gradient in (phi, theta)."""
    L = q.L
    if q.family == "delta":
        lat = q.loc
    else:
        lat = {k: q.loc[k] + np.exp(q.log_scale[k]) * eps[k] for k in q.loc}
    value, terms, g = problem.evaluate(lat, L, q.r, w, want_grad)
    entropy = 0.0
    if q.family == "gaussian":
        for k in q.loc:
            ew = _entropy_weights(problem, k, w)
            entropy += float(np.sum(ew * (q.log_scale[k] + 0.5 * eps[k] ** 2 + 0.5 * LOG_2PI)))
        terms["entropy"] = entropy
    value = value + entropy
    if not want_grad:
        return value, terms, None
    grad_loc = {k: g[k] for k in q.loc}
    grad_ls = {}
    if q.family == "gaussian":
        for k in q.loc:
            sd = np.exp(q.log_scale[k])
            grad_ls[k] = g[k] * eps[k] * sd + _entropy_weights(problem, k, w)
    gM = g["L"] if q.L_base is None else q.L_base.T @ g["L"]
    # chain through M = tril(raw, -1) + diag(exp(diag raw))
    g_raw = np.tril(gM, -1)
    idx = np.arange(gM.shape[0])
    g_raw[idx, idx] = np.diagonal(gM) * np.exp(np.diagonal(q.L_raw))
    if not problem.spec.scaled:
        g_raw[:] = 0.0
    grad = VariationalState(q.family, grad_loc, grad_ls, g_raw, g["r"])
    return value, terms, grad


def _draw_eps(q: VariationalState, rng):
    if q.family == "delta":
        return None
    return {k: rng.standard_normal(v.shape) for k, v in q.loc.items()}


def _estimate(problem: Problem, q: VariationalState, S: int, rng, minibatch=None, want_grad=True):
    w = problem.full_weights() if minibatch is None else problem.minibatch_weights(minibatch, rng)
    total = 0.0
    terms_acc: dict = {}
    grad = None
    for _ in range(S):
        eps = _draw_eps(q, rng)
        val, terms, g = _objective(problem, q, eps, w, want_grad)
        total += val / S
        for k, v in terms.items():
            terms_acc[k] = terms_acc.get(k, 0.0) + v / S
        if want_grad:
            grad = g if grad is None else _axpy(grad, g)
    if want_grad and S > 1:
        grad = _scale(grad, 1.0 / S)
    return total, terms_acc, grad


def _axpy(a: VariationalState, b: VariationalState) -> VariationalState:
    return VariationalState(
        a.family,
        {k: a.loc[k] + b.loc[k] for k in a.loc},
        {k: a.log_scale[k] + b.log_scale[k] for k in a.log_scale},
        a.L_raw + b.L_raw,
        a.r + b.r,
    )


def _scale(a: VariationalState, s: float) -> VariationalState:
    return VariationalState(
        a.family,
        {k: v * s for k, v in a.loc.items()},
        {k: v * s for k, v in a.log_scale.items()},
        a.L_raw * s,
        a.r * s,
    )


def _as_problem(spec, grid, Y) -> Problem:
    if isinstance(Y, Problem):
        return Y
    return Problem(spec, grid, Y)


def _latent_dict(latents: LatentState, problem: Problem) -> dict:
    lat = {"mu": latents.mu, "U": latents.U, "z": latents.z}
    if problem.spec.observation == "poisson":
        if latents.g is None:
            raise ValueError("Poisson log joint needs gain latents")
        lat["g"] = latents.g
    return lat


def log_joint(spec: ModelSpec, grid, latents: LatentState, Y) -> float:
    """Log joint density of data and latents (observation + GP priors [+ gains])."""
    problem = _as_problem(spec, grid, Y)
    r = latents.r if latents.r is not None else np.zeros(spec.N)
    L = latents.L if latents.L is not None else np.eye(spec.N)
    value, _, _ = problem.evaluate(
        _latent_dict(latents, problem), L, r, problem.full_weights(), want_grad=False
    )
    return float(value)


def elbo(spec: ModelSpec, grid, q: VariationalState, Y, S: int = 1, seed=0, minibatch=None) -> float:
    """Monte-Carlo ELBO estimate with ``S`` reparameterized draws.

    For the delta family this is the log joint at the point values.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    problem = _as_problem(spec, grid, Y)
    rng = np.random.default_rng(seed)
    val, _, _ = _estimate(problem, q, S, rng, minibatch, want_grad=False)
    return float(val)


def elbo_gradient(spec: ModelSpec, grid, q: VariationalState, Y, S: int = 1, seed=0, minibatch=None):
    """Reparameterized gradient of :func:`elbo` for the same seed.

    Returns a :class:`VariationalState` holding d ELBO / d parameter.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    problem = _as_problem(spec, grid, Y)
    rng = np.random.default_rng(seed)
    _, _, grad = _estimate(problem, q, S, rng, minibatch, want_grad=True)
    return grad


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def adam_step(params: dict, grads: dict, moments: dict, t: int, config: FitConfig):
    """One bias-corrected Adam step that decreases the loss whose gradient is ``grads``.

    ``moments`` maps names to ``(m, v)`` pairs; missing entries start at zero.
    Returns ``(new_params, new_moments)``.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_moments = {}, {}
    for name, p in params.items():
        g = grads[name]
        m, v = moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params[name] = p - config.step * (m / bc1) / (np.sqrt(v / bc2) + config.eps_adam)
        new_moments[name] = (m, v)
    return new_params, new_moments


def _grand_empirical(trials: TrialArray) -> np.ndarray:
    Y, mask = trials.Y, trials.mask
    counts = mask.sum(axis=1)
    means = (Y * mask[..., None]).sum(axis=1) / counts[:, None]
    R = (Y - means[:, None, :]) * mask[..., None]
    flat = R.reshape(-1, Y.shape[-1])
    return flat.T @ flat / counts.sum()


def _floored_cholesky(G: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    N = G.shape[0]
    scale = max(np.trace(G) / N, 1e-12)
    return np.linalg.cholesky(G + floor * scale * np.eye(N))


def init_state(problem: Problem, family: str = "gaussian", seed=0, init_scale: float = 0.01) -> VariationalState:
    """Starting point near the grand-empirical solution.

    Means start at the empirical condition means, factor columns at small
    random values, the diagonal field at ``softplus^{-1}(1)`` and L at the
    Cholesky factor of the grand empirical covariance (of its inverse for the
    inverse variant).
    """
    rng = np.random.default_rng(seed)
    spec = problem.spec
    data = problem.data
    C, Kmax, N = data.Y.shape
    counts = data.counts
    loc = {}
    r = np.zeros(N)
    if spec.observation == "poisson":
        rate = (data.Y * data.mask[..., None]).sum(axis=(0, 1)) / counts.sum()
        r = softplus_inv(np.maximum(rate, 0.1))
        g = (softplus_inv(data.Y + 0.5) - r) * data.mask[..., None]
        loc["g"] = g
        source = TrialArray(g, data.mask)
    else:
        source = data
    loc["mu"] = (source.Y * source.mask[..., None]).sum(axis=1) / counts[:, None]
    loc["U"] = 0.01 * rng.standard_normal((C, N, spec.P))
    loc["z"] = np.full((C, N), float(softplus_inv(1.0)))
    # reorder so dict iteration is stable: mu, U, z, g
    loc = {k: loc[k] for k in ("mu", "U", "z", "g") if k in loc}
    log_scale = {}
    if family == "gaussian":
        log_scale = {k: np.full(v.shape, np.log(init_scale)) for k, v in loc.items()}
    if spec.scaled:
        G = _grand_empirical(source)
        if spec.inverse:
            Gf = G + 1e-6 * max(np.trace(G) / N, 1e-12) * np.eye(N)
            L0 = np.linalg.cholesky(np.linalg.inv(Gf))
        else:
            L0 = _floored_cholesky(G)
    else:
        L0 = None
    return VariationalState(family, loc, log_scale, np.zeros((N, N)), r, L0)


@dataclass
class Posterior:
    """Fitted variational state plus what is needed to predict at new conditions."""

    spec: ModelSpec
    coords: np.ndarray
    q: VariationalState
    elbo_trace: np.ndarray
    config: FitConfig = field(default_factory=FitConfig)
    n_trials: np.ndarray | None = None

    def __post_init__(self):
        self.coords = grid_coords(self.coords)
        self._priors = None

    @property
    def L(self) -> np.ndarray:
        return self.q.L if self.spec.scaled else np.eye(self.spec.N)

    @property
    def r(self) -> np.ndarray:
        return self.q.r

    @property
    def C(self) -> int:
        return self.coords.shape[0]

    def gp_factors(self):
        """Cached ``(k_mu prior, k_sigma prior)`` over the training conditions."""
        if self._priors is None:
            self._priors = (_GPPrior(self.spec.k_mu, self.coords), _GPPrior(self.spec.k_sigma, self.coords))
        return self._priors


def fit(spec: ModelSpec, grid, Y, config: FitConfig | None = None, init: VariationalState | None = None,
        callback=None) -> Posterior:
    """Maximize the ELBO with Adam.

    Raises :class:`FitError` naming the iteration and the offending term if
    the objective becomes non-finite.
    """
    config = config or FitConfig()
    problem = _as_problem(spec, grid, Y)
    q = init.copy() if init is not None else init_state(problem, config.family, config.seed, config.init_scale)
    rng = np.random.default_rng([config.seed, 1])
    params = q.params()
    params = {k: v.copy() for k, v in params.items()}
    moments: dict = {}
    trace = np.empty(config.iterations)
    frozen = set()
    if not config.learn_L or not spec.scaled:
        frozen.add("L_raw")
    if not config.learn_r or spec.observation != "poisson":
        frozen.add("r")
    for it in range(config.iterations):
        state = VariationalState.from_params(q.family, params, q.L_base)
        try:
            val, terms, grad = _estimate(problem, state, config.elbo_samples, rng, config.minibatch)
        except SingularMatrixError as err:
            raise FitError(f"iteration {it}: {err}", iteration=it, term="observation") from err
        if not np.isfinite(val):
            bad = [k for k, v in terms.items() if not np.isfinite(v)] or ["elbo"]
            raise FitError(f"non-finite ELBO at iteration {it} (term: {bad[0]})", iteration=it, term=bad[0])
        trace[it] = val
        gp = grad.params()
        loss_grads = {k: (np.zeros_like(v) if k in frozen else -v) for k, v in gp.items()}
        params, moments = adam_step(params, loss_grads, moments, it + 1, config)
        if callback is not None:
            callback(it, val)
    q_final = VariationalState.from_params(q.family, params, q.L_base)
    return Posterior(spec, problem.X, q_final, trace, config, problem.data.counts.copy())
