"""
Synthetic benchmark data drawn from the generative model itself.

Conditions sit at equispaced angles on a circle. Means and Wishart factors
are GP draws with periodic kernels, the diagonal is the identity, and the
scale matrix has either a spread-out spectrum (``structured``) or is the
identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..kernels import AxisKernel, ProductKernel
from ..model import ModelSpec, MomentField, sample_prior, softplus
from .data import ConditionGrid, Dataset

__all__ = ["SyntheticParams", "generate_synthetic", "haar_orthogonal", "scale_factor_for"]


@dataclass
class SyntheticParams:
    N: int = 100
    C: int = 30
    K: int = 10
    P_true: int = 2
    lambda_sigma: float = 1.0
    lambda_mu: float = 1.0
    gamma: float = 0.001
    beta: float = 1.0
    # standard deviation multiplier for the mean field
    mean_scale: float = 1.0
    scale_mode: str = "structured"
    seed: int = 0
    observation: str = "normal"
    # Poisson only: baseline rate offset added to every neuron
    rate_offset: float = 1.0

    def __post_init__(self):
        if self.scale_mode not in ("structured", "identity"):
            raise ValueError(f"unknown scale mode {self.scale_mode!r}")
        if self.mean_scale <= 0:
            raise ValueError("mean_scale must be positive")
        if min(self.N, self.C, self.K) < 1 or self.P_true < 0:
            raise ValueError("N, C, K must be positive and P_true nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def spec(self) -> ModelSpec:
        T = 2 * np.pi
        m2 = self.mean_scale**2
        k_mu = ProductKernel(AxisKernel("periodic", m2 * self.gamma, m2 * self.beta, self.lambda_mu, T))
        k_sigma = ProductKernel(AxisKernel("periodic", self.gamma, self.beta, self.lambda_sigma, T))
        return ModelSpec(self.N, self.P_true, k_mu, k_sigma, variant="scaled-lrd", use_diag=False,
                         observation=self.observation)


def haar_orthogonal(N: int, rng) -> np.ndarray:
    """Uniformly distributed orthogonal matrix (QR with sign-corrected R)."""
    Q, R = np.linalg.qr(rng.standard_normal((N, N)))
    return Q * np.sign(np.diag(R))


def scale_factor_for(params: SyntheticParams, rng) -> np.ndarray:
    """``L`` with ``L L^T = Q diag(s) Q^T``, ``s`` log-spaced from 1 to 1e-5."""
    N = params.N
    if params.scale_mode == "identity":
        return np.eye(N)
    s = np.logspace(0, -5, N)
    Q = haar_orthogonal(N, rng)
    return Q * np.sqrt(s)


def generate_synthetic(params: SyntheticParams | None = None, **kw) -> Dataset:
    """Sample a dataset and keep its ground-truth moments.

    Keyword arguments override fields of ``params``.
    """
    if params is None:
        params = SyntheticParams(**kw)
    elif kw:
        params = SyntheticParams(**{**params.to_dict(), **kw})
    rng = np.random.default_rng(params.seed)
    grid = ConditionGrid.periodic_1d(params.C)
    L = scale_factor_for(params, rng)
    spec = params.spec()
    r = None
    if params.observation == "poisson":
        r = np.full(params.N, params.rate_offset)
    lat, truth = sample_prior(spec, grid.coords, rng, L=L, r=r, n_trials=params.K)
    if params.observation == "poisson":
        rates = softplus(lat.r + lat.g)
        trials = [rng.poisson(rates[c]).astype(float) for c in range(params.C)]
    else:
        chol = np.linalg.cholesky(truth.Sigma)
        eps = rng.standard_normal((params.C, params.K, params.N))
        Y = truth.mu[:, None, :] + eps @ np.swapaxes(chol, -1, -2)
        trials = list(Y)
    meta = {"synthetic": params.to_dict()}
    return Dataset(grid, trials, MomentField(truth.mu, truth.Sigma), params.observation, meta)
