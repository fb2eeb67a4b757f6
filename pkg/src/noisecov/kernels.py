"""
Kernels over condition space.

Each coordinate of a condition gets its own one-dimensional kernel, either
squared-exponential or periodic, and the full kernel is the product over
coordinates. Every axis kernel has the form

    k(x, x') = gamma * delta(x, x') + beta * exp(-D(x, x') / lam)

with D = (x - x')**2 for the squared-exponential kernel and
D = sin(pi |x - x'| / T)**2 for the periodic kernel. The delta term fires on
exact coordinate equality, so duplicated conditions share the jitter atom;
perturb duplicates if that is not wanted.

Derivatives only involve the smooth ``beta`` part; the delta atom has no
derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "AxisKernel",
    "ProductKernel",
    "GramMatrix",
    "eval_kernel",
    "gram",
    "gram_derivatives",
    "SOLVER_JITTER",
]

# relative diagonal jitter added before any Cholesky of a Gram matrix
SOLVER_JITTER = 1e-8

KINDS = ("squared-exponential", "periodic")


@dataclass(frozen=True)
class AxisKernel:
    """One-dimensional kernel for a single condition coordinate.

    Parameters
    ----------
    kind : {'squared-exponential', 'periodic'}
    gamma : float
        Weight of the Kronecker (jitter) atom, >= 0.
    beta : float
        Scale of the smooth part, > 0.
    lam : float
        Bandwidth, > 0. Larger values give smoother functions.
    period : float, optional
        Period T, required for ``kind='periodic'``.
    """

    kind: str = "squared-exponential"
    gamma: float = 0.001
    beta: float = 1.0
    lam: float = 1.0
    period: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}, expected one of {KINDS}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.kind == "periodic":
            if self.period is None or not self.period > 0:
                raise ValueError("periodic kernel requires a period > 0")

    @property
    def periodic(self) -> bool:
        return self.kind == "periodic"

    def smooth(self, a, b):
        """Smooth part ``beta * exp(-D / lam)`` with broadcasting."""
        d = np.subtract(a, b)
        if self.periodic:
            s = np.sin(np.pi * np.abs(d) / self.period)
            return self.beta * np.exp(-(s * s) / self.lam)
        return self.beta * np.exp(-(d * d) / self.lam)

    def __call__(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return self.gamma * (a == b) + self.smooth(a, b)

    def d_dx(self, a, b):
        """Derivative of the smooth part with respect to the first argument."""
        d = np.subtract(a, b)
        k = self.smooth(a, b)
        if self.periodic:
            w = 2.0 * np.pi / self.period
            # d/dd sin^2(pi d / T) = (pi / T) sin(2 pi d / T); the |.| drops out
            return -k * (np.pi / (self.lam * self.period)) * np.sin(w * d)
        return -2.0 * d / self.lam * k

    def d2_dxdx(self, a, b):
        """Mixed second derivative d^2 k / (dx dx') of the smooth part."""
        d = np.subtract(a, b)
        k = self.smooth(a, b)
        if self.periodic:
            w = 2.0 * np.pi / self.period
            h = -(np.pi / (self.lam * self.period)) * np.sin(w * d)
            dh = -(np.pi / (self.lam * self.period)) * w * np.cos(w * d)
            return -k * (h * h + dh)
        return k * (2.0 / self.lam - 4.0 * d * d / self.lam**2)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "gamma": self.gamma, "beta": self.beta, "lambda": self.lam}
        if self.period is not None:
            out["period"] = self.period
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AxisKernel":
        return cls(
            kind=d.get("kind", "squared-exponential"),
            gamma=float(d.get("gamma", 0.001)),
            beta=float(d.get("beta", 1.0)),
            lam=float(d.get("lambda", d.get("lam", 1.0))),
            period=None if d.get("period") is None else float(d["period"]),
        )


@dataclass(frozen=True)
class ProductKernel:
    """Product of per-axis kernels, ``k(x, x') = prod_i k_i(x_i, x'_i)``."""

    axes: tuple[AxisKernel, ...]

    def __init__(self, axes: Sequence[AxisKernel] | AxisKernel):
        if isinstance(axes, AxisKernel):
            axes = (axes,)
        axes = tuple(axes)
        if not axes:
            raise ValueError("a product kernel needs at least one axis")
        object.__setattr__(self, "axes", axes)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def diag_value(self) -> float:
        """k(x, x), identical for every x."""
        return float(np.prod([ax.gamma + ax.beta for ax in self.axes]))

    def _points(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 0:
            X = X.reshape(1, 1)
        elif X.ndim == 1:
            # a flat vector is a list of scalar conditions for 1-D kernels
            X = X.reshape(-1, 1) if self.ndim == 1 else X.reshape(1, -1)
        if X.shape[-1] != self.ndim:
            raise ValueError(
                f"condition dimensionality {X.shape[-1]} does not match kernel with {self.ndim} axes"
            )
        return X

    def matrix(self, A, B) -> np.ndarray:
        """Cross-covariance ``k(A_i, B_j)`` between two point sets."""
        A, B = self._points(A), self._points(B)
        out = np.ones((A.shape[0], B.shape[0]))
        for i, ax in enumerate(self.axes):
            out = out * ax(A[:, i, None], B[None, :, i])
        return out

    def d_matrix(self, A, B, axis: int) -> np.ndarray:
        """``dk/dx_axis`` evaluated at ``(A_i, B_j)``, derivative in the first argument."""
        A, B = self._points(A), self._points(B)
        self._check_axis(axis)
        out = np.ones((A.shape[0], B.shape[0]))
        for i, ax in enumerate(self.axes):
            a, b = A[:, i, None], B[None, :, i]
            out = out * (ax.d_dx(a, b) if i == axis else ax(a, b))
        return out

    def d2_matrix(self, A, B, axis: int) -> np.ndarray:
        """``d^2 k / (dx_axis dx'_axis)`` evaluated at ``(A_i, B_j)``."""
        A, B = self._points(A), self._points(B)
        self._check_axis(axis)
        out = np.ones((A.shape[0], B.shape[0]))
        for i, ax in enumerate(self.axes):
            a, b = A[:, i, None], B[None, :, i]
            out = out * (ax.d2_dxdx(a, b) if i == axis else ax(a, b))
        return out

    def _check_axis(self, axis: int):
        if not 0 <= axis < self.ndim:
            raise ValueError(f"axis {axis} out of range for kernel with {self.ndim} axes")

    def to_dict(self) -> dict:
        return {"axes": [ax.to_dict() for ax in self.axes]}

    @classmethod
    def from_dict(cls, d) -> "ProductKernel":
        if isinstance(d, dict) and "axes" in d:
            return cls([AxisKernel.from_dict(a) for a in d["axes"]])
        if isinstance(d, dict):
            return cls([AxisKernel.from_dict(d)])
        return cls([AxisKernel.from_dict(a) for a in d])


@dataclass(frozen=True)
class GramMatrix:
    """Kernel matrix materialized over a set of conditions."""

    entries: np.ndarray
    points: np.ndarray

    def jittered(self, scale: float) -> np.ndarray:
        """Entries plus the fixed solver jitter ``SOLVER_JITTER * scale`` on the diagonal."""
        return self.entries + SOLVER_JITTER * scale * np.eye(len(self.entries))


def eval_kernel(k: ProductKernel, x, x_prime) -> float:
    """Evaluate ``k(x, x')`` for single conditions."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != (k.ndim,) or x_prime.shape != (k.ndim,):
        raise ValueError(
            f"expected coordinates of dimension {k.ndim}, got {x.shape} and {x_prime.shape}"
        )
    out = 1.0
    for i, ax in enumerate(k.axes):
        out *= float(ax(x[i], x_prime[i]))
    return out


def gram(k: ProductKernel, X) -> GramMatrix:
    """Gram matrix of ``k`` over the conditions ``X`` (shape ``(C, D)``)."""
    X = k._points(X)
    if X.shape[0] == 0:
        raise ValueError("cannot build a Gram matrix over zero points")
    K = k.matrix(X, X)
    # evaluated entrywise, but force exact symmetry for the stored copy
    K = np.triu(K) + np.triu(K, 1).T
    return GramMatrix(entries=K, points=X)


def gram_derivatives(k: ProductKernel, X_train, x_star, axis: int):
    """Derivative blocks needed to jointly model a GP and its slope at ``x_star``.

    Returns
    -------
    cross : ndarray, shape (C,)
        ``dk/dx*(x*, X_train)`` along ``axis``.
    second : float
        ``d^2 k / (dx dx')`` at ``(x*, x*)``.
    """
    k._check_axis(axis)
    xs = np.atleast_1d(np.asarray(x_star, dtype=float)).reshape(1, -1)
    cross = k.d_matrix(xs, X_train, axis)[0]
    second = float(k.d2_matrix(xs, xs, axis)[0, 0])
    return cross, second
