"""Ground-truth generators: Haar rotations, synthetic Hessians, input samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SyntheticSpec",
    "haar_rotation",
    "sample_hypercube",
    "sample_unit_sphere",
    "synthetic_hessian",
]


@dataclass
class SyntheticSpec:
    """Ensemble ``H = R diag(|mu|) R^T``.

    ``n - n_mu`` entries of ``mu`` are ``N(0, bulk_scale**2)`` (``bulk_scale``
    is a standard deviation); ``n_mu`` randomly placed entries are
    ``N(dom_mean, dom_var)`` (``dom_var`` is a variance).
    """

    n: int
    n_mu: int = 5
    bulk_scale: float = 0.1
    dom_mean: float = 1.0
    dom_var: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or not 0 <= self.n_mu <= self.n:
            raise ValueError(f"need 0 <= n_mu <= n, got n={self.n}, n_mu={self.n_mu}")
        if self.bulk_scale < 0 or self.dom_var < 0:
            raise ValueError("scales must be non-negative")


def haar_rotation(n: int, seed=None) -> np.ndarray:
    """Haar-distributed rotation (``det = +1``) of size ``n``.

    QR of a standard Gaussian matrix, with columns rescaled by the sign of
    ``diag(R)`` so the result is Haar on O(n); one column is flipped when the
    determinant is negative.
    """
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    Q = Q * np.where(np.diag(R) < 0, -1.0, 1.0)
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def synthetic_hessian(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(H, R, lam)`` with ``H = R diag(lam) R^T``."""
    rng = np.random.default_rng(spec.seed)
    R = haar_rotation(spec.n, rng)
    mu = rng.normal(0.0, spec.bulk_scale, size=spec.n)
    dominant = rng.choice(spec.n, size=spec.n_mu, replace=False)
    mu[dominant] = rng.normal(spec.dom_mean, np.sqrt(spec.dom_var), size=spec.n_mu)
    lam = np.abs(mu)
    H = (R * lam) @ R.T
    H = 0.5 * (H + H.T)
    return H, R, lam


def sample_unit_sphere(n: int, m: int, seed=None) -> np.ndarray:
    """``m`` points uniform on the unit sphere in ``R^n``, shape ``(m, n)``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, n))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def sample_hypercube(n: int, m: int, seed=None, half_width: float = 1.0) -> np.ndarray:
    """``m`` points uniform in ``[-half_width, half_width]^n``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.uniform(-half_width, half_width, size=(m, n))
