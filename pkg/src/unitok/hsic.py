"""Gaussian-kernel HSIC as a dependence score, and the cross-domain calibration loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DTYPE

MIN_POINTS = 4
BANDWIDTH_FLOOR = 1e-6


@dataclass
class HSICConfig:
    bandwidth: str = "median"     # "median" or "fixed"
    sigma: float = 1.0            # used when bandwidth == "fixed"
    max_points_per_domain: int = 256

    def __post_init__(self):
        if self.bandwidth not in ("median", "fixed"):
            raise ValueError(f"bandwidth must be 'median' or 'fixed', got {self.bandwidth!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.max_points_per_domain < MIN_POINTS:
            raise ValueError(f"max_points_per_domain must be >= {MIN_POINTS}")


def _sq_dists(P):
    diff = P[:, None, :] - P[None, :, :]
    return np.einsum("ijd,ijd->ij", diff, diff)


def gaussian_kernel_matrix(points, sigma):
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    P = np.atleast_2d(np.asarray(points, dtype=DTYPE))
    return np.exp(-_sq_dists(P) / (2.0 * sigma * sigma))


def median_bandwidth(points):
    """Median pairwise Euclidean distance, floored at ``BANDWIDTH_FLOOR``."""
    P = np.atleast_2d(np.asarray(points, dtype=DTYPE))
    n = P.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least two points")
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(_sq_dists(P)[iu])))
    return max(med, BANDWIDTH_FLOOR)


def _bandwidth(P, config):
    return median_bandwidth(P) if config.bandwidth == "median" else config.sigma


def hsic(X, Z, config=None, return_grad=False):
    """Biased HSIC ``Tr(U H V H) / (n-1)^2`` with Gaussian kernels.

    Bandwidths are chosen independently for each side and held constant
    for the gradient, which is taken w.r.t. ``Z`` only.
    """
    config = config or HSICConfig()
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    Z = np.atleast_2d(np.asarray(Z, dtype=DTYPE))
    n = X.shape[0]
    if Z.shape[0] != n:
        raise ValueError("X and Z need the same number of points")
    if n < MIN_POINTS:
        raise ValueError(f"HSIC needs at least {MIN_POINTS} points, got {n}")
    U = gaussian_kernel_matrix(X, _bandwidth(X, config))
    sigma_z = _bandwidth(Z, config)
    V = gaussian_kernel_matrix(Z, sigma_z)
    # HUH via row/column mean removal
    Uc = U - U.mean(axis=0, keepdims=True) - U.mean(axis=1, keepdims=True) + U.mean()
    norm = 1.0 / (n - 1) ** 2
    value = float(np.sum(Uc * V) * norm)
    if not return_grad:
        return value
    A = Uc * V
    grad = -(2.0 * norm / sigma_z ** 2) * (A.sum(axis=1, keepdims=True) * Z - A @ Z)
    return value, grad


def mi_calibration_loss(values, beta=1.0):
    """``Var[I] - beta * E[I]`` over domains (population variance) and dL/dI per domain."""
    I = np.asarray(values, dtype=DTYPE).reshape(-1)
    K = I.size
    if K == 0:
        raise ValueError("need at least one domain")
    mean = I.mean()
    loss = float(np.mean((I - mean) ** 2) - beta * mean)
    grad = 2.0 * (I - mean) / K - beta / K
    return loss, grad


def subsample(n, cap, rng=None):
    """Row indices keeping at most ``cap`` of ``n``; all rows in order when under the cap."""
    if n <= cap:
        return np.arange(n)
    if rng is None:
        return np.arange(cap)
    return np.sort(rng.choice(n, size=cap, replace=False))
