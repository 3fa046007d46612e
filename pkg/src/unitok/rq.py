"""Residual quantization over stacks of codebooks."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .nn import DTYPE, Param

INIT_JITTER = 1e-3
KMEANS_ITERS = 20
_CHUNK = 1 << 22  # max floats in one distance block


class CodebookStack:
    """``L`` codebooks of ``T`` codes each, stored as one (L, T, D) parameter."""

    def __init__(self, codes, name="stack"):
        codes = np.asarray(codes, dtype=DTYPE)
        if codes.ndim != 3 or min(codes.shape) < 1:
            raise ValueError(f"codes must be (L, T, D) with positive sizes, got {codes.shape}")
        self.codes = Param(f"{name}.codes", codes)
        self.usage = np.zeros(codes.shape[:2], dtype=np.int64)

    @classmethod
    def zeros(cls, n_levels, n_codes, dim, name="stack"):
        return cls(np.zeros((n_levels, n_codes, dim)), name=name)

    @property
    def n_levels(self):
        return self.codes.value.shape[0]

    @property
    def n_codes(self):
        return self.codes.value.shape[1]

    @property
    def dim(self):
        return self.codes.value.shape[2]

    def params(self):
        return [self.codes]

    def n_params(self):
        return self.codes.value.size

    def reset_usage(self):
        self.usage.fill(0)


@dataclass
class RQResult:
    indices: np.ndarray    # (n, L)
    quantized: np.ndarray  # (n, D), z - r^(L); equals the sum of the selected codes up to rounding
    residuals: np.ndarray  # (n, L + 1, D); residuals[:, l] is what level l+1 quantizes

    @property
    def codes(self):
        """Selected code vectors, (n, L, D)."""
        return self.residuals[:, :-1] - self.residuals[:, 1:]


def _argmin_sq_dist(r, codebook):
    # Screen with the BLAS expansion, then settle near-ties on exact
    # differences so the result matches a plain linear scan.
    c_sq = np.einsum("td,td->t", codebook, codebook)
    approx = c_sq[None, :] - 2.0 * (r @ codebook.T)
    best = approx.min(axis=1, keepdims=True)
    r_sq = np.einsum("nd,nd->n", r, r)[:, None]
    tol = 1e-9 * (r_sq + c_sq.max()) + 1e-300
    close = approx <= best + tol
    idx = np.argmax(close, axis=1)
    ambiguous = np.flatnonzero(close.sum(axis=1) > 1)
    T, D = codebook.shape
    step = max(1, _CHUNK // (T * D))
    for s in range(0, ambiguous.size, step):
        rows = ambiguous[s:s + step]
        diff = r[rows, None, :] - codebook[None, :, :]
        exact = np.einsum("ntd,ntd->nt", diff, diff)
        exact[~close[rows]] = np.inf
        idx[rows] = np.argmin(exact, axis=1)
    return idx


def nearest_code(r, codebook):
    """Index and vector of the code closest to ``r`` in squared distance; ties go to the lower index.

    ``r`` may be a vector or a batch of vectors.
    """
    codebook = np.asarray(codebook, dtype=DTYPE)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    r = np.asarray(r, dtype=DTYPE)
    single = r.ndim == 1
    r2 = r[None, :] if single else r
    if r2.shape[1] != codebook.shape[1]:
        raise ValueError(f"dim mismatch: residual {r2.shape[1]}, codes {codebook.shape[1]}")
    idx = _argmin_sq_dist(r2, codebook)
    if single:
        return int(idx[0]), codebook[idx[0]].copy()
    return idx, codebook[idx]


def rq_encode(z, stack, track_usage=True):
    z = np.asarray(z, dtype=DTYPE)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.shape[1] != stack.dim:
        raise ValueError(f"latent dim {z2.shape[1]} != codebook dim {stack.dim}")
    n, L = z2.shape[0], stack.n_levels
    residuals = np.empty((n, L + 1, stack.dim))
    residuals[:, 0] = z2
    indices = np.empty((n, L), dtype=np.int64)
    for level in range(L):
        idx, code = nearest_code(residuals[:, level], stack.codes.value[level])
        indices[:, level] = idx
        residuals[:, level + 1] = residuals[:, level] - code
        if track_usage:
            np.add.at(stack.usage[level], idx, 1)
    # quantized is defined as r^(0) - r^(L); the code sum agrees up to rounding
    res = RQResult(indices, z2 - residuals[:, L], residuals)
    if single:
        return RQResult(indices[0], res.quantized[0], residuals[0])
    return res


def rq_loss(result, alpha=0.25):
    """Per-item RQ loss with stop-gradient routing.

    Level ``l`` pairs its code with the residual it quantized. The codebook
    term moves codes toward frozen residuals; the commitment term (weight
    ``alpha``) moves the latent toward frozen codes. Residuals depend on the
    latent only: earlier codes are frozen inside them.

    Returns ``(loss_per_item, grad_codes, grad_z)`` with ``grad_codes`` of
    shape (n, L, D), aligned with ``result.indices``.
    """
    res = result.residuals
    single = res.ndim == 2
    if single:
        res = res[None]
    err = res[:, 1:]  # quantized residual minus its code
    loss = (1.0 + alpha) * np.einsum("nld,nld->n", err, err)
    grad_codes = -2.0 * err
    grad_z = 2.0 * alpha * err.sum(axis=1)
    if single:
        return float(loss[0]), grad_codes[0], grad_z[0]
    return loss, grad_codes, grad_z


def scatter_code_grads(stack, indices, grad_codes, scale=1.0):
    """Accumulate per-item code gradients into the stack's gradient buffer."""
    indices = np.atleast_2d(indices)
    grad_codes = grad_codes.reshape(indices.shape[0], indices.shape[1], -1)
    for level in range(stack.n_levels):
        np.add.at(stack.codes.grad[level], indices[:, level], scale * grad_codes[:, level])


def kmeans_codes(points, n_codes, rng):
    """``n_codes`` k-means++/Lloyd centroids; short inputs are padded with jittered copies."""
    points = np.asarray(points, dtype=DTYPE)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("k-means needs at least one point")
    n_distinct = np.unique(points, axis=0).shape[0]
    k = min(n_codes, n_distinct)
    if k == 1:
        centroids = points.mean(axis=0, keepdims=True)
    else:
        km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=KMEANS_ITERS,
                    tol=0.0, random_state=int(rng.integers(2**31 - 1)), algorithm="lloyd")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            km.fit(points)
        centroids = km.cluster_centers_.astype(DTYPE)
    if k < n_codes:
        extra = centroids[rng.integers(0, k, size=n_codes - k)]
        extra = extra + INIT_JITTER * rng.standard_normal(extra.shape)
        centroids = np.vstack([centroids, extra])
    return centroids


def init_stack_from_domain(latents, rng, n_levels=4, n_codes=256, name="stack"):
    """Level 1 from k-means on the latents, deeper levels from k-means on what is left over."""
    latents = np.atleast_2d(np.asarray(latents, dtype=DTYPE))
    codes = np.empty((n_levels, n_codes, latents.shape[1]))
    residual = latents.copy()
    for level in range(n_levels):
        codes[level] = kmeans_codes(residual, n_codes, rng)
        _, chosen = nearest_code(residual, codes[level])
        residual = residual - chosen
    return CodebookStack(codes, name=name)


def reset_dead_codes(stack, residuals_seen, threshold, rng):
    """Move codes used fewer than ``threshold`` times onto random observed residuals.

    ``residuals_seen[l]`` holds the residuals that level ``l`` quantized this
    epoch. Levels with no observations are left alone. Usage counters are
    reset afterwards. Returns the number of codes moved.
    """
    moved = 0
    for level in range(stack.n_levels):
        dead = np.flatnonzero(stack.usage[level] < threshold)
        pool = residuals_seen[level] if level < len(residuals_seen) else None
        if dead.size == 0 or pool is None or len(pool) == 0:
            continue
        pick = pool[rng.integers(0, len(pool), size=dead.size)]
        stack.codes.value[level, dead] = pick + INIT_JITTER * rng.standard_normal(pick.shape)
        moved += dead.size
    stack.reset_usage()
    return moved


def usage_entropy(counts):
    """Shannon entropy (bits) of a usage histogram; 0 for an empty one."""
    counts = np.asarray(counts, dtype=DTYPE)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())
