"""Shared encoder/decoder pair around the latent space."""
from __future__ import annotations

import numpy as np

from .nn import DTYPE, MLP

DEFAULT_HIDDEN = (256, 96)
DEFAULT_LATENT = 32


class Autoencoder:
    """Encoder ``d_in -> hidden... -> d_latent`` and its mirrored decoder."""

    def __init__(self, d_in, hidden=DEFAULT_HIDDEN, d_latent=DEFAULT_LATENT, rng=None):
        self.d_in = int(d_in)
        self.d_latent = int(d_latent)
        self.hidden = tuple(int(h) for h in hidden)
        self.encoder = MLP([self.d_in, *self.hidden, self.d_latent], rng, name="encoder")
        self.decoder = MLP([self.d_latent, *reversed(self.hidden), self.d_in], rng, name="decoder")

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def n_params(self):
        return self.encoder.n_params() + self.decoder.n_params()


def encode(ae, x, return_cache=False):
    return ae.encoder.forward(x, return_cache=return_cache)


def decode(ae, z_hat, return_cache=False):
    return ae.decoder.forward(z_hat, return_cache=return_cache)


def recon_loss(X, X_hat, reduction="sum"):
    """Squared L2 reconstruction error and its gradient w.r.t. ``X_hat``.

    ``reduction="sum"`` sums over items; ``"mean"`` divides by the item count.
    """
    X = np.asarray(X, dtype=DTYPE)
    X_hat = np.asarray(X_hat, dtype=DTYPE)
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {X_hat.shape}")
    diff = X_hat - X
    loss = float(np.sum(diff * diff))
    grad = 2.0 * diff
    if reduction == "mean":
        n = X.shape[0] if X.ndim > 1 else 1
        loss /= n
        grad /= n
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss, grad
