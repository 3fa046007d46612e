"""scikit-learn style wrapper: ``fit(X, domains)`` then ``transform(X)`` to tokens."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .data import Dataset
from .metrics import evaluate
from .model import TrainConfig
from .moe import moe_forward
from .trainer import train, train_baseline_single_codebook


class ItemTokenizer(TransformerMixin, BaseEstimator):
    """Multi-domain item tokenizer.

    ``fit`` takes item embeddings and their integer domain labels;
    ``transform`` maps embeddings to integer tokens of length
    ``n_levels + n_active`` (code indices of the primary expert followed by
    the selected expert ids). With ``single_codebook=True`` the model is the
    one-stack baseline and tokens hold code indices only.
    """

    def __init__(self, *, lambda_rq=1.0, lambda_mi=0.03, alpha=0.25, beta=1.0, lr=1e-3, epochs=200,
                 batch_size=256, min_per_domain=16, n_active=1, hidden=(256, 96), latent_dim=32,
                 n_levels=4, codebook_size=256, warmup_epochs=20, random_state=42, single_codebook=False):
        self.lambda_rq = lambda_rq
        self.lambda_mi = lambda_mi
        self.alpha = alpha
        self.beta = beta
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.min_per_domain = min_per_domain
        self.n_active = n_active
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.n_levels = n_levels
        self.codebook_size = codebook_size
        self.warmup_epochs = warmup_epochs
        self.random_state = random_state
        self.single_codebook = single_codebook

    def _config(self):
        params = self.get_params()
        seed = params.pop("random_state")
        params.pop("single_codebook")
        return TrainConfig(seed=0 if seed is None else int(seed), **params)

    def _dataset(self, X, y):
        labels = column_or_1d(y, warn=True)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("domain labels must be integers")
        if labels.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but {labels.shape[0]} domain labels")
        uniq, dense = np.unique(labels, return_inverse=True)
        return Dataset(X, dense, domain_labels=uniq.tolist())

    def fit(self, X, y):
        """Train on embeddings ``X`` (n, d) with integer domain labels ``y``."""
        X = check_array(X, dtype=np.float64)
        ds = self._dataset(X, y)
        trainer = train_baseline_single_codebook if self.single_codebook else train
        self.model_, self.report_ = trainer(ds, self._config())
        self.n_features_in_ = X.shape[1]
        self.domains_ = np.asarray(ds.domain_labels)
        return self

    def transform(self, X):
        """Token matrix (n, token_length) of ints."""
        check_is_fitted(self, "model_")
        X = self._check_features(X)
        z = self.model_.encode(X)
        return moe_forward(self.model_, z, track_usage=False).tokens

    def gates(self, X):
        """Masked gate weights (n, K); ``None`` for the single-codebook model."""
        check_is_fitted(self, "model_")
        X = self._check_features(X)
        out = moe_forward(self.model_, self.model_.encode(X), track_usage=False)
        return None if out.gate is None else out.gate.masked

    def evaluate(self, X, y):
        """:class:`~unitok.metrics.EvalReport` on labelled data, seen or unseen domains."""
        check_is_fitted(self, "model_")
        X = self._check_features(X)
        return evaluate(self.model_, self._dataset(X, y))

    def _check_features(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model expects {self.n_features_in_}")
        return X
