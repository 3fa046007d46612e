"""Tokenizer model state and its JSON serialization."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autoencoder import DEFAULT_HIDDEN, DEFAULT_LATENT, Autoencoder
from .hsic import HSICConfig
from .nn import Linear
from .rq import CodebookStack

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lambda_rq: float = 1.0
    lambda_mi: float = 0.03
    alpha: float = 0.25
    beta: float = 1.0
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 256
    min_per_domain: int = 16
    n_active: int = 1
    seed: int = 42
    hidden: tuple = DEFAULT_HIDDEN
    latent_dim: int = DEFAULT_LATENT
    n_levels: int = 4
    codebook_size: int = 256
    warmup_epochs: int = 20
    reset_dead_codes: bool = True
    dead_code_threshold: int = 1
    route_by_domain: bool = False
    router_init: str = "domain_mean"   # or "he_uniform"
    hsic: HSICConfig = field(default_factory=HSICConfig)

    def __post_init__(self):
        if isinstance(self.hsic, dict):
            self.hsic = HSICConfig(**self.hsic)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.lambda_rq < 0 or self.lambda_mi < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.min_per_domain < 0 or self.n_active < 1:
            raise ConfigError("batch_size and n_active must be >= 1, min_per_domain >= 0")
        if self.router_init not in ("domain_mean", "he_uniform"):
            raise ConfigError(f"router_init must be 'domain_mean' or 'he_uniform', got {self.router_init!r}")
        if self.n_levels < 1 or self.codebook_size < 1 or self.latent_dim < 1 or not self.lr > 0:
            raise ConfigError("n_levels, codebook_size, latent_dim and lr must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


class TokenizerModel:
    """Autoencoder, router and ``n_experts + 1`` codebook stacks.

    ``n_experts == 0`` gives the single-stack baseline: no router and the
    shared stack is the only quantizer.
    """

    def __init__(self, d_in, config, n_experts, rng=None, domain_labels=None, shared_codes=None):
        self.config = config
        self.ae = Autoencoder(d_in, config.hidden, config.latent_dim, rng)
        self.router = Linear(config.latent_dim, n_experts, rng, name="router") if n_experts else None
        L, T, D = config.n_levels, config.codebook_size, config.latent_dim
        self.expert_stacks = [CodebookStack.zeros(L, T, D, name=f"expert{k}") for k in range(n_experts)]
        self.shared_stack = CodebookStack.zeros(L, shared_codes or T, D, name="shared")
        self.n_active = min(config.n_active, n_experts) if n_experts else 0
        self.domain_labels = list(domain_labels) if domain_labels is not None else list(range(n_experts))

    @property
    def d_in(self):
        return self.ae.d_in

    @property
    def n_experts(self):
        return len(self.expert_stacks)

    @property
    def is_baseline(self):
        return self.router is None

    @property
    def token_length(self):
        return self.shared_stack.n_levels + self.n_active

    def stacks(self):
        return [*self.expert_stacks, self.shared_stack]

    def params(self):
        ps = self.ae.params()
        if self.router is not None:
            ps += self.router.params()
        for s in self.stacks():
            ps += s.params()
        return ps

    def encode(self, X):
        return self.ae.encoder.forward(X)

    def decode(self, z_hat):
        return self.ae.decoder.forward(z_hat)

    def to_dict(self):
        def layers(mlp):
            return [{"W": layer.W.value.tolist(), "b": layer.b.value.tolist()} for layer in mlp.layers]

        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "d_in": self.d_in,
            "domain_labels": self.domain_labels,
            "seed": self.config.seed,
            "encoder": layers(self.ae.encoder),
            "decoder": layers(self.ae.decoder),
            "router": None if self.router is None else
            {"W": self.router.W.value.tolist(), "b": self.router.b.value.tolist()},
            "expert_stacks": [s.codes.value.tolist() for s in self.expert_stacks],
            "shared_stack": self.shared_stack.codes.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported model format_version {version!r}")
        config = TrainConfig.from_dict(d["config"])
        shared = np.asarray(d["shared_stack"], dtype=np.float64)
        model = cls(d["d_in"], config, len(d["expert_stacks"]), domain_labels=d["domain_labels"],
                    shared_codes=shared.shape[1])
        for mlp, key in ((model.ae.encoder, "encoder"), (model.ae.decoder, "decoder")):
            if len(d[key]) != len(mlp.layers):
                raise ConfigError(f"{key} depth does not match the stored config")
            for layer, stored in zip(mlp.layers, d[key]):
                layer.W.value[...] = stored["W"]
                layer.b.value[...] = stored["b"]
        if model.router is not None:
            model.router.W.value[...] = d["router"]["W"]
            model.router.b.value[...] = d["router"]["b"]
        for stack, codes in zip(model.expert_stacks, d["expert_stacks"]):
            stack.codes.value[...] = codes
        model.shared_stack.codes.value[...] = shared
        return model


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return TokenizerModel.from_dict(json.load(fh))
