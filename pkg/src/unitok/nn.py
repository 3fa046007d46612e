"""Dense layers with explicit backward passes, Adam, and the seeded RNG.

Everything runs in float64. Layers accept a single vector ``(n_in,)`` or a
batch ``(n, n_in)``; gradients accumulate into the owning ``Param`` until the
optimizer consumes them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical seed gives an identical stream everywhere."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)


def _as_batch(x, n_in, what="input"):
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != n_in:
        raise ValueError(f"{what} has shape {x.shape}, expected (..., {n_in})")
    return x2, single


class Linear:
    """Affine map ``W @ x + b`` with ``W`` of shape (out, in)."""

    def __init__(self, n_in, n_out, rng=None, name="linear"):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        if rng is None:
            w = np.zeros((self.n_out, self.n_in))
        else:
            limit = np.sqrt(6.0 / self.n_in)  # He-uniform
            w = rng.uniform(-limit, limit, size=(self.n_out, self.n_in))
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros(self.n_out))

    @classmethod
    def from_arrays(cls, W, b, name="linear"):
        W = np.asarray(W, dtype=DTYPE)
        layer = cls(W.shape[1], W.shape[0], name=name)
        layer.W.value[...] = W
        layer.b.value[...] = np.asarray(b, dtype=DTYPE)
        return layer

    def params(self):
        return [self.W, self.b]

    def n_params(self):
        return self.W.value.size + self.b.value.size

    def forward(self, x):
        x2, single = _as_batch(x, self.n_in)
        y = x2 @ self.W.value.T + self.b.value
        return y[0] if single else y

    def backward(self, x, grad_out):
        """Accumulate parameter gradients and return the gradient w.r.t. ``x``."""
        x2, single = _as_batch(x, self.n_in)
        g2, _ = _as_batch(grad_out, self.n_out, "grad_out")
        if g2.shape[0] != x2.shape[0]:
            raise ValueError(f"batch mismatch: x has {x2.shape[0]} rows, grad_out {g2.shape[0]}")
        self.W.grad += g2.T @ x2
        self.b.grad += g2.sum(axis=0)
        gx = g2 @ self.W.value
        return gx[0] if single else gx


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_backward(x, grad_out):
    # subgradient 0 at x == 0
    return np.where(np.asarray(x) > 0.0, grad_out, 0.0)


class MLP:
    """Stack of Linear layers with ReLU between them and none after the last."""

    def __init__(self, dims, rng=None, name="mlp"):
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        self.dims = dims
        self.layers = [Linear(a, b, rng, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    @property
    def d_in(self):
        return self.dims[0]

    @property
    def d_out(self):
        return self.dims[-1]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def n_params(self):
        return sum(layer.n_params() for layer in self.layers)

    def forward(self, x, return_cache=False):
        h = np.asarray(x, dtype=DTYPE)
        cache = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            pre = layer.forward(h)
            cache.append((h, pre))
            h = pre if i == last else relu(pre)
        return (h, cache) if return_cache else h

    def backward(self, cache, grad_out):
        g = grad_out
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            h_in, pre = cache[i]
            if i != last:
                g = relu_backward(pre, g)
            g = self.layers[i].backward(h_in, g)
        return g


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name, step):
        super().__init__(f"non-finite gradient in {name!r} at optimizer step {step}")
        self.param_name = name
        self.step = step


class Adam:
    """Adam with bias correction. ``step`` consumes and zeroes the gradients."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(p.name, self.t + 1)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
