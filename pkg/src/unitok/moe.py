"""Router, sparse expert mixture over codebook stacks, and token assembly.

Forward: ``z_hat = sum_{k in top-N} G_k * q_k(z) + q_shared(z)`` where
``q_k`` is residual quantization through expert ``k``'s stack and ``G`` the
raw (not renormalised) softmax gate.

Backward uses the straight-through surrogate
``sum G_k * (z + sg(q_k - z)) + (z + sg(q_shared - z))``: the latent gets the
upstream gradient scaled by ``sum G_k + 1`` and the gate of expert ``k``
gets ``<grad, q_k(z)>``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .nn import DTYPE, Linear
from .rq import RQResult, rq_encode


@dataclass
class GateDecision:
    logits: np.ndarray     # (n, K)
    probs: np.ndarray      # (n, K)
    selected: np.ndarray   # (n, N), descending gate order
    masked: np.ndarray     # (n, K), probs on selected experts, 0 elsewhere


@dataclass
class MoEOutput:
    z_hat: np.ndarray
    gate: GateDecision | None
    expert_rq: dict        # expert -> (rows, RQResult) for items that selected it
    shared_rq: RQResult
    tokens: np.ndarray     # (n, L + N)


def softmax(logits):
    s = np.asarray(logits, dtype=DTYPE)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def top_n(probs, n_active):
    # stable sort on -p keeps the lower index first among ties
    return np.argsort(-probs, axis=-1, kind="stable")[..., :n_active]


def route(router, z, n_active=1, forced=None):
    """Gate decision for each latent.

    ``forced`` (optional, one expert id per item) pins the first selected
    slot regardless of the router; the remaining slots follow the gate.
    """
    z = np.asarray(z, dtype=DTYPE)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    K = router.n_out
    n_active = min(int(n_active), K)
    if n_active < 1:
        raise ValueError("n_active must be >= 1")
    logits = router.forward(z2)
    probs = softmax(logits)
    if forced is None:
        selected = top_n(probs, n_active)
    else:
        forced = np.asarray(forced, dtype=np.int64).reshape(-1)
        rest = probs.copy()
        rest[np.arange(len(forced)), forced] = -np.inf
        selected = np.column_stack([forced, top_n(rest, n_active - 1)])
    mask = np.zeros_like(probs)
    np.put_along_axis(mask, selected, 1.0, axis=1)
    gate = GateDecision(logits, probs, selected, probs * mask)
    if single:
        return GateDecision(logits[0], probs[0], selected[0], gate.masked[0])
    return gate


def assemble_token(code_indices, expert_ids=()):
    """Concatenate code indices and expert ids into one token tuple."""
    return tuple(int(v) for v in code_indices) + tuple(int(e) for e in expert_ids)


def moe_forward(model, z, track_usage=True, forced=None):
    """Run the expert mixture on a batch of latents ``(n, D)``.

    ``model`` needs ``router`` (Linear or None), ``expert_stacks``,
    ``shared_stack`` and ``n_active``. With no router the layer is a single
    shared stack and tokens carry no expert ids.
    """
    z = np.atleast_2d(np.asarray(z, dtype=DTYPE))
    n = z.shape[0]
    shared = rq_encode(z, model.shared_stack, track_usage=track_usage)
    if model.router is None:
        return MoEOutput(shared.quantized.copy(), None, {}, shared, shared.indices.copy())

    gate = route(model.router, z, model.n_active, forced=forced)
    z_hat = shared.quantized.copy()
    expert_rq = {}
    L = model.shared_stack.n_levels
    primary_codes = np.empty((n, L), dtype=np.int64)
    for k, stack in enumerate(model.expert_stacks):
        rows = np.flatnonzero((gate.selected == k).any(axis=1))
        if rows.size == 0:
            continue
        res = rq_encode(z[rows], stack, track_usage=track_usage)
        expert_rq[k] = (rows, res)
        z_hat[rows] += gate.masked[rows, k, None] * res.quantized
        primary = gate.selected[rows, 0] == k
        primary_codes[rows[primary]] = res.indices[primary]
    tokens = np.hstack([primary_codes, gate.selected])
    return MoEOutput(z_hat, gate, expert_rq, shared, tokens)


def moe_backward(model, z, out, grad_zhat):
    """Straight-through backward; accumulates router gradients, returns dL/dz."""
    grad_zhat = np.atleast_2d(grad_zhat)
    if model.router is None:
        return grad_zhat.copy()
    gate = out.gate
    grad_gate = np.zeros_like(gate.probs)
    for k, (rows, res) in out.expert_rq.items():
        grad_gate[rows, k] = np.einsum("nd,nd->n", grad_zhat[rows], res.quantized)
    p = gate.probs
    grad_logits = p * (grad_gate - np.sum(grad_gate * p, axis=1, keepdims=True))
    grad_z = (gate.masked.sum(axis=1, keepdims=True) + 1.0) * grad_zhat
    grad_z += model.router.backward(np.atleast_2d(z), grad_logits)
    return grad_z


@dataclass
class TokenTable:
    tokens: np.ndarray       # (n, L + N) ints
    domains: np.ndarray      # original domain labels
    item_ids: list
    gates: np.ndarray | None  # (n, K) masked gates

    @property
    def n_collisions(self):
        """Items whose full token is shared with at least one other item."""
        counts = Counter(map(tuple, self.tokens.tolist()))
        return sum(c for c in counts.values() if c > 1)

    @property
    def collision_rate(self):
        return self.n_collisions / len(self.tokens) if len(self.tokens) else 0.0

    def rows(self):
        for i in range(len(self.tokens)):
            yield {"domain": int(self.domains[i]), "item_id": self.item_ids[i],
                   "token": [int(v) for v in self.tokens[i]]}


def tokenize_dataset(model, dataset, chunk=1024):
    """Tokenize every item without touching parameters or usage counters."""
    if dataset.d != model.d_in:
        raise ValueError(f"dataset dim {dataset.d} != model input dim {model.d_in}")
    tokens, gates = [], []
    for s in range(0, dataset.n_items, chunk):
        z = model.encode(dataset.X[s:s + chunk])
        out = moe_forward(model, z, track_usage=False)
        tokens.append(out.tokens)
        if out.gate is not None:
            gates.append(out.gate.masked)
    labels = np.asarray(dataset.domain_labels)[dataset.domains]
    return TokenTable(np.vstack(tokens), labels, list(dataset.item_ids),
                      np.vstack(gates) if gates else None)
