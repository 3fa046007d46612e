"""Composite objective and the optimisation loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autoencoder import recon_loss
from .data import sample_batch
from .hsic import MIN_POINTS, hsic, mi_calibration_loss, subsample
from .model import TokenizerModel
from .moe import moe_backward, moe_forward
from .nn import Adam, make_rng
from .rq import init_stack_from_domain, reset_dead_codes, rq_loss, scatter_code_grads, usage_entropy


class TrainingDivergence(FloatingPointError):
    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown or {}


@dataclass
class LossBreakdown:
    total: float
    rec: float
    rq: float
    mi: float
    hsic: dict            # domain -> HSIC value (domains with enough points)
    per_domain_rec: dict  # domain -> mean squared reconstruction error
    out: object = None    # MoEOutput, for callers that need routing details

    def components(self):
        return {"total": self.total, "rec": self.rec, "rq": self.rq, "mi": self.mi}


def total_loss(model, X, domains, config, rng=None, track_usage=False):
    """Reconstruction + lambda_rq * RQ + lambda_mi * MI, gradients accumulated into the model.

    Reconstruction and RQ terms are means over the batch (RQ summed over
    levels and over every active stack of an item). The MI term uses the
    encoder output of each domain present with at least ``MIN_POINTS`` items.
    """
    n = X.shape[0]
    enc = model.ae.encoder
    z, enc_cache = enc.forward(X, return_cache=True)
    forced = domains if (config.route_by_domain and model.router is not None) else None
    out = moe_forward(model, z, track_usage=track_usage, forced=forced)
    x_hat, dec_cache = model.ae.decoder.forward(out.z_hat, return_cache=True)
    rec, g_xhat = recon_loss(X, x_hat, reduction="mean")
    g_z = moe_backward(model, z, out, model.ae.decoder.backward(dec_cache, g_xhat))

    err = np.sum((x_hat - X) ** 2, axis=1)
    per_domain_rec = {int(k): float(err[domains == k].mean()) for k in np.unique(domains)}

    rq_total = 0.0
    w = config.lambda_rq / n
    for stack, rows, res in [(model.shared_stack, slice(None), out.shared_rq)] + [
            (model.expert_stacks[k], rows, res) for k, (rows, res) in sorted(out.expert_rq.items())]:
        loss_i, g_codes, g_commit = rq_loss(res, config.alpha)
        rq_total += float(loss_i.sum())
        if w > 0:
            scatter_code_grads(stack, res.indices, g_codes, scale=w)
            g_z[rows] += w * g_commit
    rq_total /= n

    hsic_vals, hsic_grads, hsic_rows = {}, [], []
    for k in np.unique(domains):
        rows = np.flatnonzero(domains == k)
        if rows.size < MIN_POINTS:
            continue
        rows = rows[subsample(rows.size, config.hsic.max_points_per_domain, rng)]
        val, grad = hsic(X[rows], z[rows], config.hsic, return_grad=True)
        hsic_vals[int(k)] = val
        hsic_grads.append(grad)
        hsic_rows.append(rows)
    mi = 0.0
    if hsic_vals:
        mi, dmi = mi_calibration_loss(list(hsic_vals.values()), config.beta)
        if config.lambda_mi > 0:
            for coef, rows, grad in zip(dmi, hsic_rows, hsic_grads):
                g_z[rows] += config.lambda_mi * coef * grad

    enc.backward(enc_cache, g_z)
    total = rec + config.lambda_rq * rq_total + config.lambda_mi * mi
    if not math.isfinite(total):
        parts = {"rec": rec, "rq": rq_total, "mi": mi}
        raise TrainingDivergence(f"non-finite loss: {parts}", parts)
    return LossBreakdown(total, rec, rq_total, mi, hsic_vals, per_domain_rec, out)


@dataclass
class EpochStats:
    epoch: int
    total: float
    rec: float
    rq: float
    mi: float
    per_domain_rec: list
    per_domain_hsic: list
    hsic_var: float
    usage_entropy: list      # per stack (experts then shared), per level, bits
    gate_matrix: list        # domain x expert mean masked gate
    dead_codes_reset: int


@dataclass
class TrainReport:
    warmup_rec: list = field(default_factory=list)
    initial_rec: float | None = None
    epochs: list = field(default_factory=list)

    def to_dict(self):
        return {"warmup_rec": self.warmup_rec, "initial_rec": self.initial_rec,
                "epochs": [asdict(e) for e in self.epochs]}


def _batch_shape(dataset, config):
    bs = min(config.batch_size, dataset.n_items)
    mpd = min(config.min_per_domain, int(dataset.domain_counts().min()), bs // dataset.K)
    return bs, mpd


def dataset_recon_loss(model, X, chunk=1024):
    """Mean per-item squared reconstruction error through the full model."""
    total = 0.0
    for s in range(0, X.shape[0], chunk):
        xb = X[s:s + chunk]
        out = moe_forward(model, model.encode(xb), track_usage=False)
        total += float(np.sum((model.decode(out.z_hat) - xb) ** 2))
    return total / X.shape[0]


def _warmup(model, dataset, config, rng, report, progress):
    if config.warmup_epochs == 0:
        return
    bs, mpd = _batch_shape(dataset, config)
    steps = math.ceil(dataset.n_items / bs)
    opt = Adam(model.ae.params(), lr=config.lr)
    for epoch in range(config.warmup_epochs):
        acc = 0.0
        for _ in range(steps):
            batch = sample_batch(dataset, bs, mpd, rng)
            z, ec = model.ae.encoder.forward(batch.X, return_cache=True)
            x_hat, dc = model.ae.decoder.forward(z, return_cache=True)
            loss, g = recon_loss(batch.X, x_hat, reduction="mean")
            model.ae.encoder.backward(ec, model.ae.decoder.backward(dc, g))
            opt.step()
            acc += loss
        report.warmup_rec.append(acc / steps)
        if progress:
            progress(f"warmup {epoch + 1}/{config.warmup_epochs} rec={acc / steps:.6f}")


def init_router_from_means(router, means, spread):
    """Logits ``-||z - mean_k||^2 / spread`` up to a per-item constant."""
    means = np.asarray(means)
    router.W.value[...] = 2.0 * means / spread
    router.b.value[...] = -np.einsum("kd,kd->k", means, means) / spread


def init_codebooks(model, dataset, rng):
    """Seed every expert from its own domain's latents and the shared stack from all of them.

    Runs on the current encoder output, so call it after the warm-up. The
    router is re-seeded too, so each domain starts routed to its own expert.
    """
    Z = model.encode(dataset.X)
    L, T = model.config.n_levels, model.config.codebook_size
    means = []
    for k in range(model.n_experts):
        Zk = Z[dataset.domains == k]
        means.append(Zk.mean(axis=0))
        stack = init_stack_from_domain(Zk, rng, L, T, name=f"expert{k}")
        model.expert_stacks[k].codes.value[...] = stack.codes.value
    shared = init_stack_from_domain(Z, rng, L, model.shared_stack.n_codes, name="shared")
    model.shared_stack.codes.value[...] = shared.codes.value
    if model.router is not None and model.config.router_init == "domain_mean":
        means = np.array(means)
        spread = float(np.mean(np.sum((Z - means[dataset.domains]) ** 2, axis=1)))
        init_router_from_means(model.router, means, max(spread, 1e-12))


def _fit(model, dataset, config, rng, progress):
    report = TrainReport()
    _warmup(model, dataset, config, rng, report, progress)
    init_codebooks(model, dataset, rng)
    for s in model.stacks():
        s.reset_usage()
    report.initial_rec = dataset_recon_loss(model, dataset.X)
    if config.epochs == 0:
        return report

    opt = Adam(model.params(), lr=config.lr)
    bs, mpd = _batch_shape(dataset, config)
    steps = math.ceil(dataset.n_items / bs)
    K, E = dataset.K, model.n_experts
    stacks = model.stacks()
    for epoch in range(config.epochs):
        sums = {"total": 0.0, "rec": 0.0, "rq": 0.0, "mi": 0.0}
        dom_rec = np.zeros(K)
        dom_rec_n = np.zeros(K)
        dom_hsic = np.zeros(K)
        dom_hsic_n = np.zeros(K)
        gate_sum = np.zeros((K, E))
        gate_n = np.zeros(K)
        seen = [[[] for _ in range(s.n_levels)] for s in stacks]
        for _ in range(steps):
            batch = sample_batch(dataset, bs, mpd, rng)
            lb = total_loss(model, batch.X, batch.domains, config, rng=rng, track_usage=True)
            opt.step()
            for key, val in lb.components().items():
                sums[key] += val
            for k, v in lb.per_domain_rec.items():
                dom_rec[k] += v
                dom_rec_n[k] += 1
            for k, v in lb.hsic.items():
                dom_hsic[k] += v
                dom_hsic_n[k] += 1
            out = lb.out
            if out.gate is not None:
                np.add.at(gate_sum, batch.domains, out.gate.masked)
                np.add.at(gate_n, batch.domains, 1)
            for level in range(model.shared_stack.n_levels):
                seen[-1][level].append(out.shared_rq.residuals[:, level])
            for k, (_, res) in out.expert_rq.items():
                for level in range(res.indices.shape[1]):
                    seen[k][level].append(res.residuals[:, level])

        entropies = [[usage_entropy(s.usage[lv]) for lv in range(s.n_levels)] for s in stacks]
        n_reset = 0
        if config.reset_dead_codes:
            for s, pools in zip(stacks, seen):
                pools = [np.vstack(p) if p else None for p in pools]
                n_reset += reset_dead_codes(s, pools, config.dead_code_threshold, rng)
        else:
            for s in stacks:
                s.reset_usage()

        hsic_mean = np.divide(dom_hsic, dom_hsic_n, out=np.full(K, np.nan), where=dom_hsic_n > 0)
        valid = hsic_mean[np.isfinite(hsic_mean)]
        stats = EpochStats(
            epoch=epoch + 1,
            **{k: v / steps for k, v in sums.items()},
            per_domain_rec=(dom_rec / np.maximum(dom_rec_n, 1)).tolist(),
            per_domain_hsic=[None if not np.isfinite(v) else float(v) for v in hsic_mean],
            hsic_var=float(np.var(valid)) if valid.size else 0.0,
            usage_entropy=entropies,
            gate_matrix=(gate_sum / np.maximum(gate_n, 1)[:, None]).tolist(),
            dead_codes_reset=n_reset,
        )
        report.epochs.append(stats)
        if progress:
            progress(f"epoch {stats.epoch}/{config.epochs} total={stats.total:.6f} rec={stats.rec:.6f} "
                     f"rq={stats.rq:.6f} mi={stats.mi:.6f} hsic_var={stats.hsic_var:.3e} reset={n_reset}")
    return report


def train(dataset, config, progress=None):
    """Fit the multi-expert tokenizer; deterministic in ``config.seed``."""
    rng = make_rng(config.seed)
    model = TokenizerModel(dataset.d, config, dataset.K, rng, domain_labels=dataset.domain_labels)
    report = _fit(model, dataset, config, rng, progress)
    return model, report


def train_baseline_single_codebook(dataset, config, parameter_matched=False, progress=None):
    """Same pipeline with one codebook stack, no router and no MI term.

    By default the stack has the size of one expert's; ``parameter_matched``
    gives it as many codes per level as all experts plus the shared stack.
    """
    config = config.replace(lambda_mi=0.0)
    T = config.codebook_size * (dataset.K + 1) if parameter_matched else config.codebook_size
    rng = make_rng(config.seed)
    model = TokenizerModel(dataset.d, config, 0, rng, domain_labels=dataset.domain_labels, shared_codes=T)
    report = _fit(model, dataset, config, rng, progress)
    return model, report
