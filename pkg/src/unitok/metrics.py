"""Evaluation metrics, theorem-consistency checks and parameter accounting."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .hsic import MIN_POINTS, HSICConfig, hsic, subsample
from .model import TokenizerModel, TrainConfig
from .moe import moe_forward
from .nn import make_rng
from .rq import usage_entropy

EVAL_HSIC_CAP = 1024
# input width assumed when none is given: a common sentence-encoder embedding size
DEFAULT_EMBED_DIM = 768


def token_entropy(tokens):
    """Shannon entropy in bits of the empirical distribution over distinct full tokens."""
    counts = Counter(tuple(int(v) for v in t) for t in tokens)
    if not counts:
        raise ValueError("no tokens")
    p = np.array(list(counts.values()), dtype=np.float64)
    p /= p.sum()
    return float(max(0.0, -(p * np.log2(p)).sum()))


def collision_rate(tokens):
    counts = Counter(tuple(int(v) for v in t) for t in tokens)
    n = sum(counts.values())
    return sum(c for c in counts.values() if c > 1) / n if n else 0.0


def normalized_output(out):
    """Mixture output divided by its total gate weight ``sum G_k + 1``.

    This is a convex combination of the active experts' quantizations of
    ``z``, so it lives on the latent's scale; for the single-stack baseline
    it is the plain quantization.
    """
    if out.gate is None:
        return out.z_hat
    return out.z_hat / (out.gate.masked.sum(axis=1, keepdims=True) + 1.0)


def quantization_errors(z, out):
    diff = z - normalized_output(out)
    return np.einsum("nd,nd->n", diff, diff)


def quantization_error(model, dataset):
    """Mean squared distance between latents and their (gate-normalised) quantization."""
    z = model.encode(dataset.X)
    out = moe_forward(model, z, track_usage=False)
    return float(quantization_errors(z, out).mean())


@dataclass
class EvalReport:
    n_items: int
    token_length: int
    token_entropy_bits: float
    collision_rate: float
    quantization_mse: float
    relative_quantization_mse: float
    per_domain: dict
    mi_variance: float
    loss_spread: float
    usage_entropy: list
    gate_matrix: list | None
    param_counts: dict

    def to_dict(self):
        return asdict(self)


def evaluate(model, dataset, hsic_config=None, hsic_cap=EVAL_HSIC_CAP, seed=0):
    """Read-only evaluation of ``model`` on ``dataset`` (any domains, seen or not)."""
    if dataset.n_items == 0:
        raise ValueError("empty dataset")
    if dataset.d != model.d_in:
        raise ValueError(f"dataset dim {dataset.d} != model input dim {model.d_in}")
    hsic_config = hsic_config or model.config.hsic
    X = dataset.X
    z = model.encode(X)
    out = moe_forward(model, z, track_usage=False)
    x_hat = model.decode(out.z_hat)
    rec = np.sum((x_hat - X) ** 2, axis=1)
    q_err = quantization_errors(z, out)

    rng = make_rng(seed)
    per_domain = {}
    hsic_vals = []
    for k in range(dataset.K):
        rows = dataset.domain_indices(k)
        entry = {"recon_mse": float(rec[rows].mean()), "quantization_mse": float(q_err[rows].mean()),
                 "token_count": int(rows.size), "hsic": None}
        if rows.size >= MIN_POINTS:
            rows = rows[subsample(rows.size, hsic_cap, rng)]
            entry["hsic"] = hsic(X[rows], z[rows], hsic_config)
            hsic_vals.append(entry["hsic"])
        per_domain[str(dataset.domain_labels[k])] = entry

    usage = []
    for k, stack in enumerate(model.expert_stacks):
        if k not in out.expert_rq:
            usage.append([0.0] * stack.n_levels)
            continue
        res = out.expert_rq[k][1]
        usage.append([usage_entropy(np.bincount(res.indices[:, lv], minlength=stack.n_codes))
                      for lv in range(stack.n_levels)])
    sh = model.shared_stack
    usage.append([usage_entropy(np.bincount(out.shared_rq.indices[:, lv], minlength=sh.n_codes))
                  for lv in range(sh.n_levels)])

    gate_matrix = None
    if out.gate is not None:
        gate_matrix = [out.gate.masked[dataset.domains == k].mean(axis=0).tolist() for k in range(dataset.K)]

    recs = [v["recon_mse"] for v in per_domain.values()]
    z_energy = float(np.mean(np.einsum("nd,nd->n", z, z)))
    return EvalReport(
        n_items=dataset.n_items,
        token_length=int(out.tokens.shape[1]),
        token_entropy_bits=token_entropy(out.tokens),
        collision_rate=collision_rate(out.tokens),
        quantization_mse=float(q_err.mean()),
        relative_quantization_mse=float(q_err.mean() / z_energy) if z_energy > 0 else 0.0,
        per_domain=per_domain,
        mi_variance=float(np.var(hsic_vals)) if hsic_vals else 0.0,
        loss_spread=float(max(recs) - min(recs)),
        usage_entropy=usage,
        gate_matrix=gate_matrix,
        param_counts=count_parameters(model),
    )


def zero_shot_eval(model, unseen_dataset):
    """Evaluate on domains never seen in training; no parameter is touched."""
    return evaluate(model, unseen_dataset)


def count_parameters(model):
    ae = model.ae.n_params()
    codebooks = sum(s.n_params() for s in model.stacks())
    router = model.router.n_params() if model.router is not None else 0
    return {"autoencoder": ae, "codebooks": codebooks, "router": router, "total": ae + codebooks + router}


def per_domain_deployment_ratio(counts, n_domains, stack_params):
    """Parameters of ``n_domains`` separate single-stack tokenizers over this unified model's."""
    return n_domains * (counts["autoencoder"] + stack_params) / counts["total"]


def parameter_accounting(n_domains, d_in=DEFAULT_EMBED_DIM, config=None):
    """Parameter counts for a unified model and the per-domain deployment ratio.

    The ratio grows with ``d_in`` because the autoencoder is paid once
    instead of ``n_domains`` times.
    """
    config = config or TrainConfig()
    model = TokenizerModel(d_in, config, n_domains)
    counts = count_parameters(model)
    stack = model.shared_stack.n_params()
    return {**counts, "per_domain_total": n_domains * (counts["autoencoder"] + stack),
            "ratio": per_domain_deployment_ratio(counts, n_domains, stack)}


@dataclass
class TheoremReport:
    H_unitok: float
    H_baseline: float
    Q_unitok: float
    Q_baseline: float
    Q_margin: float
    relQ_unitok: float
    relQ_baseline: float
    sweep: dict          # lambda_mi -> {"mi_variance", "loss_spread"}
    default_lambda_mi: float
    checks: dict         # theorem name -> "PASS" / "FAIL"

    def to_dict(self):
        return asdict(self)


def theorem_report(dataset, config=None, sweep=(0.0, 0.3), progress=None, return_runs=False):
    """Train the multi-expert model and the single-stack baseline on the same data and seed.

    Theorem 1: token entropy of the multi-expert model above the baseline's.
    Theorem 2: its latent quantization MSE at or below the baseline's.
    Theorem 3: turning the MI term on lowers both the across-domain HSIC
    variance and the reconstruction spread, and the variance does not grow
    along the lambda_mi sweep.

    With ``return_runs`` the trained ``(model, train_report)`` pairs are
    returned too, keyed by lambda_mi and ``"baseline"``.
    """
    from .trainer import train, train_baseline_single_codebook

    config = config or TrainConfig()
    lambdas = sorted({float(config.lambda_mi), *map(float, sweep)})
    reports, runs = {}, {}
    for lam in lambdas:
        runs[lam] = train(dataset, config.replace(lambda_mi=lam), progress=progress)
        reports[lam] = evaluate(runs[lam][0], dataset)
    runs["baseline"] = train_baseline_single_codebook(dataset, config, progress=progress)
    base = evaluate(runs["baseline"][0], dataset)
    main = reports[float(config.lambda_mi)]

    sweep_out = {str(lam): {"mi_variance": r.mi_variance, "loss_spread": r.loss_spread}
                 for lam, r in reports.items()}
    variances = [reports[lam].mi_variance for lam in lambdas]
    zero = reports.get(0.0)
    t3 = (zero is not None and config.lambda_mi > 0
          and main.mi_variance < zero.mi_variance
          and main.loss_spread < zero.loss_spread
          and all(b <= a for a, b in zip(variances, variances[1:])))
    checks = {
        "theorem1_entropy": "PASS" if main.token_entropy_bits > base.token_entropy_bits else "FAIL",
        "theorem2_quantization": "PASS" if main.quantization_mse <= base.quantization_mse else "FAIL",
        "theorem3_mi_variance": "PASS" if t3 else "FAIL",
    }
    report = TheoremReport(
        H_unitok=main.token_entropy_bits, H_baseline=base.token_entropy_bits,
        Q_unitok=main.quantization_mse, Q_baseline=base.quantization_mse,
        Q_margin=base.quantization_mse - main.quantization_mse,
        relQ_unitok=main.relative_quantization_mse, relQ_baseline=base.relative_quantization_mse,
        sweep=sweep_out, default_lambda_mi=float(config.lambda_mi), checks=checks,
    )
    return (report, runs) if return_runs else report


def format_table(rows, headers):
    """Aligned plain-text table."""
    cells = [[str(h) for h in headers]] + [[f"{v:.6g}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
