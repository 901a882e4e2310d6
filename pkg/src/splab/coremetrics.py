"""Unsupervised SAE quality metrics: fidelity, downstream loss, sparsity, similarity.

Reconstruction and sparsity figures are computed in the SAE's normalised
input space (raw activations times the stored factor ``c``), the space the
training loss lives in. Downstream scores splice un-normalised reconstructions
back into the host.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numkit as nk
from .errors import DegenerateBaselineError, DimensionError, InputError
from .hostmodel import HookSite, HostModel, Substitute, run_with_hook
from .sae import Sae, encode, reconstruct

DENSITY_MIN_TOKENS = 100

BIAS_DEFINITION = "1/gamma with gamma = sum<xhat,x> / sum|x|^2; 1 = unbiased, >1 = shrinkage"
ABLATION = "mean"
KL_DIRECTION = "KL(plain || intervened), nats"


def _pair(x: np.ndarray, xhat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape or x.ndim != 2:
        raise DimensionError(f"x {x.shape} and xhat {xhat.shape} must be matching [N, n] arrays")
    if len(x) < 2:
        raise InputError("reconstruction stats need at least two samples")
    return x, xhat


def reconstruction_stats(x: np.ndarray, xhat: np.ndarray) -> dict[str, float]:
    x, xhat = _pair(x, xhat)
    err = x - xhat
    sq_err = (err * err).sum(axis=1)
    centred = x - x.mean(axis=0)
    total_var = float((centred * centred).sum())
    if total_var <= 0 or float(x.var()) <= 0:
        raise InputError("explained variance is undefined for zero-variance input")
    norm_in = np.linalg.norm(x, axis=1)
    norm_out = np.linalg.norm(xhat, axis=1)
    denom = norm_in * norm_out
    cos = np.where(denom > 0, (x * xhat).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    # gamma is the least-squares scale in xhat ~ gamma * x, so xhat = x / 2 gives gamma = 1/2
    gamma = float((xhat * x).sum()) / float((x * x).sum())
    return {
        "mse": float(sq_err.mean() / x.shape[1]),
        "explained_variance": 1.0 - float(sq_err.sum()) / total_var,
        "explained_variance_legacy": 1.0 - float(err.var()) / float(x.var()),
        "cossim": float(np.clip(cos, -1.0, 1.0).mean()),
        "l2_norm_in": float(norm_in.mean()),
        "l2_norm_out": float(norm_out.mean()),
        "l2_ratio": l2_ratio(float(norm_in.mean()), float(norm_out.mean())),
        "relative_reconstruction_bias": 1.0 / gamma if gamma != 0 else float("inf"),
    }


def l2_ratio(l2_in: float, l2_out: float) -> float:
    if l2_in <= 0:
        raise InputError("mean input norm must be positive")
    return l2_out / l2_in


def sparsity_stats(h: np.ndarray) -> dict[str, float]:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or len(h) == 0:
        raise InputError("sparsity stats need a non-empty [N, M] latent batch")
    if len(h) < DENSITY_MIN_TOKENS:
        raise InputError(f"density statistics need at least {DENSITY_MIN_TOKENS} tokens, got {len(h)}")
    freq = (h > 0).mean(axis=0)
    total = float(freq.sum())

    def share(mask: np.ndarray) -> float:
        # partial sums can overshoot the full sum by an ulp
        return min(1.0, float(freq[mask].sum()) / total) if total > 0 else 0.0

    over1, over10 = freq > 0.01, freq > 0.10
    return {
        "l0": float((np.abs(h) > 0).sum(axis=1).mean()),
        "l1": float(np.abs(h).sum(axis=1).mean()),
        "freq_over_1pct": float(over1.mean()),
        "freq_over_10pct": float(over10.mean()),
        "normalized_freq_over_1pct": share(over1),
        "normalized_freq_over_10pct": share(over10),
        "frac_alive": float((freq > 0).mean()),
    }


def _avg_max_cos(vectors: np.ndarray) -> tuple[float, int]:
    """Mean over vectors of the max cosine with any other; zero vectors are excluded."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    keep = norms > 0
    v = v[keep] / norms[keep, None]
    excluded = int((~keep).sum())
    if len(v) < 2:
        return 0.0, excluded
    sim = v @ v.T
    np.fill_diagonal(sim, -np.inf)
    return float(sim.max(axis=1).mean()), excluded


def similarity_stats(sae: Sae) -> dict[str, float]:
    if sae.M < 2:
        raise InputError("similarity stats need at least two latents")
    enc, enc_ex = _avg_max_cos(sae.we)
    dec, dec_ex = _avg_max_cos(sae.wd.T)
    return {
        "avg_max_encoder_cos": enc,
        "avg_max_decoder_cos": dec,
        "excluded_encoder_rows": enc_ex,
        "excluded_decoder_cols": dec_ex,
    }


# ---------------------------------------------------------------------------
# downstream


def kl_div_score(kl_with_sae: float, kl_with_ablation: float) -> float:
    if kl_with_ablation == 0:
        raise DegenerateBaselineError("ablation leaves the output distribution unchanged (KL = 0)")
    return (kl_with_ablation - kl_with_sae) / kl_with_ablation


def ce_loss_score(ce_with_sae: float, ce_without_sae: float, ce_with_ablation: float) -> float:
    if ce_with_ablation == ce_without_sae:
        raise DegenerateBaselineError("ablation does not change cross-entropy")
    return (ce_with_ablation - ce_with_sae) / (ce_with_ablation - ce_without_sae)


def mean_kl(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Mean over positions of KL(P || Q) in nats."""
    lp = nk.log_softmax_np(np.asarray(p_logits, dtype=np.float64))
    lq = nk.log_softmax_np(np.asarray(q_logits, dtype=np.float64))
    kl = (np.exp(lp) * (lp - lq)).sum(axis=-1)
    return float(np.maximum(kl, 0.0).mean())


def _next_token_ce(logits: np.ndarray, tokens: np.ndarray) -> float:
    # predictions from positions 1..L-2 (the spliced ones) for targets 2..L-1
    lp = nk.log_softmax_np(np.asarray(logits[:, 1:-1], dtype=np.float64))
    tgt = tokens[:, 2:]
    return float(-np.take_along_axis(lp, tgt[..., None], axis=-1).mean())


def downstream_scores(host: HostModel, sae: Sae, tokens: np.ndarray, site: HookSite) -> dict[str, float]:
    """Plain, SAE-spliced and mean-ablated forwards over ``tokens``.

    Position 0 is left untouched in both interventions (SAEs never see it);
    KL and CE are averaged over the intervened positions.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 3 or len(tokens) == 0:
        raise InputError("downstream scores need a [batch, seq >= 3] token array")
    plain, act = run_with_hook(host, tokens, site)
    if act.shape[-1] != sae.n:
        raise DimensionError(f"SAE input dim {sae.n} != site width {act.shape[-1]}")
    body = act[:, 1:].reshape(-1, sae.n)
    c = np.float32(sae.norm_factor)
    xhat = reconstruct(sae, body * c) / c
    spliced = act.copy()
    spliced[:, 1:] = xhat.reshape(act[:, 1:].shape)
    with_sae, _ = run_with_hook(host, tokens, site, Substitute(spliced))
    ablated = act.copy()
    ablated[:, 1:] = body.mean(axis=0)
    with_abl, _ = run_with_hook(host, tokens, site, Substitute(ablated))

    kl_sae = mean_kl(plain[:, 1:], with_sae[:, 1:])
    kl_abl = mean_kl(plain[:, 1:], with_abl[:, 1:])
    ce_plain = _next_token_ce(plain, tokens)
    ce_sae = _next_token_ce(with_sae, tokens)
    ce_abl = _next_token_ce(with_abl, tokens)
    return {
        "kl_div_score": kl_div_score(kl_sae, kl_abl),
        "kl_with_sae": kl_sae,
        "kl_with_ablation": kl_abl,
        "ce_loss_score": ce_loss_score(ce_sae, ce_plain, ce_abl),
        "ce_with_sae": ce_sae,
        "ce_without_sae": ce_plain,
        "ce_with_ablation": ce_abl,
    }


# ---------------------------------------------------------------------------
# report


@dataclass
class CoreReport:
    kl_div_score: float
    kl_with_sae: float
    kl_with_ablation: float
    ce_loss_score: float
    ce_with_sae: float
    ce_without_sae: float
    ce_with_ablation: float
    explained_variance: float
    explained_variance_legacy: float
    mse: float
    cossim: float
    l2_norm_in: float
    l2_norm_out: float
    l2_ratio: float
    relative_reconstruction_bias: float
    l0: float
    l1: float
    freq_over_1pct: float
    freq_over_10pct: float
    normalized_freq_over_1pct: float
    normalized_freq_over_10pct: float
    avg_max_encoder_cos: float
    avg_max_decoder_cos: float
    frac_alive: float
    variant: str = ""
    site: str = ""
    layer: int = -1
    provenance: str = ""
    n_tokens: int = 0
    bias_definition: str = BIAS_DEFINITION
    ablation: str = ABLATION
    kl_direction: str = KL_DIRECTION

    @classmethod
    def metric_names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.type == "float"]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CoreReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate_sae(
    host: HostModel, sae: Sae, tokens: np.ndarray, site: HookSite, variant: str = ""
) -> CoreReport:
    """Full core metric suite for one SAE at one site."""
    tokens = np.asarray(tokens)
    _, act = run_with_hook(host, tokens, site)
    x = act[:, 1:].reshape(-1, act.shape[-1]) * np.float32(sae.norm_factor)
    h = encode(sae, x)
    xhat = reconstruct(sae, x)
    sim = similarity_stats(sae)
    values = {
        **downstream_scores(host, sae, tokens, site),
        **reconstruction_stats(x, xhat),
        **sparsity_stats(h),
        "avg_max_encoder_cos": sim["avg_max_encoder_cos"],
        "avg_max_decoder_cos": sim["avg_max_decoder_cos"],
    }
    return CoreReport(
        **values,
        variant=variant,
        site=site.site,
        layer=site.layer,
        provenance=sae.provenance,
        n_tokens=int(len(x)),
    )
