"""Tiny GPT-2-style decoder with hookable activation sites.

Weights are stored input-major (``x @ W``), so ``W_Q`` is ``[d_model, d_model]``
and ``W_in`` is ``[d_model, d_mlp]``.  Attention projections carry no biases
and the MLP has none either; only the layer norms have affine parameters.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import numkit as nk
from .errors import ConfigError, DimensionError, FormatError, InputError, NumericError, TrainingError

log = logging.getLogger(__name__)

SITES = ("attn_out", "mlp_out", "resid_post")
PRUNABLE = ("W_Q", "W_K", "W_V", "W_O", "W_in", "W_out")

# 95 printable ASCII characters plus newline
VOCAB = [chr(c) for c in range(32, 127)] + ["\n"]
_CHAR_TO_ID = {ch: i for i, ch in enumerate(VOCAB)}


def encode_text(text: str) -> np.ndarray:
    try:
        return np.array([_CHAR_TO_ID[ch] for ch in text], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"character {exc.args[0]!r} is outside the host vocabulary") from None


def decode_ids(ids) -> str:
    return "".join(VOCAB[int(i)] for i in ids)


@dataclass(frozen=True)
class HostConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_mlp: int = 256
    vocab_size: int = len(VOCAB)
    ctx_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "seed" and value <= 0:
                raise ConfigError(f"HostConfig.{name} must be positive, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class HookSite:
    layer: int
    site: str

    def __post_init__(self):
        if self.site not in SITES:
            raise ConfigError(f"unknown hook site {self.site!r}; expected one of {SITES}")
        if self.layer < 0:
            raise ConfigError("layer index must be non-negative")

    def __str__(self) -> str:
        return f"blocks.{self.layer}.{self.site}"


def _param_names(cfg: HostConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        names += [p + "ln1.g", p + "ln1.b", p + "W_Q", p + "W_K", p + "W_V", p + "W_O"]
        names += [p + "ln2.g", p + "ln2.b", p + "W_in", p + "W_out"]
    names += ["ln_f.g", "ln_f.b", "unembed"]
    return names


@dataclass
class HostModel:
    config: HostConfig
    params: dict[str, nk.Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: HostConfig, zero: bool = False) -> "HostModel":
        rng = np.random.default_rng(config.seed)
        d, m, v = config.d_model, config.d_mlp, config.vocab_size
        resid_std = 0.02 / np.sqrt(2 * config.n_layers)

        def normal(shape, std=0.02):
            return np.zeros(shape) if zero else rng.normal(0.0, std, size=shape)

        params = {"tok_emb": normal((v, d)), "pos_emb": normal((config.ctx_len, d), 0.01)}
        for i in range(config.n_layers):
            p = f"blocks.{i}."
            params[p + "ln1.g"] = np.zeros(d) if zero else np.ones(d)
            params[p + "ln1.b"] = np.zeros(d)
            for name in ("W_Q", "W_K", "W_V"):
                params[p + name] = normal((d, d))
            params[p + "W_O"] = normal((d, d), resid_std)
            params[p + "ln2.g"] = np.zeros(d) if zero else np.ones(d)
            params[p + "ln2.b"] = np.zeros(d)
            params[p + "W_in"] = normal((d, m))
            params[p + "W_out"] = normal((m, d), resid_std)
        params["ln_f.g"] = np.zeros(d) if zero else np.ones(d)
        params["ln_f.b"] = np.zeros(d)
        params["unembed"] = normal((d, v))
        return cls(config, {k: nk.Tensor(params[k]) for k in _param_names(config)})

    def copy(self) -> "HostModel":
        return HostModel(self.config, {k: nk.Tensor(t.data.copy()) for k, t in self.params.items()})

    def weight(self, layer: int, name: str) -> nk.Tensor:
        return self.params[f"blocks.{layer}.{name}"]

    def to_bytes(self) -> bytes:
        meta = {"kind": "host", "config": asdict(self.config)}
        return checkpoint.dumps(meta, {k: t.data for k, t in self.params.items()})

    def digest(self) -> str:
        return checkpoint.digest(self.to_bytes())

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "HostModel":
        meta, tensors = checkpoint.loads(raw)
        if meta.get("kind") != "host":
            raise FormatError("checkpoint does not hold a host model")
        try:
            config = HostConfig(**meta["config"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad host config block: {exc}") from exc
        checkpoint.check_names(tensors, set(_param_names(config)))
        return cls(config, {k: nk.Tensor(tensors[k]) for k in _param_names(config)})

    @classmethod
    def load(cls, path: str | Path) -> "HostModel":
        return cls.from_bytes(Path(path).read_bytes())


def checkpoint_roundtrip(model: HostModel, path: str | Path) -> HostModel:
    model.save(path)
    return HostModel.load(path)


Hook = Callable[[HookSite, nk.Tensor], nk.Tensor]


def _check_tokens(model: HostModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise InputError("tokens must be a [batch, seq] array")
    if tokens.shape[1] > model.config.ctx_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds ctx_len {model.config.ctx_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise InputError("token id outside vocabulary")
    return tokens


Tap = Callable[[int, str, np.ndarray], None]


def _attention(model: HostModel, layer: int, x: nk.Tensor, tap: Tap | None = None) -> nk.Tensor:
    cfg = model.config
    if tap is not None:
        for name in ("W_Q", "W_K", "W_V"):
            tap(layer, name, x.data)
    q = x @ model.weight(layer, "W_Q")
    k = x @ model.weight(layer, "W_K")
    v = x @ model.weight(layer, "W_V")
    scale = 1.0 / np.sqrt(cfg.d_head)
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * cfg.d_head, (h + 1) * cfg.d_head
        qh, kh, vh = nk.take_cols(q, lo, hi), nk.take_cols(k, lo, hi), nk.take_cols(v, lo, hi)
        att = nk.softmax((qh @ kh.T) * scale, causal=True)
        heads.append(att @ vh)
    z = heads[0] if len(heads) == 1 else nk.concat(heads)
    if tap is not None:
        tap(layer, "W_O", z.data)
    return z @ model.weight(layer, "W_O")


def mlp(model: HostModel, layer: int, resid_mid: nk.Tensor, tap: Tap | None = None) -> nk.Tensor:
    p = f"blocks.{layer}."
    x = nk.layer_norm(resid_mid, model.params[p + "ln2.g"], model.params[p + "ln2.b"])
    if tap is not None:
        tap(layer, "W_in", x.data)
    hidden = nk.gelu(x @ model.params[p + "W_in"])
    if tap is not None:
        tap(layer, "W_out", hidden.data)
    return hidden @ model.params[p + "W_out"]


def embed(model: HostModel, tokens: np.ndarray) -> nk.Tensor:
    pos = model.params["pos_emb"]
    return nk.embedding(model.params["tok_emb"], tokens) + nk.take_rows(pos, tokens.shape[1])


def forward(
    model: HostModel,
    tokens,
    hook: Hook | None = None,
    stop_at: HookSite | None = None,
    tap: Tap | None = None,
) -> nk.Tensor:
    """Logits ``[batch, seq, vocab]``; ``hook`` may replace any site activation.

    With ``stop_at`` the pass ends right after that site and returns its
    (possibly hooked) activation instead of logits. ``tap(layer, name, x)``
    sees the input of every prunable projection, read-only.
    """
    tokens = _check_tokens(model, tokens)
    resid = embed(model, tokens)
    for i in range(model.config.n_layers):
        p = f"blocks.{i}."
        x = nk.layer_norm(resid, model.params[p + "ln1.g"], model.params[p + "ln1.b"])
        attn_out = _attention(model, i, x, tap)
        site = HookSite(i, "attn_out")
        if hook is not None:
            attn_out = hook(site, attn_out)
        if stop_at == site:
            return attn_out
        resid_mid = resid + attn_out
        mlp_out = mlp(model, i, resid_mid, tap)
        site = HookSite(i, "mlp_out")
        if hook is not None:
            mlp_out = hook(site, mlp_out)
        if stop_at == site:
            return mlp_out
        resid = resid_mid + mlp_out
        site = HookSite(i, "resid_post")
        if hook is not None:
            resid = hook(site, resid)
        if stop_at == site:
            return resid
    x = nk.layer_norm(resid, model.params["ln_f.g"], model.params["ln_f.b"])
    return x @ model.params["unembed"]


def forward_logits(model: HostModel, tokens) -> np.ndarray:
    return forward(model, tokens).data


@dataclass(frozen=True)
class Capture:
    pass


@dataclass(frozen=True)
class Substitute:
    replacement: np.ndarray


@dataclass(frozen=True)
class MeanAblate:
    mean: np.ndarray


HookMode = Capture | Substitute | MeanAblate


def _validate_site(model: HostModel, site: HookSite) -> None:
    if site.layer >= model.config.n_layers:
        raise ConfigError(f"{site} is out of range for a {model.config.n_layers}-layer host")


def run_with_hook(model: HostModel, tokens, site: HookSite, mode: HookMode = Capture()):
    """Run a forward pass with one site captured or overwritten.

    Returns ``(logits, activation)`` where activation is the site value the
    clean model produced (``None`` unless ``mode`` is :class:`Capture`).
    """
    _validate_site(model, site)
    captured: list[np.ndarray] = []

    def hook(where: HookSite, act: nk.Tensor) -> nk.Tensor:
        if where != site:
            return act
        if isinstance(mode, Capture):
            captured.append(act.data.copy())
            return act
        if isinstance(mode, Substitute):
            rep = np.asarray(mode.replacement)
            if rep.shape != act.shape:
                raise DimensionError(f"replacement shape {rep.shape} != site shape {act.shape}")
            return nk.Tensor(rep)
        mu = np.asarray(mode.mean)
        if mu.shape != (act.shape[-1],):
            raise DimensionError(f"mean vector shape {mu.shape} != ({act.shape[-1]},)")
        return nk.Tensor(np.broadcast_to(mu, act.shape).copy())

    logits = forward(model, tokens, hook).data
    return logits, (captured[0] if captured else None)


def capture(model: HostModel, tokens, site: HookSite) -> np.ndarray:
    """Site activation only; stops the forward pass early."""
    _validate_site(model, site)
    return forward(model, _check_tokens(model, tokens), stop_at=site).data


# ---------------------------------------------------------------------------
# training


@dataclass
class HostTrainResult:
    model: HostModel
    losses: list[float]
    heldout_loss: float


def heldout_loss(model: HostModel, tokens: np.ndarray, seq_len: int, max_windows: int = 64) -> float:
    """Mean next-token cross-entropy over consecutive windows of a token stream."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = (len(tokens) - 1) // seq_len
    if n < 1:
        raise InputError("held-out stream shorter than one window")
    n = min(n, max_windows)
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    windows = tokens[idx]
    losses = []
    for chunk in np.array_split(windows, max(1, n // 16)):
        logits = forward(model, chunk[:, :-1])
        losses.append(nk.cross_entropy(logits, chunk[:, 1:]).item() * len(chunk))
    return float(sum(losses) / n)


def train_host(
    config: HostConfig,
    corpus: np.ndarray,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 16,
    seq_len: int | None = None,
    heldout_fraction: float = 0.1,
    warmup: int = 50,
) -> HostTrainResult:
    """Next-token training on a 1-D token stream, deterministic given ``config.seed``."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size and (corpus.min() < 0 or corpus.max() >= config.vocab_size):
        raise InputError("corpus contains ids outside the vocabulary")
    seq_len = seq_len or config.ctx_len
    split = int(len(corpus) * (1 - heldout_fraction))
    train, held = corpus[:split], corpus[split:]
    if len(train) < seq_len + 2:
        raise InputError("corpus too short for the requested sequence length")
    model = HostModel.init(config)
    rng = np.random.default_rng(config.seed + 1)
    params = [model.params[k] for k in _param_names(config)]
    for p in params:
        p.requires_grad = True
    opt = nk.Adam(params, lr=lr, beta2=0.99)
    losses: list[float] = []
    for step in range(steps):
        opt.lr = lr * min(1.0, (step + 1) / warmup)
        starts = rng.integers(0, len(train) - seq_len - 1, size=batch_size)
        batch = train[starts[:, None] + np.arange(seq_len + 1)[None, :]]
        opt.zero_grad()
        try:
            with nk.Tape(seed=config.seed) as tape:
                loss = nk.cross_entropy(forward(model, batch[:, :-1]), batch[:, 1:])
            tape.backward(loss)
            opt.step()
        except NumericError as exc:
            raise TrainingError(f"host training diverged: {exc}", step) from exc
        losses.append(loss.item())
        if step % 100 == 0:
            log.info("host step %d loss %.4f", step, losses[-1])
    for p in params:
        p.requires_grad = False
        p.grad = None
    held_loss = heldout_loss(model, held, seq_len) if len(held) > seq_len + 1 else float("nan")
    return HostTrainResult(model, losses, held_loss)
