"""Sparse autoencoder: encoder/decoder weights, loss, and an Adam trainer.

Shapes follow the usual math convention: ``W_E`` is ``[M, n]`` and ``W_D`` is
``[n, M]`` so a batch of row vectors is encoded as ``x @ W_E.T + b_E``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numkit as nk
from .datakit import ActivationDataset
from .errors import ConfigError, DimensionError, FormatError, InputError, NumericError, TrainingError

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "topk", "jumprelu")


@dataclass(frozen=True)
class SaeConfig:
    n: int
    M: int | None = None
    activation: str = "relu"
    k: int | None = None
    l1_coeff: float = 1e-3
    lr: float = 3e-4
    batch_size: int = 256
    epochs: int = 2
    seed: int = 0
    normalize_decoder: bool | None = None
    bandwidth: float = 1e-3
    theta_init: float = 1e-3
    decay_frac: float = 0.2

    def __post_init__(self):
        if self.M is None:
            object.__setattr__(self, "M", 8 * self.n)
        if self.normalize_decoder is None:
            object.__setattr__(self, "normalize_decoder", self.activation != "topk")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.n < 1 or self.M <= self.n:
            raise ConfigError(f"latent dim M={self.M} must exceed input dim n={self.n}")
        if self.l1_coeff < 0:
            raise ConfigError("l1_coeff must be non-negative")
        if self.activation == "topk" and (self.k is None or not 1 <= self.k <= self.M):
            raise ConfigError("topk activation needs 1 <= k <= M")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")

    def kind(self) -> nk.ActivationKind:
        if self.activation == "relu":
            return nk.Relu()
        if self.activation == "topk":
            return nk.TopK(self.k)
        return nk.JumpRelu(self.bandwidth)


PRETRAINED = "pretrained"
TRAINED_ON_PRUNED = "trained_on_pruned"


def pruned_tag(sparsity: float) -> str:
    return f"pruned_pretrained({sparsity:g})"


@dataclass
class Sae:
    config: SaeConfig
    we: np.ndarray
    be: np.ndarray
    wd: np.ndarray
    bd: np.ndarray
    theta: np.ndarray | None = None
    norm_factor: float = 1.0
    provenance: str = PRETRAINED
    extra: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: SaeConfig, norm_factor: float = 1.0) -> "Sae":
        rng = np.random.default_rng(config.seed)
        wd = rng.normal(size=(config.n, config.M))
        wd /= np.linalg.norm(wd, axis=0, keepdims=True)
        wd = wd.astype(np.float32)
        theta = None
        if config.activation == "jumprelu":
            theta = np.full(config.M, config.theta_init, dtype=np.float32)
        return cls(
            config,
            we=wd.T.copy(),
            be=np.zeros(config.M, dtype=np.float32),
            wd=wd,
            bd=np.zeros(config.n, dtype=np.float32),
            theta=theta,
            norm_factor=norm_factor,
        )

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def M(self) -> int:
        return self.config.M

    def copy(self, **changes) -> "Sae":
        out = replace(
            self,
            we=self.we.copy(),
            be=self.be.copy(),
            wd=self.wd.copy(),
            bd=self.bd.copy(),
            theta=None if self.theta is None else self.theta.copy(),
            extra=dict(self.extra),
        )
        for k, v in changes.items():
            setattr(out, k, v)
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"we": self.we, "be": self.be, "wd": self.wd, "bd": self.bd}
        if self.theta is not None:
            out["theta"] = self.theta
        return out

    def to_bytes(self) -> bytes:
        meta = {
            "kind": "sae",
            "config": asdict(self.config),
            "provenance": self.provenance,
            "norm_factor": self.norm_factor,
            "extra": self.extra,
        }
        return checkpoint.dumps(meta, self.tensors())

    def digest(self) -> str:
        return checkpoint.digest(self.to_bytes())

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Sae":
        meta, t = checkpoint.loads(raw)
        if meta.get("kind") != "sae":
            raise FormatError("checkpoint does not hold an SAE")
        config = SaeConfig(**meta["config"])
        expected = {"we", "be", "wd", "bd"} | ({"theta"} if config.activation == "jumprelu" else set())
        checkpoint.check_names(t, expected)
        return cls(
            config,
            t["we"],
            t["be"],
            t["wd"],
            t["bd"],
            t.get("theta"),
            float(meta["norm_factor"]),
            meta["provenance"],
            meta.get("extra", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Sae":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# forward maths


def _check_dim(arr: np.ndarray, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionError(f"{what} must be [batch, {dim}], got {arr.shape}")
    return arr


def _encode_t(sae_params: dict[str, nk.Tensor], x: nk.Tensor, kind: nk.ActivationKind) -> nk.Tensor:
    pre = x @ sae_params["we"].T + sae_params["be"]
    return nk.activation(pre, kind, sae_params.get("theta"))


def _decode_t(sae_params: dict[str, nk.Tensor], h: nk.Tensor) -> nk.Tensor:
    return h @ sae_params["wd"].T + sae_params["bd"]


def _as_tensors(sae: Sae) -> dict[str, nk.Tensor]:
    return {k: nk.Tensor(v) for k, v in sae.tensors().items()}


def pre_activations(sae: Sae, x: np.ndarray) -> np.ndarray:
    x = _check_dim(x, sae.n, "x")
    return x @ sae.we.T + sae.be


def encode(sae: Sae, x: np.ndarray) -> np.ndarray:
    x = _check_dim(x, sae.n, "x")
    return _encode_t(_as_tensors(sae), nk.Tensor(x), sae.config.kind()).data


def decode(sae: Sae, h: np.ndarray) -> np.ndarray:
    h = _check_dim(h, sae.M, "h")
    return _decode_t(_as_tensors(sae), nk.Tensor(h)).data


def reconstruct(sae: Sae, x: np.ndarray) -> np.ndarray:
    return decode(sae, encode(sae, x))


def reconstruct_raw(sae: Sae, raw: np.ndarray) -> np.ndarray:
    """Reconstruct un-normalised activations using the SAE's stored scale."""
    c = np.float32(sae.norm_factor)
    return (reconstruct(sae, np.asarray(raw, dtype=np.float32) * c) / c).astype(np.float32)


def _loss_t(params: dict[str, nk.Tensor], x: nk.Tensor, config: SaeConfig):
    h = _encode_t(params, x, config.kind())
    xhat = _decode_t(params, h)
    mse = nk.square(x - xhat).sum(axis=-1).mean()
    l1 = nk.tabs(h).sum(axis=-1).mean() * config.l1_coeff
    return mse + l1, mse, l1, h


def sae_loss(sae: Sae, x: np.ndarray) -> tuple[float, float, float]:
    """(total, reconstruction term, sparsity term) averaged over the batch."""
    x = _check_dim(x, sae.n, "x")
    if len(x) == 0:
        raise InputError("sae_loss needs a non-empty batch")
    total, mse, l1, _ = _loss_t(_as_tensors(sae), nk.Tensor(x), sae.config)
    return total.item(), mse.item(), l1.item()


def reconstruction_loss(sae: Sae, x: np.ndarray, batch: int = 4096) -> float:
    """Mean squared reconstruction error per row (the loss's first term)."""
    x = _check_dim(x, sae.n, "x")
    total = 0.0
    for lo in range(0, len(x), batch):
        chunk = x[lo : lo + batch]
        err = chunk - reconstruct(sae, chunk)
        total += float((err.astype(np.float64) ** 2).sum())
    return total / len(x)


def mean_l0(sae: Sae, x: np.ndarray, batch: int = 4096) -> float:
    x = _check_dim(x, sae.n, "x")
    count = 0
    for lo in range(0, len(x), batch):
        count += int((encode(sae, x[lo : lo + batch]) != 0).sum())
    return count / len(x)


def normalize_decoder_(sae_wd: np.ndarray) -> None:
    norms = np.linalg.norm(sae_wd, axis=0, keepdims=True)
    sae_wd /= np.maximum(norms, 1e-12)


# ---------------------------------------------------------------------------
# training


@dataclass
class SaeTrainResult:
    sae: Sae
    losses: list[float]
    heldout_mse: float
    heldout_l0: float


def train_sae(
    config: SaeConfig,
    dataset: ActivationDataset | np.ndarray,
    heldout_fraction: float = 0.1,
    provenance: str = PRETRAINED,
) -> SaeTrainResult:
    """Minimise reconstruction + L1 with Adam; deterministic per ``config.seed``."""
    if isinstance(dataset, ActivationDataset):
        matrix, c = dataset.matrix, dataset.norm_factor
    else:
        matrix, c = np.asarray(dataset, dtype=np.float32), 1.0
    if matrix.ndim != 2 or matrix.shape[1] != config.n:
        raise DimensionError(f"dataset dim {matrix.shape[-1]} != SAE input dim {config.n}")
    cut = len(matrix) - max(1, int(round(len(matrix) * heldout_fraction)))
    train, held = matrix[:cut], matrix[cut:]
    if len(train) < 1:
        raise InputError("not enough rows to train on")
    sae = Sae.init(config, norm_factor=c)
    sae.provenance = provenance
    sae.extra = {"optimizer": "adam", "lr": config.lr, "beta1": 0.9, "beta2": 0.999, "decay_frac": config.decay_frac, "rows": int(len(train))}
    params = {k: nk.Tensor(v, requires_grad=True) for k, v in sae.tensors().items()}
    # tensors share buffers with the Sae arrays, so optimiser updates land in place
    for k, t in params.items():
        setattr(sae, k, t.data)
    opt = nk.Adam(list(params.values()), lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    losses: list[float] = []
    steps_per_epoch = -(-len(train) // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    decay_start = int(total_steps * (1.0 - config.decay_frac))
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        for lo in range(0, len(order), config.batch_size):
            if step >= decay_start:
                # linear decay to zero over the final stretch
                opt.lr = config.lr * (total_steps - step) / max(1, total_steps - decay_start)
            x = nk.Tensor(train[order[lo : lo + config.batch_size]])
            opt.zero_grad()
            try:
                with nk.Tape(seed=config.seed) as tape:
                    total, _, _, _ = _loss_t(params, x, config)
                tape.backward(total)
                opt.step()
            except NumericError as exc:
                raise TrainingError(f"SAE training diverged: {exc}", step) from exc
            if config.normalize_decoder:
                normalize_decoder_(params["wd"].data)
            if sae.theta is not None:
                np.maximum(params["theta"].data, 0.0, out=params["theta"].data)
            losses.append(total.item())
            step += 1
    for t in params.values():
        t.requires_grad = False
        t.grad = None
    return SaeTrainResult(sae, losses, reconstruction_loss(sae, held), mean_l0(sae, held))


def identity_sae(n: int, norm_factor: float = 1.0) -> Sae:
    """ReLU SAE with ``W_E = [I; -I]`` and ``W_D = [I, -I]``: reconstructs any x exactly."""
    eye = np.eye(n, dtype=np.float32)
    config = SaeConfig(n=n, M=2 * n, l1_coeff=0.0)
    wd = np.hstack([eye, -eye])
    return Sae(
        config,
        we=np.ascontiguousarray(wd.T),
        be=np.zeros(2 * n, dtype=np.float32),
        wd=wd,
        bd=np.zeros(n, dtype=np.float32),
        norm_factor=norm_factor,
        provenance="identity",
    )
