"""WANDA and magnitude pruning with per-row balanced masks.

All matrices here are in ``[out, in]`` orientation: a row belongs to one
output unit and column ``j`` multiplies input feature ``j``. The host stores
its projections input-major (``x @ W``), so host weights are transposed on
the way in and out.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datakit import ActivationDataset, CalibrationSet
from .errors import ConfigError, DimensionError, InputError
from .hostmodel import PRUNABLE, HostModel, forward
from .sae import Sae, encode, pruned_tag, reconstruction_loss

METHODS = ("wanda", "magnitude")
SAE_TARGETS = ("W_E", "W_D")
DEFAULT_SWEEP = (0.25, 0.35, 0.50, 0.65, 0.75, 0.85, 0.90, 0.95, 0.99)
SWEEP_HEADER = ("sparsity", "recon_loss", "site", "layer", "method")


@dataclass(frozen=True)
class CalibStats:
    """Per-input-column activation norms ``||X_j||_2`` for one weight."""

    norms: np.ndarray
    n_tokens: int
    source: str = ""

    def __post_init__(self):
        norms = np.asarray(self.norms, dtype=np.float64)
        if norms.ndim != 1 or np.any(norms < 0) or not np.all(np.isfinite(norms)):
            raise InputError("calibration norms must be a finite non-negative vector")
        object.__setattr__(self, "norms", norms)

    @classmethod
    def from_activations(cls, x: np.ndarray, source: str = "") -> "CalibStats":
        x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
        return cls(np.sqrt((x * x).sum(axis=0)), len(x), source)


@dataclass(frozen=True)
class PruneSpec:
    sparsity: float
    method: str = "wanda"
    targets: tuple[str, ...] = PRUNABLE

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ConfigError(f"sparsity {self.sparsity} outside [0, 1]")
        if self.method not in METHODS:
            raise ConfigError(f"unknown pruning method {self.method!r}")
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.targets:
            raise ConfigError("prune spec needs at least one target")


@dataclass
class PruneReport:
    method: str
    sparsity: float
    calibration_hash: str
    ranking: str = "per-row"
    matrices: dict[str, dict] = field(default_factory=dict)

    def record(self, name: str, mask: np.ndarray) -> None:
        self.matrices[name] = {
            "shape": list(mask.shape),
            "achieved_sparsity": float(1.0 - mask.mean()) if mask.size else 0.0,
            "zeros_per_row": int(mask.shape[1] - mask[0].sum()) if mask.size else 0,
            "mask_sha256": mask_checksum(mask),
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def mask_checksum(mask: np.ndarray) -> str:
    bits = np.packbits(np.asarray(mask, dtype=bool), axis=None)
    head = np.asarray(mask.shape, dtype="<u4").tobytes()
    return hashlib.sha256(head + bits.tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# scoring and masking


def wanda_scores(w: np.ndarray, stats: CalibStats) -> np.ndarray:
    """``S_ij = |W_ij| * ||X_j||``, computed in float64 so ranking is exact."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[1] != len(stats.norms):
        raise DimensionError(f"weight {w.shape} does not match {len(stats.norms)} calibration columns")
    return np.abs(w.astype(np.float64)) * stats.norms[None, :]


def magnitude_scores(w: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(w, dtype=np.float64))


def pruned_per_row(sparsity: float, row_len: int) -> int:
    # guard against 0.5 * 10 evaluating to 4.999...
    return min(row_len, int(math.floor(sparsity * row_len + 1e-9)))


def build_row_mask(scores: np.ndarray, sparsity: float) -> np.ndarray:
    """Keep-mask zeroing the ``floor(s * in)`` lowest scores of each row.

    Equal scores are pruned lower column first.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigError(f"sparsity {sparsity} outside [0, 1]")
    scores = np.asarray(scores)
    out_dim, in_dim = scores.shape
    count = pruned_per_row(sparsity, in_dim)
    mask = np.ones((out_dim, in_dim), dtype=bool)
    if count:
        order = np.argsort(scores, axis=1, kind="stable")[:, :count]
        np.put_along_axis(mask, order, False, axis=1)
    return mask


def prune_matrix(w: np.ndarray, sparsity: float, method: str, stats: CalibStats | None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(W * mask, mask)`` for an ``[out, in]`` weight."""
    if method == "wanda":
        if stats is None:
            raise InputError("wanda pruning needs calibration statistics")
        scores = wanda_scores(w, stats)
    elif method == "magnitude":
        scores = magnitude_scores(w)
    else:
        raise ConfigError(f"unknown pruning method {method!r}")
    mask = build_row_mask(scores, sparsity)
    return np.where(mask, w, 0).astype(w.dtype), mask


# ---------------------------------------------------------------------------
# host


def _calibration_hash(calib: CalibrationSet) -> str:
    h = hashlib.sha256(np.ascontiguousarray(calib.sequences, dtype="<i8").tobytes())
    h.update(calib.source_id.encode())
    return h.hexdigest()


def host_calibration(host: HostModel, calib: CalibrationSet, batch_size: int = 16) -> dict[tuple[int, str], CalibStats]:
    """Input-column norms for every prunable projection, from one pass over ``calib``."""
    if calib.count == 0:
        raise InputError("empty calibration set")
    sums: dict[tuple[int, str], np.ndarray] = {}

    def tap(layer: int, name: str, x: np.ndarray) -> None:
        flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
        acc = sums.setdefault((layer, name), np.zeros(flat.shape[1]))
        acc += (flat * flat).sum(axis=0)

    for lo in range(0, calib.count, batch_size):
        forward(host, calib.sequences[lo : lo + batch_size], tap=tap)
    n_tokens = int(calib.sequences.size)
    src = _calibration_hash(calib)
    return {key: CalibStats(np.sqrt(v), n_tokens, src) for key, v in sums.items()}


def prune_host(
    host: HostModel,
    spec: PruneSpec,
    calib: CalibrationSet | None = None,
) -> tuple[HostModel, PruneReport]:
    """Prune the six projections of every layer; everything else is copied untouched."""
    bad = set(spec.targets) - set(PRUNABLE)
    if bad:
        raise ConfigError(f"not a host pruning target: {sorted(bad)}")
    if spec.method == "wanda":
        if calib is None:
            raise InputError("wanda pruning needs a calibration set")
        stats = host_calibration(host, calib)
        calib_hash = _calibration_hash(calib)
    else:
        stats, calib_hash = {}, ""
    out = host.copy()
    report = PruneReport(spec.method, spec.sparsity, calib_hash)
    for layer in range(host.config.n_layers):
        for name in spec.targets:
            key = f"blocks.{layer}.{name}"
            w = out.params[key].data.T  # [out, in]
            pruned, mask = prune_matrix(w, spec.sparsity, spec.method, stats.get((layer, name)))
            out.params[key].data = np.ascontiguousarray(pruned.T)
            report.record(key, mask)
    return out, report


# ---------------------------------------------------------------------------
# SAE


def _rows(dataset: ActivationDataset | np.ndarray) -> np.ndarray:
    if isinstance(dataset, ActivationDataset):
        return dataset.matrix
    return np.asarray(dataset, dtype=np.float32)


def sae_calibration(sae: Sae, dataset: ActivationDataset | np.ndarray, batch: int = 8192) -> dict[str, CalibStats]:
    x = _rows(dataset)
    if x.ndim != 2 or x.shape[1] != sae.n:
        raise DimensionError(f"dataset dim {x.shape[-1]} != SAE input dim {sae.n}")
    if len(x) == 0:
        raise InputError("empty calibration dataset")
    xs = np.zeros(sae.n)
    hs = np.zeros(sae.M)
    for lo in range(0, len(x), batch):
        chunk = x[lo : lo + batch].astype(np.float64)
        xs += (chunk * chunk).sum(axis=0)
        h = encode(sae, x[lo : lo + batch]).astype(np.float64)
        hs += (h * h).sum(axis=0)
    digest = hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest()
    return {"W_E": CalibStats(np.sqrt(xs), len(x), digest), "W_D": CalibStats(np.sqrt(hs), len(x), digest)}


def prune_sae(
    sae: Sae,
    spec: PruneSpec,
    dataset: ActivationDataset | np.ndarray,
    stats: dict[str, CalibStats] | None = None,
) -> tuple[Sae, PruneReport]:
    """W_E is scored against x norms, W_D against latent norms; biases and theta are kept."""
    bad = set(spec.targets) - set(SAE_TARGETS)
    if bad:
        raise ConfigError(f"not an SAE pruning target: {sorted(bad)}")
    if stats is None:
        stats = sae_calibration(sae, dataset)
    out = sae.copy()
    report = PruneReport(spec.method, spec.sparsity, stats["W_E"].source)
    fields = {"W_E": "we", "W_D": "wd"}
    for name in spec.targets:
        pruned, mask = prune_matrix(getattr(out, fields[name]), spec.sparsity, spec.method, stats[name])
        setattr(out, fields[name], pruned)
        report.record(name, mask)
    out.provenance = pruned_tag(spec.sparsity)
    return out, report


@dataclass(frozen=True)
class SweepRow:
    sparsity: float
    recon_loss: float
    site: str
    layer: int
    method: str


def sparsity_sweep(
    sae: Sae,
    dataset: ActivationDataset,
    levels: Sequence[float] = DEFAULT_SWEEP,
    method: str = "wanda",
    heldout_fraction: float = 0.1,
    eval_x: np.ndarray | None = None,
) -> list[SweepRow]:
    """Held-out reconstruction loss of a freshly pruned copy at each level.

    Calibration uses the training rows; the last ``heldout_fraction`` rows are
    only ever evaluated. ``eval_x`` (already in the SAE's input space) replaces
    those held-out rows, e.g. activations of a different host.
    """
    levels = [float(s) for s in levels]
    if any(b < a for a, b in zip(levels, levels[1:])) or any(not 0 <= s <= 1 for s in levels):
        raise ConfigError("sweep levels must be ascending within [0, 1]")
    train, held = dataset.split(heldout_fraction)
    held_x = held.matrix if eval_x is None else np.asarray(eval_x, dtype=np.float32)
    stats = sae_calibration(sae, train)
    site = str(dataset.meta.get("site", ""))
    layer = int(dataset.meta.get("layer", -1))
    rows = []
    for s in levels:
        pruned, _ = prune_sae(sae, PruneSpec(s, method, SAE_TARGETS), train, stats)
        rows.append(SweepRow(s, reconstruction_loss(pruned, held_x), site, layer, method))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow([f"{r.sparsity:g}", repr(float(r.recon_loss)), r.site, r.layer, r.method])
    return buf.getvalue()


def read_sweep_csv(text: str) -> list[SweepRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != SWEEP_HEADER:
        raise InputError(f"unexpected sweep header {reader.fieldnames}")
    return [
        SweepRow(float(r["sparsity"]), float(r["recon_loss"]), r["site"], int(r["layer"]), r["method"]) for r in reader
    ]
