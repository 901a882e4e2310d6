"""Corpora, activation harvesting, calibration sampling and the SPAD dataset file.

SPAD layout: ``b"SPAD" | u32 version | u32 meta_len | meta JSON |
float32[N, n] | int32[N, L] labels (optional) | u32 CRC32`` with everything
little-endian and the CRC covering all preceding bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .hostmodel import SITES, HookSite, HostModel, capture, encode_text

WORDS = """
the of and to in is was that for on with as by at from his her they be this have
not are but had which one were all we when there can an their so if would more
what up about out them into time some could then other these two may first like
new now its people only over after any also many our well very just most where
through back much before good long great little world still life year work down
made state water even day place small man under high city light house between
night part old word school never point last same land number river sound open
story answer cold stone garden window morning yellow green simple quiet table
paper music winter summer bridge market letter forest mountain island signal
""".split()

# characters the filler text never uses; marker tokens are drawn from here
MARKER_POOL = "0123456789#$%&*+<=>@[]^_{|}~"


def synthetic_text(n_chars: int, seed: int) -> str:
    """Deterministic pseudo-English filler made of short sentences."""
    rng = np.random.default_rng(seed)
    out: list[str] = []
    total = 0
    while total < n_chars:
        n_words = int(rng.integers(4, 13))
        words = [WORDS[i] for i in rng.integers(0, len(WORDS), size=n_words)]
        words[0] = words[0].capitalize()
        if n_words > 6 and rng.random() < 0.3:
            cut = int(rng.integers(2, n_words - 2))
            words[cut] += ","
        sentence = " ".join(words) + ("." if rng.random() < 0.85 else "?")
        sentence += "\n" if rng.random() < 0.1 else " "
        out.append(sentence)
        total += len(sentence)
    return "".join(out)[:n_chars]


# ---------------------------------------------------------------------------
# labelled corpora


@dataclass(frozen=True)
class CorpusSpec:
    """Labels are named class counts; ``rho`` correlates the second label with the first."""

    labels: dict[str, int]
    rho: float = 0.0
    length: int = 20_000
    marker_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.labels:
            raise ConfigError("at least one label is required")
        if any(c < 2 for c in self.labels.values()):
            raise ConfigError("every label needs at least two classes")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if not 0.0 < self.marker_rate < 0.5:
            raise ConfigError("marker_rate must lie in (0, 0.5)")


@dataclass
class LabeledCorpus:
    tokens: np.ndarray
    labels: dict[str, np.ndarray]
    rho: float
    markers: dict[tuple[int, ...], str]

    @property
    def label_names(self) -> list[str]:
        return list(self.labels)

    def corpus_id(self) -> str:
        h = hashlib.sha256(self.tokens.astype("<i8").tobytes())
        for name, arr in self.labels.items():
            h.update(name.encode())
            h.update(arr.astype("<i4").tobytes())
        return h.hexdigest()[:16]


def _draw_labels(spec: CorpusSpec, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    names = list(spec.labels)
    out: dict[str, np.ndarray] = {}
    first = rng.integers(0, spec.labels[names[0]], size=n)
    out[names[0]] = first
    for name in names[1:]:
        k = spec.labels[name]
        independent = rng.integers(0, k, size=n)
        if name == names[1]:
            # copy with probability rho, otherwise independent: corr(A, B) = rho
            copy = rng.random(n) < spec.rho
            out[name] = np.where(copy, first % k, independent)
        else:
            out[name] = independent
    return out


def generate_labeled_corpus(spec: CorpusSpec) -> LabeledCorpus:
    combos = int(np.prod(list(spec.labels.values())))
    if combos > len(MARKER_POOL):
        raise ConfigError(
            f"{combos} label combinations need distinct marker tokens, only {len(MARKER_POOL)} available"
        )
    rng = np.random.default_rng(spec.seed)
    shape = tuple(spec.labels.values())
    markers = {idx: MARKER_POOL[i] for i, idx in enumerate(np.ndindex(*shape))}
    text = list(synthetic_text(spec.length, spec.seed))
    spaces = np.array([i for i, ch in enumerate(text) if ch == " " and 0 < i < len(text) - 1])
    n_marks = min(len(spaces), int(round(spec.marker_rate * spec.length)))
    chosen = np.sort(rng.choice(spaces, size=n_marks, replace=False))
    drawn = _draw_labels(spec, n_marks, rng)
    names = list(spec.labels)
    labels = {name: np.full(len(text), -1, dtype=np.int32) for name in names}
    for j, pos in enumerate(chosen):
        combo = tuple(int(drawn[name][j]) for name in names)
        text[pos] = markers[combo]
        for name in names:
            labels[name][pos] = combo[names.index(name)]
    return LabeledCorpus(encode_text("".join(text)), labels, spec.rho, markers)


def label_correlation(a: np.ndarray, b: np.ndarray) -> float:
    keep = (a >= 0) & (b >= 0)
    return float(np.corrcoef(a[keep], b[keep])[0, 1])


# ---------------------------------------------------------------------------
# activation datasets


@dataclass
class ActivationDataset:
    matrix: np.ndarray
    meta: dict
    labels: np.ndarray | None = None  # [N, L] int32, -1 = unlabelled
    label_names: list[str] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def norm_factor(self) -> float:
        return float(self.meta["norm_factor"])

    def label(self, name: str) -> np.ndarray:
        if self.labels is None or name not in self.label_names:
            raise InputError(f"dataset has no label {name!r}")
        return self.labels[:, self.label_names.index(name)]

    def raw(self) -> np.ndarray:
        """Activations with the normalisation undone."""
        return self.matrix / np.float32(self.norm_factor)

    def subset(self, rows: np.ndarray | slice) -> "ActivationDataset":
        labels = None if self.labels is None else self.labels[rows]
        return ActivationDataset(self.matrix[rows], dict(self.meta), labels, list(self.label_names))

    def split(self, heldout_fraction: float = 0.1) -> tuple["ActivationDataset", "ActivationDataset"]:
        """(train, held-out) with the held-out rows taken from the end."""
        cut = self.n_rows - max(1, int(round(self.n_rows * heldout_fraction)))
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))


def kept_positions(seq_len: int) -> np.ndarray:
    """Positions harvested from every window: all but position 0."""
    return np.arange(1, seq_len)


def harvest_activations(
    host: HostModel,
    corpus: LabeledCorpus | np.ndarray,
    site: str,
    layer: int,
    n_tokens: int,
    normalize: bool = True,
    seed: int = 0,
    batch_size: int = 16,
) -> ActivationDataset:
    if site not in SITES:
        raise ConfigError(f"unknown site {site!r}")
    if not 0 <= layer < host.config.n_layers:
        raise ConfigError(f"layer {layer} invalid for a {host.config.n_layers}-layer host")
    hook = HookSite(layer, site)
    tokens = corpus.tokens if isinstance(corpus, LabeledCorpus) else np.asarray(corpus, dtype=np.int64)
    seq = host.config.ctx_len
    per_window = seq - 1
    n_windows_total = len(tokens) // seq
    needed = -(-n_tokens // per_window)
    if n_tokens < 1 or needed > n_windows_total:
        raise InputError(
            f"requested {n_tokens} tokens but the corpus provides {n_windows_total * per_window}"
        )
    rng = np.random.default_rng(seed)
    starts = np.sort(rng.choice(n_windows_total, size=needed, replace=False)) * seq
    windows = tokens[starts[:, None] + np.arange(seq)[None, :]]
    rows = []
    for lo in range(0, needed, batch_size):
        act = capture(host, windows[lo : lo + batch_size], hook)
        rows.append(act[:, 1:, :].reshape(-1, act.shape[-1]))
    matrix = np.concatenate(rows)[:n_tokens].astype(np.float32)
    norm_factor = 1.0
    if normalize:
        norm_factor = float(np.sqrt(matrix.shape[1]) / np.linalg.norm(matrix, axis=1).mean())
        matrix = (matrix * np.float32(norm_factor)).astype(np.float32)
    labels, names = None, []
    if isinstance(corpus, LabeledCorpus):
        names = corpus.label_names
        flat_idx = (starts[:, None] + kept_positions(seq)[None, :]).reshape(-1)[:n_tokens]
        labels = np.stack([corpus.labels[n][flat_idx] for n in names], axis=1).astype(np.int32)
    meta = {
        "host_hash": host.digest(),
        "site": site,
        "layer": layer,
        "normalized": normalize,
        "norm_factor": norm_factor,
        "seq_len": seq,
        "window_starts": starts.tolist(),
        "seed": seed,
    }
    return ActivationDataset(matrix, meta, labels, names)


class HostHashMismatch(UserWarning):
    pass


def dumps_dataset(ds: ActivationDataset) -> bytes:
    if ds.n_rows == 0:
        raise InputError("refusing to save an empty activation dataset")
    meta = dict(ds.meta)
    meta["n_rows"], meta["dim"] = ds.n_rows, ds.dim
    meta["label_names"] = list(ds.label_names) if ds.labels is not None else []
    buf = io.BytesIO()
    buf.write(b"SPAD")
    buf.write(struct.pack("<I", 1))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(np.ascontiguousarray(ds.matrix, dtype="<f4").tobytes())
    if ds.labels is not None:
        buf.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads_dataset(raw: bytes, expected_host_hash: str | None = None) -> ActivationDataset:
    if len(raw) < 16 or raw[:4] != b"SPAD":
        raise FormatError("not an SPAD activation dataset")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("activation dataset checksum mismatch")
    (version,) = struct.unpack("<I", body[4:8])
    if version != 1:
        raise FormatError(f"unsupported SPAD version {version}")
    (meta_len,) = struct.unpack("<I", body[8:12])
    meta = json.loads(body[12 : 12 + meta_len].decode("utf-8"))
    n, d = meta.pop("n_rows"), meta.pop("dim")
    names = meta.pop("label_names")
    off = 12 + meta_len
    matrix = np.frombuffer(body, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)
    off += 4 * n * d
    labels = None
    if names:
        labels = np.frombuffer(body, dtype="<i4", count=n * len(names), offset=off)
        labels = labels.reshape(n, len(names)).astype(np.int32)
        off += 4 * n * len(names)
    if off != len(body):
        raise FormatError("activation dataset has unexpected trailing bytes")
    if expected_host_hash is not None and meta.get("host_hash") != expected_host_hash:
        warnings.warn(
            f"dataset was harvested from host {meta.get('host_hash', '?')[:12]}, "
            f"expected {expected_host_hash[:12]}",
            HostHashMismatch,
            stacklevel=2,
        )
    return ActivationDataset(matrix, meta, labels, names)


def save_dataset(ds: ActivationDataset, path: str | Path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path: str | Path, expected_host_hash: str | None = None) -> ActivationDataset:
    return loads_dataset(Path(path).read_bytes(), expected_host_hash)


def dataset_roundtrip(ds: ActivationDataset, path: str | Path) -> ActivationDataset:
    save_dataset(ds, path)
    return load_dataset(path)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationSet:
    sequences: np.ndarray  # [count, ctx_len]
    starts: np.ndarray
    source_id: str

    @property
    def count(self) -> int:
        return int(self.sequences.shape[0])


def sample_calibration(tokens: np.ndarray, count: int = 128, ctx_len: int = 128, seed: int = 0) -> CalibrationSet:
    """``count`` disjoint windows drawn without replacement from a token stream."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if count < 1:
        raise InputError("calibration count must be positive")
    if len(tokens) < count * ctx_len:
        raise InputError(f"corpus of {len(tokens)} tokens cannot supply {count} windows of {ctx_len}")
    rng = np.random.default_rng(seed)
    n_slots = len(tokens) // ctx_len
    offset = int(rng.integers(0, len(tokens) - n_slots * ctx_len + 1))
    slots = np.sort(rng.choice(n_slots, size=count, replace=False))
    starts = offset + slots * ctx_len
    seqs = tokens[starts[:, None] + np.arange(ctx_len)[None, :]]
    source = hashlib.sha256(tokens.astype("<i8").tobytes()).hexdigest()[:16]
    return CalibrationSet(seqs, starts, source)
