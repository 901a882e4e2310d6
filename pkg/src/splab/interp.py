"""Supervised interpretability checks: sparse probing, absorption, SCR and TPP.

Everything works on activation rows in the SAE's input space. Rows are put in
a canonical content-derived order before any fitting, and the 80/20 split is
a function of row content, so reports do not depend on the order in which
tokens are supplied.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, TaskError
from .sae import Sae, encode

log = logging.getLogger(__name__)

SPARSE_K = (1, 2, 5)
SCR_K = (2, 5, 10, 20, 50, 100, 500)
TPP_K = (2, 5, 10, 20, 50, 100, 500)
RANKING_NOTE = "latent importance = |probe weight on latent| * latent activation std"


# ---------------------------------------------------------------------------
# canonical order and split


def _row_hash(x: np.ndarray, *labels: np.ndarray) -> np.ndarray:
    """64-bit content hash per row (splitmix-style mixing over the raw bits)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    words = x.view(np.uint64).reshape(len(x), -1)
    extra = [np.asarray(lab, dtype=np.int64).view(np.uint64).reshape(-1, 1) for lab in labels]
    if extra:
        words = np.hstack([words, *extra])
    h = np.full(len(x), 0x9E3779B97F4A7C15, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for col in words.T:
            h ^= col + np.uint64(0x9E3779B97F4A7C15) + (h << np.uint64(6)) + (h >> np.uint64(2))
            h *= np.uint64(0xBF58476D1CE4E5B9)
            h ^= h >> np.uint64(31)
    return h


def canonical_order(x: np.ndarray, *labels: np.ndarray) -> np.ndarray:
    return np.argsort(_row_hash(x, *labels), kind="stable")


def heldout_mask(x: np.ndarray) -> np.ndarray:
    """Boolean mask of the ~20% held-out rows, chosen from row content alone."""
    return (_row_hash(x) % np.uint64(5)) == 0


# ---------------------------------------------------------------------------
# probes


@dataclass
class Probe:
    weight: np.ndarray  # in raw feature units
    bias: float
    descriptor: dict = field(default_factory=dict)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.logits(x) > 0).astype(np.int64)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(x) == np.asarray(y)).mean())

    def balanced_accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        y = np.asarray(y)
        pred = self.predict(x)
        pos, neg = y == 1, y == 0
        return 0.5 * (float((pred[pos] == 1).mean()) + float((pred[neg] == 0).mean()))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _train_logreg(x: np.ndarray, y: np.ndarray, l2_reg: float, max_iter: int, tol: float) -> tuple[np.ndarray, float]:
    """Accelerated full-batch gradient descent on standardised features."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    z = (x - mu) / sd
    n, d = z.shape
    lip = float(np.linalg.norm(z, 2)) ** 2 / (4.0 * n) + 0.25 + l2_reg
    step = 1.0 / lip
    w = np.zeros(d)
    b = 0.0
    w_prev, b_prev = w, b
    t = 1.0
    for _ in range(max_iter):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_next
        vw = w + mom * (w - w_prev)
        vb = b + mom * (b - b_prev)
        r = _sigmoid(z @ vw + vb) - y
        gw = z.T @ r / n + l2_reg * vw
        gb = float(r.mean())
        w_prev, b_prev = w, b
        w = vw - step * gw
        b = vb - step * gb
        t = t_next
        if max(float(np.abs(gw).max(initial=0.0)), abs(gb)) < tol:
            break
    # fold the standardisation back into raw-unit weights
    w_raw = w / sd
    return w_raw, float(b - mu @ w_raw)


def fit_probe(
    features: np.ndarray,
    labels: np.ndarray,
    l2_reg: float = 1e-3,
    max_iter: int = 1000,
    tol: float = 1e-6,
    descriptor: dict | None = None,
) -> tuple[Probe, float]:
    """Logistic regression on the content-hashed 80% split; returns held-out accuracy."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise InputError("features must be [N, d] with one label per row")
    if len(x) < 20:
        raise InputError(f"need at least 20 rows to fit a probe, got {len(x)}")
    if set(np.unique(y).tolist()) != {0, 1}:
        raise InputError("probe labels must contain both classes 0 and 1")
    order = canonical_order(x, y)
    x, y = x[order], y[order].astype(np.float64)
    held = heldout_mask(x)
    train = ~held
    if len(np.unique(y[train])) < 2 or held.sum() == 0:
        raise InputError("split left a single class in training or no held-out rows")
    w, b = _train_logreg(x[train], y[train], l2_reg, max_iter, tol)
    probe = Probe(w, b, dict(descriptor or {}))
    return probe, probe.accuracy(x[held], y[held])


def _binary(labels: np.ndarray, cls: int) -> np.ndarray:
    return (np.asarray(labels) == cls).astype(np.int64)


def latent_importance(h: np.ndarray, y: np.ndarray, l2_reg: float = 1e-3) -> np.ndarray:
    """|probe weight| times activation std for a latent-space probe of ``y``."""
    probe, _ = fit_probe(h, y, l2_reg=l2_reg, descriptor={"features": "latents"})
    return np.abs(probe.weight) * np.asarray(h, dtype=np.float64).std(axis=0)


def _top(scores: np.ndarray, k: int) -> np.ndarray:
    # descending, ties to the lower latent index
    return np.argsort(-scores, kind="stable")[:k]


def ablate_latents(sae: Sae, x: np.ndarray, latents: Sequence[int], h: np.ndarray | None = None) -> np.ndarray:
    """Remove the selected latents' decoder contributions, keeping the SAE error term."""
    x = np.asarray(x, dtype=np.float64)
    idx = np.asarray(list(latents), dtype=np.int64)
    if idx.size == 0:
        return x.copy()
    if h is None:
        h = encode(sae, x)
    return x - np.asarray(h, dtype=np.float64)[:, idx] @ sae.wd[:, idx].T.astype(np.float64)


# ---------------------------------------------------------------------------
# sparse probing


@dataclass
class SparseProbeReport:
    overall: float
    top_k: dict[int, float]
    selected: dict[int, list[int]]
    per_class: dict[int, dict] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        return [("overall", self.overall)] + [(f"top_{k}", v) for k, v in sorted(self.top_k.items())]

    def to_json(self) -> str:
        payload = {
            "overall": self.overall,
            "top_k": {str(k): v for k, v in self.top_k.items()},
            "selected": {str(k): v for k, v in self.selected.items()},
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "ranking": "|mean(h | positive) - mean(h | negative)|",
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        return _csv(["setting", "accuracy"], self.rows())


def _mean_diff(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.abs(h[y == 1].mean(axis=0) - h[y == 0].mean(axis=0))


def _sparse_probe_one(h: np.ndarray, y: np.ndarray, k_set: Sequence[int], l2_reg: float) -> dict:
    alive = int((np.abs(h) > 0).any(axis=0).sum())
    if max(k_set) > alive:
        raise ConfigError(f"only {alive} latents are alive, cannot probe the top {max(k_set)}")
    train = ~heldout_mask(h)
    ranking = _top(_mean_diff(h[train], y[train]), max(k_set))
    out = {"top_k": {}, "selected": {}}
    for k in k_set:
        cols = ranking[:k]
        _, acc = fit_probe(h[:, cols], y, l2_reg=l2_reg, descriptor={"latents": cols.tolist()})
        out["top_k"][k] = acc
        out["selected"][k] = cols.tolist()
    out["overall"] = fit_probe(h, y, l2_reg=l2_reg)[1]
    return out


def sparse_probe_eval(
    sae: Sae, x: np.ndarray, labels: np.ndarray, k_set: Sequence[int] = SPARSE_K, l2_reg: float = 1e-3
) -> SparseProbeReport:
    """Probe accuracy from the top-k latents ranked by class mean difference.

    Binary labels give one task; more classes are run one-vs-rest and averaged.
    Rows with a negative label are ignored.
    """
    x, labels = _labelled(x, labels)
    k_set = sorted(set(int(k) for k in k_set))
    h = encode(sae, x).astype(np.float64)
    classes = np.unique(labels)
    tasks = [1] if set(classes.tolist()) == {0, 1} else classes.tolist()
    per = {int(c): _sparse_probe_one(h, _binary(labels, c), k_set, l2_reg) for c in tasks}
    mean = lambda key, k=None: float(np.mean([p[key] if k is None else p[key][k] for p in per.values()]))  # noqa: E731
    return SparseProbeReport(
        overall=mean("overall"),
        top_k={k: mean("top_k", k) for k in k_set},
        selected=next(iter(per.values()))["selected"] if len(per) == 1 else {},
        per_class=per if len(per) > 1 else {},
    )


def _labelled(x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) != len(labels):
        raise InputError("one label per activation row required")
    keep = labels >= 0
    x, labels = x[keep], labels[keep]
    order = canonical_order(x, labels)
    return x[order], labels[order]


# ---------------------------------------------------------------------------
# absorption


@dataclass(frozen=True)
class AbsorptionThresholds:
    tau_main: float = 0.5
    activation: float = 0.0
    tau_cos: float = 0.2
    tau_proj: float = 0.4
    tau_full: float = 0.8
    min_probe_accuracy: float = 0.6
    min_positives: int = 50


@dataclass
class AbsorptionReport:
    per_class: dict[int, dict]
    skipped: dict[int, str]
    thresholds: AbsorptionThresholds

    def _stat(self, key: str, fn) -> float:
        vals = [v[key] for v in self.per_class.values()]
        return float(fn(vals)) if vals else 0.0

    def summary(self) -> dict[str, float]:
        out = {}
        for key, name in (
            ("absorption_fraction", "mean_absorption_fraction_score"),
            ("full_absorption", "mean_full_absorption_score"),
            ("n_split_features", "mean_num_split_features"),
        ):
            out[name] = self._stat(key, np.mean)
            out[name.replace("mean_", "std_", 1)] = self._stat(key, np.std)
        return out

    def to_json(self) -> str:
        payload = {
            **self.summary(),
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "skipped": {str(c): v for c, v in self.skipped.items()},
            "thresholds": asdict(self.thresholds),
            "aggregation": "unweighted mean over classes",
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def absorption_eval(
    sae: Sae,
    x: np.ndarray,
    labels: np.ndarray,
    thresholds: AbsorptionThresholds = AbsorptionThresholds(),
    l2_reg: float = 1e-3,
) -> AbsorptionReport:
    """Per-class feature absorption against a probe on the full activation.

    Latent j's probe weight is the x-space probe read through the decoder,
    ``p . d_j``; its share on class c is its summed contribution over positive
    tokens. Main latents are the smallest top-ranked set reaching ``tau_main``.
    """
    x, labels = _labelled(x, labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise InputError("absorption needs at least two classes")
    th = thresholds
    xd = x.astype(np.float64)
    h = encode(sae, x).astype(np.float64)
    wd = sae.wd.astype(np.float64)
    dnorm = np.linalg.norm(wd, axis=0)
    per: dict[int, dict] = {}
    skipped: dict[int, str] = {}
    for c in classes.tolist():
        y = _binary(labels, c)
        if y.sum() < th.min_positives:
            raise InputError(f"class {c} has only {int(y.sum())} positive tokens (need {th.min_positives})")
        probe, acc = fit_probe(xd, y, l2_reg=l2_reg, descriptor={"class": c, "features": "activations"})
        if acc < th.min_probe_accuracy:
            skipped[c] = f"probe accuracy {acc:.3f} below {th.min_probe_accuracy}"
            continue
        p = probe.weight
        p_dot_d = p @ wd  # [M]
        cos = np.where(dnorm > 0, p_dot_d / (np.linalg.norm(p) * np.where(dnorm > 0, dnorm, 1.0)), 0.0)
        pos = y == 1
        contrib = h[pos] * p_dot_d  # [P, M]
        mass = np.maximum(contrib.sum(axis=0), 0.0)
        total = mass.sum()
        ranked = _top(mass, len(mass))
        if total > 0:
            cum = np.cumsum(mass[ranked]) / total
            n_main = int(np.searchsorted(cum, th.tau_main - 1e-12) + 1)
        else:
            n_main = 1
        main = ranked[:n_main]
        hp = h[pos]
        correct = probe.predict(xd[pos]) == 1
        silent = (hp[:, main] <= th.activation).all(axis=1)
        failures = silent & correct
        proj = xd[pos] @ p
        others = np.ones(sae.M, dtype=bool)
        others[main] = False
        eligible = others & (cos > th.tau_cos)
        share = np.where(proj[:, None] > 0, contrib / np.where(proj[:, None] > 0, proj[:, None], 1.0), 0.0)
        firing = (hp > th.activation) & eligible[None, :]
        absorbed = failures & (firing & (share >= th.tau_proj)).any(axis=1)
        full = failures & (firing & (share >= th.tau_full)).any(axis=1)
        n_pos = int(pos.sum())
        per[c] = {
            "absorption_fraction": float(absorbed.sum()) / n_pos,
            "full_absorption": float(full.sum()) / n_pos,
            "n_split_features": n_main,
            "main_latents": main.tolist(),
            "n_failures": int(failures.sum()),
            "n_positives": n_pos,
            "probe_accuracy": acc,
        }
    return AbsorptionReport(per, skipped, th)


# ---------------------------------------------------------------------------
# SCR


@dataclass
class ScrReport:
    rows: dict[int, dict[str, float]]
    base_accuracy: dict[str, float]
    oracle_accuracy: dict[str, float]
    chosen: str
    ranking: str = RANKING_NOTE
    degenerate: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = asdict(self)
        payload["rows"] = {str(k): v for k, v in self.rows.items()}
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        return _csv(["k", "dir1", "dir2", "metric"], [(k, r["dir1"], r["dir2"], r["metric"]) for k, r in sorted(self.rows.items())])


def choose_direction(base_acc_a: float, base_acc_b: float) -> str:
    """dir1 when the target attribute starts out less accurate than the spurious one."""
    return "dir1" if base_acc_a < base_acc_b else "dir2"


def scr_eval(
    sae: Sae,
    biased_x: np.ndarray,
    biased_a: np.ndarray,
    biased_b: np.ndarray,
    balanced_x: np.ndarray,
    balanced_a: np.ndarray,
    balanced_b: np.ndarray,
    k_set: Sequence[int] = SCR_K,
    ranking: str = "probe",
    seed: int = 0,
    l2_reg: float = 1e-3,
) -> ScrReport:
    """Spurious-correlation removal by zero-ablating latents tied to each attribute.

    A is the target and B the spurious attribute. ``ranking="random"`` picks
    latents uniformly at random (a control).
    """
    bx, ba, bb = _binary_task(biased_x, biased_a, biased_b)
    vx, va, vb = _binary_task(balanced_x, balanced_a, balanced_b)
    k_set = sorted(set(int(k) for k in k_set))
    base_a, _ = fit_probe(bx, ba, l2_reg=l2_reg, descriptor={"label": "A", "data": "biased"})
    base_b, _ = fit_probe(bx, bb, l2_reg=l2_reg, descriptor={"label": "B", "data": "biased"})
    held = heldout_mask(vx)
    oracle_a, _ = fit_probe(vx, va, l2_reg=l2_reg, descriptor={"label": "A", "data": "balanced"})
    oracle_b, _ = fit_probe(vx, vb, l2_reg=l2_reg, descriptor={"label": "B", "data": "balanced"})
    ex, ea, eb = vx[held], va[held], vb[held]
    acc = {"A": base_a.accuracy(ex, ea), "B": base_b.accuracy(ex, eb)}
    orc = {"A": oracle_a.accuracy(ex, ea), "B": oracle_b.accuracy(ex, eb)}
    chosen = choose_direction(acc["A"], acc["B"])
    degenerate = [d for d, name in (("dir1", "A"), ("dir2", "B")) if orc[name] <= acc[name]]
    if chosen in degenerate:
        name = "A" if chosen == "dir1" else "B"
        raise TaskError(f"oracle probe for {name} ({orc[name]:.3f}) does not beat the biased probe ({acc[name]:.3f})")
    hb = encode(sae, bx).astype(np.float64)
    if ranking == "probe":
        rank_b = _top(latent_importance(hb, bb, l2_reg), sae.M)
        rank_a = _top(latent_importance(hb, ba, l2_reg), sae.M)
    elif ranking == "random":
        rng = np.random.default_rng(seed)
        rank_b, rank_a = rng.permutation(sae.M), rng.permutation(sae.M)
    else:
        raise ConfigError(f"unknown latent ranking {ranking!r}")
    he = encode(sae, ex).astype(np.float64)

    def score(probe: Probe, name: str, y: np.ndarray, latents: np.ndarray) -> float:
        gap = orc[name] - acc[name]
        if gap <= 0:
            return 0.0  # degenerate direction, flagged in the report
        return (probe.accuracy(ablate_latents(sae, ex, latents, he), y) - acc[name]) / gap

    rows = {}
    for k in k_set:
        kk = min(k, sae.M)
        s1 = score(base_a, "A", ea, rank_b[:kk])
        s2 = score(base_b, "B", eb, rank_a[:kk])
        rows[k] = {"dir1": float(s1), "dir2": float(s2), "metric": float(s1 if chosen == "dir1" else s2)}
    note = RANKING_NOTE if ranking == "probe" else f"uniform random (seed {seed})"
    return ScrReport(rows, acc, orc, chosen, note, degenerate)


def _binary_task(x, a, b):
    x = np.asarray(x, dtype=np.float64)
    a, b = np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)
    keep = (a >= 0) & (b >= 0)
    x, a, b = x[keep], a[keep], b[keep]
    for name, lab in (("A", a), ("B", b)):
        if not set(np.unique(lab).tolist()) <= {0, 1}:
            raise InputError(f"attribute {name} must be binary")
    order = canonical_order(x, a, b)
    return x[order], a[order], b[order]


# ---------------------------------------------------------------------------
# TPP


@dataclass
class TppReport:
    rows: dict[int, dict[str, float]]
    probe_accuracy: dict[int, float]
    ranking: str = RANKING_NOTE

    def to_json(self) -> str:
        payload = asdict(self)
        payload["rows"] = {str(k): v for k, v in self.rows.items()}
        payload["probe_accuracy"] = {str(k): v for k, v in self.probe_accuracy.items()}
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        return _csv(
            ["k", "intended", "unintended", "total"],
            [(k, r["intended"], r["unintended"], r["total"]) for k, r in sorted(self.rows.items())],
        )


def tpp_eval(
    sae: Sae,
    x: np.ndarray,
    labels: np.ndarray,
    k_set: Sequence[int] = TPP_K,
    min_accuracy: float = 0.7,
    l2_reg: float = 1e-3,
) -> TppReport:
    """Targeted probe perturbation over one-vs-rest class probes (balanced accuracy)."""
    x, labels = _labelled(x, labels)
    classes = np.unique(labels).tolist()
    if len(classes) < 3:
        raise InputError(f"TPP needs at least 3 classes, got {len(classes)}")
    xd = x.astype(np.float64)
    held = heldout_mask(xd)
    ex = xd[held]
    h = encode(sae, xd).astype(np.float64)
    he = h[held]
    probes, base, ranks = {}, {}, {}
    for c in classes:
        y = _binary(labels, c)
        probe, _ = fit_probe(xd, y, l2_reg=l2_reg, descriptor={"class": c})
        acc = probe.balanced_accuracy(ex, y[held])
        if acc < min_accuracy:
            raise TaskError(f"probe for class {c} reaches only {acc:.3f} (< {min_accuracy})")
        probes[c], base[c] = probe, acc
        ranks[c] = _top(latent_importance(h, y, l2_reg), sae.M)
    rows = {}
    for k in sorted(set(int(k) for k in k_set)):
        kk = min(k, sae.M)
        delta = np.zeros((len(classes), len(classes)))
        if kk > 0:
            for i, c in enumerate(classes):
                ablated = ablate_latents(sae, ex, ranks[c][:kk], he)
                for j, c2 in enumerate(classes):
                    delta[i, j] = base[c2] - probes[c2].balanced_accuracy(ablated, _binary(labels, c2)[held])
        intended = float(np.mean(np.diag(delta)))
        off = ~np.eye(len(classes), dtype=bool)
        unintended = float(delta[off].mean())
        rows[k] = {"intended": intended, "unintended": unintended, "total": intended - unintended}
    return TppReport(rows, {int(c): a for c, a in base.items()})


# ---------------------------------------------------------------------------


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def save_report(report, stem: str | Path) -> list[Path]:
    """Write ``<stem>.json`` and, when the report has a k-grid, ``<stem>.csv``."""
    stem = Path(stem)
    paths = [stem.with_suffix(".json")]
    paths[0].write_text(report.to_json() + "\n")
    if hasattr(report, "to_csv"):
        paths.append(stem.with_suffix(".csv"))
        paths[1].write_text(report.to_csv())
    return paths
