"""Experiment pipeline: prune a toy host, build four SAE variants, evaluate, report.

Variants: ``Pretrained`` (trained on the unpruned host), ``Trained`` (trained
on the pruned host) and ``PrunedNN`` (the pretrained SAE pruned to NN%). All
evaluations run against the pruned host.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import tomli

from . import __version__
from .coremetrics import CoreReport, evaluate_sae
from .datakit import (
    CorpusSpec,
    LabeledCorpus,
    generate_labeled_corpus,
    harvest_activations,
    load_dataset,
    sample_calibration,
    save_dataset,
)
from .errors import ConfigError, InputError, SplabError, StageError, StaleArtifactError, TaskError
from .hostmodel import SITES, HookSite, HostConfig, HostModel, encode_text, train_host
from .interp import SCR_K, SPARSE_K, TPP_K, absorption_eval, save_report, scr_eval, sparse_probe_eval, tpp_eval
from .pruner import DEFAULT_SWEEP, SAE_TARGETS, PruneSpec, prune_host, prune_sae, read_sweep_csv, sae_calibration, sparsity_sweep, sweep_csv
from .sae import PRETRAINED, TRAINED_ON_PRUNED, Sae, SaeConfig, train_sae

log = logging.getLogger("splab")

STAGES = ("train-host", "prune-host", "harvest", "train-sae", "prune-sae", "sweep", "eval", "report")
METRICS = ("core", "sparse_probe", "absorption", "scr", "tpp")
INTERP = METRICS[1:]
MANIFEST = "manifest.json"
REPORT_NOTE = (
    "full metric suite on a single toy host (the reference evaluates one model family on "
    "reconstruction only and another on the full suite)"
)

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs/default",
    "host": {
        "n_layers": 2,
        "n_heads": 4,
        "d_model": 64,
        "d_mlp": 256,
        "ctx_len": 64,
        "steps": 1500,
        "lr": 3e-3,
        "batch_size": 16,
        "checkpoint": "",
    },
    "corpus": {
        "length": 400_000,
        "marker_rate": 0.05,
        "n_classes": 4,
        "text_path": "",
        "probe_length": 60_000,
        "scr_length": 60_000,
        "scr_rho": 0.95,
        "eval_seqs": 32,
    },
    "sites": {"sites": list(SITES), "layers": [1]},
    "harvest": {"n_tokens": 32_768, "heldout_fraction": 0.1},
    "sae": {
        "expansion": 8,
        "activation": "relu",
        "k": 0,
        "l1_coeff": 1.0,
        "lr": 1e-3,
        "batch_size": 256,
        "epochs": 16,
    },
    "prune": {
        "host_sparsity": 0.5,
        "method": "wanda",
        "calib_count": 128,
        "sae_levels": [0.25, 0.5],
        "sweep_levels": list(DEFAULT_SWEEP),
    },
    "eval": {
        "metrics": list(METRICS),
        "interp_sites": [],
        "sparse_k": list(SPARSE_K),
        "scr_k": list(SCR_K),
        "tpp_k": list(TPP_K),
        "tpp_min_accuracy": 0.7,
        "l2_reg": 1e-3,
    },
}


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a section")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """Resolved experiment settings; every section of ``DEFAULTS`` is present."""

    data: dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        return cls(_merge(DEFAULTS, raw))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(raw)

    def __getitem__(self, section: str) -> Any:
        return self.data[section]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["seed"] = seed
        if out is not None:
            data["out"] = str(out)
        return ExperimentConfig(data)

    def validate(self) -> None:
        d = self.data
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
            raise ConfigError("seed must be an integer")
        for section, key in (("host", "checkpoint"), ("corpus", "text_path")):
            path = d[section][key]
            if path and not Path(path).is_file():
                raise ConfigError(f"{section}.{key} does not exist: {path}")
        prune = d["prune"]
        levels = [float(s) for s in prune["sweep_levels"]]
        if not levels or any(not 0.0 <= s <= 1.0 for s in levels) or levels != sorted(levels):
            raise ConfigError("prune.sweep_levels must be ascending values within [0, 1]")
        if any(not 0.0 < float(s) < 1.0 for s in prune["sae_levels"]):
            raise ConfigError("prune.sae_levels must lie strictly between 0 and 1")
        if len({self.pruned_name(s) for s in prune["sae_levels"]}) != len(prune["sae_levels"]):
            raise ConfigError("prune.sae_levels map to duplicate variant names")
        PruneSpec(float(prune["host_sparsity"]), prune["method"])
        self.host_config()
        self.sae_config()
        bad = set(d["sites"]["sites"]) - set(SITES)
        if bad or not d["sites"]["sites"]:
            raise ConfigError(f"sites.sites must be a non-empty subset of {SITES}")
        for layer in d["sites"]["layers"]:
            if not 0 <= int(layer) < d["host"]["n_layers"]:
                raise ConfigError(f"layer {layer} invalid for a {d['host']['n_layers']}-layer host")
        metrics = d["eval"]["metrics"]
        if not metrics or set(metrics) - set(METRICS):
            raise ConfigError(f"eval.metrics must be a non-empty subset of {METRICS}")
        if set(d["eval"]["interp_sites"]) - set(d["sites"]["sites"]):
            raise ConfigError("eval.interp_sites must be listed in sites.sites")
        if d["corpus"]["n_classes"] < 3 and "tpp" in metrics:
            raise ConfigError("TPP needs corpus.n_classes >= 3")

    def host_config(self) -> HostConfig:
        h = self.data["host"]
        keys = ("n_layers", "n_heads", "d_model", "d_mlp", "ctx_len")
        return HostConfig(**{k: int(h[k]) for k in keys}, seed=self.seed)

    def sae_config(self) -> SaeConfig:
        s = self.data["sae"]
        n = int(self.data["host"]["d_model"])
        return SaeConfig(
            n=n,
            M=int(s["expansion"]) * n,
            activation=s["activation"],
            k=int(s["k"]) or None,
            l1_coeff=float(s["l1_coeff"]),
            lr=float(s["lr"]),
            batch_size=int(s["batch_size"]),
            epochs=int(s["epochs"]),
            seed=self.seed,
        )

    def hook_sites(self) -> list[HookSite]:
        return [HookSite(int(l), s) for l in self.data["sites"]["layers"] for s in self.data["sites"]["sites"]]

    def interp_sites(self) -> list[HookSite]:
        if not set(self.data["eval"]["metrics"]) & set(INTERP):
            return []
        chosen = self.data["eval"]["interp_sites"] or self.data["sites"]["sites"]
        return [hs for hs in self.hook_sites() if hs.site in chosen]

    @staticmethod
    def pruned_name(sparsity: float) -> str:
        return f"Pruned{round(float(sparsity) * 100)}"

    def variants(self) -> list[str]:
        return ["Pretrained", *(self.pruned_name(s) for s in self.data["prune"]["sae_levels"]), "Trained"]

    def digest(self) -> str:
        """Hash of everything that affects results (the output dir does not)."""
        body = {k: v for k, v in self.data.items() if k != "out"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# manifest


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict[str, Any]
    config_hash: str
    tool_version: str = __version__
    stages: dict[str, dict[str, Any]] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, run_dir: Path) -> None:
        (run_dir / MANIFEST).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, run_dir: Path) -> "RunManifest | None":
        path = run_dir / MANIFEST
        if not path.is_file():
            return None
        return cls(**json.loads(path.read_text()))

    def refresh(self, run_dir: Path) -> None:
        self.artifacts = {
            p.relative_to(run_dir).as_posix(): file_sha256(p)
            for p in sorted(run_dir.rglob("*"))
            if p.is_file() and p.name != MANIFEST
        }


# ---------------------------------------------------------------------------
# pipeline


def _tag(hs: HookSite) -> str:
    return f"{hs.site}_L{hs.layer}"


def _threads() -> int:
    raw = os.environ.get("SPLAB_THREADS", "")
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"SPLAB_THREADS must be a positive integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError(f"SPLAB_THREADS must be a positive integer, got {raw!r}")
    return value


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


@dataclass(frozen=True)
class Need:
    path: str
    what: str
    producer: str


class Pipeline:
    def __init__(self, config: ExperimentConfig, run_dir: str | Path | None = None, threads: int | None = None):
        self.config = config
        self.run_dir = Path(run_dir or config["out"])
        self.threads = threads or _threads()

    # corpora are regenerated on demand; they are cheap and seed-determined
    @cached_property
    def train_corpus(self) -> LabeledCorpus:
        c = self.config["corpus"]
        corpus = generate_labeled_corpus(
            CorpusSpec({"cls": int(c["n_classes"])}, length=int(c["length"]), marker_rate=float(c["marker_rate"]), seed=self.config.seed)
        )
        if c["text_path"]:
            extra = encode_text(Path(c["text_path"]).read_text())
            labels = {k: np.concatenate([np.full(len(extra), -1, np.int32), v]) for k, v in corpus.labels.items()}
            corpus = LabeledCorpus(np.concatenate([extra, corpus.tokens]), labels, corpus.rho, corpus.markers)
        return corpus

    def _labeled(self, labels: dict[str, int], length: int, rho: float, offset: int) -> LabeledCorpus:
        c = self.config["corpus"]
        return generate_labeled_corpus(
            CorpusSpec(labels, rho=rho, length=length, marker_rate=float(c["marker_rate"]), seed=self.config.seed + offset)
        )

    @cached_property
    def side_corpora(self) -> dict[str, LabeledCorpus]:
        c = self.config["corpus"]
        n_cls, n_scr = int(c["probe_length"]), int(c["scr_length"])
        return {
            "probe": self._labeled({"cls": int(c["n_classes"])}, n_cls, 0.0, 3),
            "scr_biased": self._labeled({"A": 2, "B": 2}, n_scr, float(c["scr_rho"]), 1),
            "scr_balanced": self._labeled({"A": 2, "B": 2}, n_scr, 0.0, 2),
        }

    @cached_property
    def eval_tokens(self) -> np.ndarray:
        ctx = int(self.config["host"]["ctx_len"])
        n = int(self.config["corpus"]["eval_seqs"])
        corpus = self._labeled({"cls": 2}, (n + 1) * ctx, 0.0, 4)
        return corpus.tokens[: n * ctx].reshape(n, ctx)

    def path(self, rel: str) -> Path:
        return self.run_dir / rel

    def _map(self, fn: Callable, items: Sequence) -> list:
        if self.threads <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    # -- dependency declarations ------------------------------------------
    def needs(self, stage: str) -> list[Need]:
        cfg = self.config
        sites = cfg.hook_sites()
        if stage == "train-host":
            return []
        if stage == "prune-host":
            return [Need("host/unpruned.splb", "host checkpoint", "train-host")]
        if stage == "harvest":
            return [
                Need("host/unpruned.splb", "host checkpoint", "train-host"),
                Need("host/pruned.splb", "pruned host checkpoint", "prune-host"),
            ]
        out: list[Need] = []
        if stage in ("train-sae", "prune-sae", "sweep", "eval"):
            for hs in sites:
                where = f"site {hs.site} layer {hs.layer}"
                out.append(Need(f"data/unpruned/{_tag(hs)}.spad", f"activation dataset for {where}", "harvest"))
                out.append(Need(f"data/pruned/{_tag(hs)}.spad", f"activation dataset for {where} (pruned host)", "harvest"))
        if stage == "eval":
            for hs in cfg.interp_sites():
                for name in self.side_corpora:
                    out.append(Need(f"data/{name}/{_tag(hs)}.spad", f"activation dataset for site {hs.site} layer {hs.layer} ({name})", "harvest"))
            out.append(Need("host/pruned.splb", "pruned host checkpoint", "prune-host"))
        if stage in ("prune-sae", "sweep", "eval"):
            for hs in sites:
                out.append(Need(f"sae/{_tag(hs)}/Pretrained.splb", "pretrained SAE", "train-sae"))
        if stage in ("sweep", "eval"):
            for hs in sites:
                out.append(Need(f"sae/{_tag(hs)}/Trained.splb", "SAE trained on the pruned host", "train-sae"))
        if stage == "eval":
            for hs in sites:
                for v in cfg.variants()[1:-1]:
                    out.append(Need(f"sae/{_tag(hs)}/{v}.splb", f"{v} SAE", "prune-sae"))
        return out

    def _external_inputs(self) -> dict[str, str]:
        out = {}
        for section, key in (("host", "checkpoint"), ("corpus", "text_path")):
            path = self.config[section][key]
            if path:
                out[f"{section}.{key}"] = file_sha256(Path(path))
        return out

    def _report_inputs(self) -> list[str]:
        files = sorted(self.run_dir.glob("eval/*/*/*.json")) + sorted(self.run_dir.glob("sweep/*.csv"))
        return [p.relative_to(self.run_dir).as_posix() for p in files]

    def stage_key(self, stage: str) -> str:
        rels = self._report_inputs() if stage == "report" else [n.path for n in self.needs(stage)]
        body = {
            "stage": stage,
            "config": self.config.digest(),
            "inputs": {r: file_sha256(self.path(r)) for r in rels},
            "external": self._external_inputs() if stage == "train-host" else {},
        }
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    # -- driver ------------------------------------------------------------
    def run(self, stages: Iterable[str] | None = None) -> RunManifest:
        wanted = list(STAGES) if stages is None else list(stages)
        unknown = [s for s in wanted if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stage(s) {unknown}; choose from {list(STAGES)}")
        ordered = [s for s in STAGES if s in wanted]
        self.run_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest.load(self.run_dir)
        if manifest is not None:
            self._check_stale(manifest)
            manifest.config, manifest.config_hash, manifest.tool_version = self.config.data, self.config.digest(), __version__
        else:
            manifest = RunManifest(self.config.data, self.config.digest())
        for stage in ordered:
            self._check_needs(stage)
            key = self.stage_key(stage)
            record = manifest.stages.get(stage)
            if record and record["key"] == key and self._outputs_intact(record):
                log.info("%s: up to date, skipped", stage)
                continue
            log.info("%s: running", stage)
            t0 = time.perf_counter()
            written = getattr(self, "stage_" + stage.replace("-", "_"))()
            outputs = sorted(p.relative_to(self.run_dir).as_posix() for p in written)
            manifest.stages[stage] = {"key": key, "outputs": outputs, "wall_clock_s": round(time.perf_counter() - t0, 3)}
            manifest.refresh(self.run_dir)
            manifest.save(self.run_dir)
        manifest.refresh(self.run_dir)
        manifest.save(self.run_dir)
        return manifest

    def _check_stale(self, manifest: RunManifest) -> None:
        for rel, digest in manifest.artifacts.items():
            p = self.path(rel)
            if p.is_file() and file_sha256(p) != digest:
                raise StaleArtifactError(f"{rel} no longer matches its recorded checksum; remove it and re-run the producing stage")

    def _check_needs(self, stage: str) -> None:
        for need in self.needs(stage):
            if not self.path(need.path).is_file():
                raise StageError(f"{stage}: missing {need.what} ({need.path}); run the {need.producer} stage first")

    def _outputs_intact(self, record: dict) -> bool:
        return all(self.path(rel).is_file() for rel in record["outputs"])

    # -- stages ------------------------------------------------------------
    def stage_train_host(self) -> list[Path]:
        h = self.config["host"]
        out = self.path("host/unpruned.splb")
        out.parent.mkdir(parents=True, exist_ok=True)
        if h["checkpoint"]:
            model = HostModel.load(h["checkpoint"])
            info: dict[str, Any] = {"source": "checkpoint", "checkpoint": str(h["checkpoint"])}
        else:
            result = train_host(
                self.config.host_config(), self.train_corpus.tokens, int(h["steps"]), float(h["lr"]), int(h["batch_size"])
            )
            model = result.model
            info = {
                "source": "trained",
                "steps": int(h["steps"]),
                "final_loss": result.losses[-1] if result.losses else None,
                "heldout_loss": result.heldout_loss,
            }
        model.save(out)
        info["host_hash"] = model.digest()
        return [out, _write_json(self.path("host/train.json"), info)]

    def _host(self, which: str) -> HostModel:
        return HostModel.load(self.path(f"host/{which}.splb"))

    def stage_prune_host(self) -> list[Path]:
        p = self.config["prune"]
        host = self._host("unpruned")
        calib = None
        if p["method"] == "wanda":
            calib = sample_calibration(
                self.train_corpus.tokens, int(p["calib_count"]), host.config.ctx_len, seed=self.config.seed
            )
        pruned, report = prune_host(host, PruneSpec(float(p["host_sparsity"]), p["method"]), calib)
        out = self.path("host/pruned.splb")
        pruned.save(out)
        rep = self.path("host/prune_report.json")
        report.save(rep)
        return [out, rep]

    def stage_harvest(self) -> list[Path]:
        n_tokens = int(self.config["harvest"]["n_tokens"])
        hosts = {"unpruned": self._host("unpruned"), "pruned": self._host("pruned")}
        ctx = hosts["pruned"].config.ctx_len
        jobs = [("unpruned", hs) for hs in self.config.hook_sites()] + [("pruned", hs) for hs in self.config.hook_sites()]
        jobs += [(name, hs) for hs in self.config.interp_sites() for name in self.side_corpora]

        def one(job) -> Path:
            name, hs = job
            if name in hosts:
                ds = harvest_activations(hosts[name], self.train_corpus, hs.site, hs.layer, n_tokens, seed=self.config.seed)
            else:
                corpus = self.side_corpora[name]
                every = (len(corpus.tokens) // ctx) * (ctx - 1)
                ds = harvest_activations(hosts["pruned"], corpus, hs.site, hs.layer, every, normalize=False, seed=self.config.seed)
            out = self.path(f"data/{name}/{_tag(hs)}.spad")
            out.parent.mkdir(parents=True, exist_ok=True)
            save_dataset(ds, out)
            return out

        # build the corpora before any worker touches them
        self.train_corpus, self.side_corpora
        return self._map(one, jobs)

    def _dataset(self, name: str, hs: HookSite):
        return load_dataset(self.path(f"data/{name}/{_tag(hs)}.spad"))

    def _sae(self, hs: HookSite, variant: str) -> Sae:
        return Sae.load(self.path(f"sae/{_tag(hs)}/{variant}.splb"))

    def stage_train_sae(self) -> list[Path]:
        cfg = self.config.sae_config()
        heldout = float(self.config["harvest"]["heldout_fraction"])
        jobs = [(hs, v) for hs in self.config.hook_sites() for v in ("Pretrained", "Trained")]

        def one(job) -> list[Path]:
            hs, variant = job
            source, tag = ("unpruned", PRETRAINED) if variant == "Pretrained" else ("pruned", TRAINED_ON_PRUNED)
            result = train_sae(cfg, self._dataset(source, hs), heldout, provenance=tag)
            out = self.path(f"sae/{_tag(hs)}/{variant}.splb")
            out.parent.mkdir(parents=True, exist_ok=True)
            result.sae.save(out)
            info = {
                "variant": variant,
                "provenance": tag,
                "steps": len(result.losses),
                "final_loss": result.losses[-1] if result.losses else None,
                "heldout_mse": result.heldout_mse,
                "heldout_l0": result.heldout_l0,
            }
            return [out, _write_json(self.path(f"sae/{_tag(hs)}/{variant}.train.json"), info)]

        return [p for group in self._map(one, jobs) for p in group]

    def stage_prune_sae(self) -> list[Path]:
        p = self.config["prune"]
        heldout = float(self.config["harvest"]["heldout_fraction"])

        def one(hs: HookSite) -> list[Path]:
            sae = self._sae(hs, "Pretrained")
            train, _ = self._dataset("unpruned", hs).split(heldout)
            stats = sae_calibration(sae, train)
            written = []
            for s in p["sae_levels"]:
                name = self.config.pruned_name(s)
                pruned, report = prune_sae(sae, PruneSpec(float(s), p["method"], SAE_TARGETS), train, stats)
                out = self.path(f"sae/{_tag(hs)}/{name}.splb")
                pruned.save(out)
                rep = self.path(f"sae/{_tag(hs)}/{name}.prune.json")
                report.save(rep)
                written += [out, rep]
            return written

        return [p for group in self._map(one, self.config.hook_sites()) for p in group]

    def stage_sweep(self) -> list[Path]:
        p = self.config["prune"]
        heldout = float(self.config["harvest"]["heldout_fraction"])
        levels = sorted({0.0, *(float(s) for s in p["sweep_levels"])})
        jobs = [(hs, v) for hs in self.config.hook_sites() for v in ("Pretrained", "Trained")]

        def one(job) -> Path:
            hs, variant = job
            sae = self._sae(hs, variant)
            calib = self._dataset("unpruned" if variant == "Pretrained" else "pruned", hs)
            _, held = self._dataset("pruned", hs).split(heldout)
            # evaluation rows come from the pruned host, scaled into this SAE's input space
            eval_x = held.raw() * np.float32(sae.norm_factor)
            rows = sparsity_sweep(sae, calib, levels, p["method"], heldout, eval_x=eval_x)
            out = self.path(f"sweep/{_tag(hs)}_{variant}.csv")
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(sweep_csv(rows))
            return out

        return self._map(one, jobs)

    def stage_eval(self) -> list[Path]:
        host = self._host("pruned")
        tokens = self.eval_tokens
        metrics = self.config["eval"]["metrics"]
        interp = {_tag(hs) for hs in self.config.interp_sites()}
        jobs = [(hs, v) for hs in self.config.hook_sites() for v in self.config.variants()]
        side: dict[str, dict] = {}
        for hs in self.config.hook_sites():
            if _tag(hs) in interp:
                side[_tag(hs)] = {name: self._dataset(name, hs) for name in self.side_corpora}

        def one(job) -> list[Path]:
            hs, variant = job
            sae = self._sae(hs, variant)
            folder = self.path(f"eval/{_tag(hs)}/{variant}")
            folder.mkdir(parents=True, exist_ok=True)
            written: list[Path] = []
            if "core" in metrics:
                report = evaluate_sae(host, sae, tokens, hs, variant)
                report.save(folder / "core.json")
                written.append(folder / "core.json")
            if _tag(hs) in interp:
                written += self._interp(sae, side[_tag(hs)], folder)
            return written

        return [p for group in self._map(one, jobs) for p in group]

    def _interp(self, sae: Sae, data: dict, folder: Path) -> list[Path]:
        e = self.config["eval"]
        l2 = float(e["l2_reg"])
        c = np.float32(sae.norm_factor)

        def rows(name: str, *labels: str):
            ds = data[name]
            keep = np.all(np.stack([ds.label(l) for l in labels]) >= 0, axis=0)
            return (ds.matrix[keep] * c, *(ds.label(l)[keep] for l in labels))

        tasks: dict[str, Callable[[], Any]] = {}
        x, y = rows("probe", "cls")
        tasks["sparse_probe"] = lambda: sparse_probe_eval(sae, x, y, e["sparse_k"], l2)
        tasks["absorption"] = lambda: absorption_eval(sae, x, y, l2_reg=l2)
        tasks["tpp"] = lambda: tpp_eval(sae, x, y, e["tpp_k"], float(e["tpp_min_accuracy"]), l2)

        def scr():
            bx, ba, bb = rows("scr_biased", "A", "B")
            vx, va, vb = rows("scr_balanced", "A", "B")
            return scr_eval(sae, bx, ba, bb, vx, va, vb, e["scr_k"], seed=self.config.seed, l2_reg=l2)

        tasks["scr"] = scr
        written: list[Path] = []
        for name in INTERP:
            if name not in e["metrics"]:
                continue
            try:
                written += save_report(tasks[name](), folder / name)
            except TaskError as exc:
                # a task the toy host cannot support is recorded rather than failing the run
                log.warning("%s skipped for %s: %s", name, folder, exc)
                written.append(_write_json(folder / f"{name}.json", {"skipped": str(exc)}))
        return written

    def stage_report(self) -> list[Path]:
        return emit_report(self.run_dir)


def run_pipeline(
    config: ExperimentConfig, stages: Iterable[str] | None = None, run_dir: str | Path | None = None
) -> RunManifest:
    return Pipeline(config, run_dir).run(stages)


# ---------------------------------------------------------------------------
# report


VARIANT_ORDER = ("Pretrained", "Pruned25", "Pruned50", "Trained")


def _variant_key(name: str) -> tuple:
    if name in VARIANT_ORDER:
        return (VARIANT_ORDER.index(name), "")
    if name.startswith("Pruned") and name[6:].isdigit():
        return (1.5, f"{int(name[6:]):03d}")
    return (9, name)


def _interp_rows(folder: Path) -> dict[str, float]:
    out: dict[str, float] = {}

    def read(name: str) -> dict | None:
        p = folder / f"{name}.json"
        if not p.is_file():
            return None
        payload = json.loads(p.read_text())
        return None if "skipped" in payload else payload

    if (sp := read("sparse_probe")) is not None:
        out["sparse_probe_overall"] = sp["overall"]
        for k, v in sorted(sp["top_k"].items(), key=lambda kv: int(kv[0])):
            out[f"sparse_probe_top_{k}"] = v
    if (ab := read("absorption")) is not None:
        for key in ("mean_absorption_fraction_score", "mean_full_absorption_score", "mean_num_split_features"):
            out[f"absorption_{key}"] = ab[key]
    if (sc := read("scr")) is not None:
        for k, row in sorted(sc["rows"].items(), key=lambda kv: int(kv[0])):
            out[f"scr_metric_at_{k}"] = row["metric"]
    if (tp := read("tpp")) is not None:
        for k, row in sorted(tp["rows"].items(), key=lambda kv: int(kv[0])):
            out[f"tpp_total_at_{k}"] = row["total"]
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_report(run_dir: str | Path) -> list[Path]:
    """Comparison tables, sweep CSVs and SVG plots under ``<run_dir>/report``."""
    run_dir = Path(run_dir)
    cores = sorted(run_dir.glob("eval/*/*/core.json"))
    if not cores:
        raise InputError(f"no evaluation outputs under {run_dir}/eval; run the eval stage first")
    tables: dict[str, dict[str, dict[str, float]]] = {}
    for path in cores:
        tag, variant = path.parent.parent.name, path.parent.name
        report = CoreReport.load(path)
        values = {m: getattr(report, m) for m in CoreReport.metric_names()}
        values.update(_interp_rows(path.parent))
        tables.setdefault(tag, {})[variant] = values
    out_dir = run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    summary: dict[str, Any] = {"note": REPORT_NOTE, "sites": {}}
    for tag in sorted(tables):
        variants = sorted(tables[tag], key=_variant_key)
        metrics: list[str] = []
        for v in variants:
            metrics += [m for m in tables[tag][v] if m not in metrics]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *variants])
        for m in metrics:
            w.writerow([m, *(_fmt(tables[tag][v][m]) if m in tables[tag][v] else "" for v in variants)])
        table_path = out_dir / f"table_{tag}.csv"
        table_path.write_text(buf.getvalue())
        written.append(table_path)
        series = _sweep_series(run_dir, tag)
        summary["sites"][tag] = {
            "variants": variants,
            "table": {m: {v: tables[tag][v].get(m) for v in variants} for m in metrics},
            "sweep": {name: [[x, y] for x, y in pts] for name, pts in series.items()},
        }
        if series:
            csv_path = out_dir / f"sweep_{tag}.csv"
            csv_path.write_text(series_csv(series))
            svg_path = out_dir / f"sweep_{tag}.svg"
            svg_path.write_text(line_chart_svg(series, title=f"reconstruction loss vs sparsity ({tag})"))
            written += [csv_path, svg_path]
    written.insert(0, _write_json(out_dir / "summary.json", summary))
    return written


def _sweep_series(run_dir: Path, tag: str) -> dict[str, list[tuple[float, float]]]:
    series = {}
    for path in sorted(run_dir.glob(f"sweep/{tag}_*.csv")):
        variant = path.stem[len(tag) + 1 :]
        rows = read_sweep_csv(path.read_text())
        series[variant] = [(r.sparsity * 100.0, r.recon_loss) for r in rows]
    return dict(sorted(series.items(), key=lambda kv: _variant_key(kv[0])))


def series_csv(series: dict[str, list[tuple[float, float]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "sparsity_pct", "recon_loss"])
    for name, pts in series.items():
        for x, y in pts:
            w.writerow([name, f"{x:g}", _fmt(y)])
    return buf.getvalue()


COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_chart_svg(
    series: dict[str, list[tuple[float, float]]],
    title: str = "",
    x_label: str = "sparsity (%)",
    y_label: str = "reconstruction loss",
    width: int = 640,
    height: int = 420,
) -> str:
    """Standalone SVG line chart; the data ranges sit on the root element so points can be decoded."""
    if not series or not any(series.values()):
        raise InputError("line chart needs at least one non-empty series")
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(0.0, min(xs)), max(100.0, max(xs))
    y0, y1 = min(0.0, min(ys)), max(ys)
    if y1 <= y0:
        y1 = y0 + 1.0
    y1 += 0.05 * (y1 - y0)
    left, right, top, bottom = 70, 20, 40, 55
    pw, ph = width - left - right, height - top - bottom

    def px(x: float) -> float:
        return left + (x - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return top + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" data-x-min="{x0!r}" data-x-max="{x1!r}" data-y-min="{y0!r}" '
        f'data-y-max="{y1!r}" data-plot="{left} {top} {pw} {ph}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="22" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text class="x-label" x="{left + pw / 2}" y="{height - 12}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text class="y-label" x="16" y="{top + ph / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {top + ph / 2})">{y_label}</text>',
    ]
    for i in range(6):
        xv = x0 + (x1 - x0) * i / 5
        yv = y0 + (y1 - y0) * i / 5
        parts.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{xv:.0f}</text>')
        parts.append(f'<text x="{left - 6}" y="{py(yv) + 3:.1f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{px(x):.6f},{py(y):.6f}" for x, y in pts)
        parts.append(f'<polyline data-series="{name}" fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = top + 14 + 16 * i
        parts.append(f'<line x1="{left + pw - 130}" y1="{ly}" x2="{left + pw - 110}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw - 104}" y="{ly + 4}" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def decode_svg_series(svg: str) -> dict[str, list[tuple[float, float]]]:
    """Invert ``line_chart_svg``: polyline pixel coordinates back to data values."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg)
    x0, x1 = float(root.get("data-x-min")), float(root.get("data-x-max"))
    y0, y1 = float(root.get("data-y-min")), float(root.get("data-y-max"))
    left, top, pw, ph = (float(v) for v in root.get("data-plot").split())
    out = {}
    for poly in root.iter("{http://www.w3.org/2000/svg}polyline"):
        pts = []
        for pair in poly.get("points").split():
            sx, sy = (float(v) for v in pair.split(","))
            pts.append((x0 + (sx - left) / pw * (x1 - x0), y0 + (top + ph - sy) / ph * (y1 - y0)))
        out[poly.get("data-series")] = pts
    return out


# ---------------------------------------------------------------------------
# command line


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splab", description="Prune a toy transformer and compare SAE variants.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in (*STAGES, "run"):
        helptext = "run every stage (or --stages)" if name == "run" else f"run the {name} stage"
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, help="TOML experiment config (defaults when omitted)")
        p.add_argument("--out", help="run directory (overrides the config)")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--stages", help="comma-separated stage list (run only)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.stages and args.command != "run":
            raise UsageError("--stages only applies to the run subcommand")
        stages = None
        if args.command != "run":
            stages = [args.command]
        elif args.stages:
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            bad = [s for s in stages if s not in STAGES]
            if bad:
                raise UsageError(f"unknown stage(s) {bad}; choose from {', '.join(STAGES)}")
        config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        config = config.with_overrides(seed=args.seed, out=args.out)
        threads = _threads()
    except (UsageError, ConfigError) as exc:
        print(f"splab: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = Pipeline(config, threads=threads).run(stages)
    except SplabError as exc:
        print(f"splab: stage failure: {exc}", file=sys.stderr)
        return 2
    done = ", ".join(manifest.stages) or "none"
    print(f"run dir {config['out']}: stages recorded: {done}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
