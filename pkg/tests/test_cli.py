from __future__ import annotations

import csv
import io
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from splab import cli
from splab.cli import (
    DEFAULTS,
    ExperimentConfig,
    Pipeline,
    RunManifest,
    decode_svg_series,
    emit_report,
    file_sha256,
    line_chart_svg,
    main,
)
from splab.coremetrics import CoreReport
from splab.errors import ConfigError, InputError, StageError, StaleArtifactError
from splab.pruner import SweepRow, sweep_csv

TINY = """
seed = 0
[host]
d_model = 32
d_mlp = 128
ctx_len = 32
steps = 100
[corpus]
length = 60000
probe_length = 30000
scr_length = 30000
eval_seqs = 8
[harvest]
n_tokens = 4096
[sae]
epochs = 2
[eval]
interp_sites = ["resid_post"]
"""


@pytest.fixture(scope="module")
def tiny_toml(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def tiny_run(tiny_toml, tmp_path_factory) -> tuple[Path, RunManifest]:
    run_dir = tmp_path_factory.mktemp("run") / "tiny"
    config = ExperimentConfig.load(tiny_toml)
    return run_dir, Pipeline(config, run_dir, threads=1).run()


def _metric_json(run_dir: Path) -> dict[str, bytes]:
    files = sorted(run_dir.glob("eval/**/*.json")) + [run_dir / "report" / "summary.json"]
    return {p.relative_to(run_dir).as_posix(): p.read_bytes() for p in files}


# ---------------------------------------------------------------------------
# config


def test_defaults_validate():
    cfg = ExperimentConfig()
    assert cfg.variants() == ["Pretrained", "Pruned25", "Pruned50", "Trained"]
    assert len(cfg.hook_sites()) == 3
    assert cfg.sae_config().M == 8 * DEFAULTS["host"]["d_model"]


@pytest.mark.parametrize(
    "override",
    [
        {"bogus": 1},
        {"host": {"bogus": 1}},
        {"prune": {"sweep_levels": [0.5, 0.25]}},
        {"prune": {"sweep_levels": [0.25, 1.5]}},
        {"prune": {"sae_levels": [0.0]}},
        {"seed": "zero"},
        {"sites": {"sites": ["nowhere"]}},
        {"sites": {"layers": [5]}},
        {"eval": {"metrics": ["vibes"]}},
        {"host": {"checkpoint": "/does/not/exist.splb"}},
        {"corpus": {"text_path": "/does/not/exist.txt"}},
        {"host": "not a section"},
    ],
)
def test_invalid_configs(override):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(override)


def test_toml_roundtrip_and_overrides(tiny_toml):
    cfg = ExperimentConfig.load(tiny_toml)
    assert cfg["host"]["d_model"] == 32
    assert cfg["host"]["n_heads"] == DEFAULTS["host"]["n_heads"]
    moved = cfg.with_overrides(seed=3, out="elsewhere")
    assert moved.seed == 3 and moved["out"] == "elsewhere"
    assert cfg.with_overrides(out="elsewhere").digest() == cfg.digest()
    assert moved.digest() != cfg.digest()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "nope.toml")


# ---------------------------------------------------------------------------
# pipeline


def test_file_count_matches_config(tiny_run, tiny_toml):
    run_dir, manifest = tiny_run
    cfg = ExperimentConfig.load(tiny_toml)
    n_sites, n_variants = len(cfg.hook_sites()), len(cfg.variants())
    arts = manifest.artifacts
    assert len([a for a in arts if a.startswith("sae/") and a.endswith(".splb")]) == n_sites * n_variants
    assert len([a for a in arts if a.endswith("/core.json")]) == n_sites * n_variants
    assert len([a for a in arts if a.startswith("report/table_")]) == n_sites
    assert len([a for a in arts if a.startswith("report/sweep_") and a.endswith(".svg")]) == n_sites
    interp = [a for a in arts if a.startswith("eval/") and not a.endswith("core.json") and a.endswith(".json")]
    assert len(interp) == 4 * n_variants  # four interp reports, one interp site


def test_every_file_in_manifest(tiny_run):
    run_dir, _ = tiny_run
    manifest = RunManifest.load(run_dir)
    on_disk = {p.relative_to(run_dir).as_posix() for p in run_dir.rglob("*") if p.is_file()} - {"manifest.json"}
    assert on_disk == set(manifest.artifacts)
    for rel, digest in manifest.artifacts.items():
        assert file_sha256(run_dir / rel) == digest
    assert manifest.config["host"]["d_model"] == 32
    assert set(manifest.stages) == set(cli.STAGES)
    assert all(rec["wall_clock_s"] >= 0 for rec in manifest.stages.values())


def test_all_evaluations_use_pruned_host(tiny_run):
    run_dir, _ = tiny_run
    from splab.datakit import load_dataset
    from splab.hostmodel import HostModel

    pruned = HostModel.load(run_dir / "host/pruned.splb").digest()
    unpruned = HostModel.load(run_dir / "host/unpruned.splb").digest()
    assert pruned != unpruned
    for name in ("probe", "scr_biased", "scr_balanced", "pruned"):
        assert load_dataset(run_dir / f"data/{name}/resid_post_L1.spad").meta["host_hash"] == pruned
    assert load_dataset(run_dir / "data/unpruned/resid_post_L1.spad").meta["host_hash"] == unpruned


def test_variant_provenance(tiny_run):
    run_dir, _ = tiny_run
    from splab.sae import Sae

    prov = {v: Sae.load(run_dir / f"sae/mlp_out_L1/{v}.splb").provenance for v in ("Pretrained", "Pruned25", "Pruned50", "Trained")}
    assert prov == {
        "Pretrained": "pretrained",
        "Pruned25": "pruned_pretrained(0.25)",
        "Pruned50": "pruned_pretrained(0.5)",
        "Trained": "trained_on_pruned",
    }
    pre = Sae.load(run_dir / "sae/mlp_out_L1/Pretrained.splb")
    p25 = Sae.load(run_dir / "sae/mlp_out_L1/Pruned25.splb")
    assert np.isclose((p25.we == 0).mean() - (pre.we == 0).mean(), 0.25, atol=0.01)


def test_rerun_is_noop(tiny_run, tiny_toml):
    run_dir, first = tiny_run
    before = {p: p.stat().st_mtime_ns for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.json"}
    again = Pipeline(ExperimentConfig.load(tiny_toml), run_dir, threads=1).run(["train-host"])
    assert again.stages["train-host"] == first.stages["train-host"]
    after = {p: p.stat().st_mtime_ns for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.json"}
    assert before == after


def test_train_host_twice_is_noop(tiny_toml, tmp_path):
    cfg = ExperimentConfig.load(tiny_toml)
    one = Pipeline(cfg, tmp_path, threads=1).run(["train-host"])
    mtime = (tmp_path / "host/unpruned.splb").stat().st_mtime_ns
    two = Pipeline(cfg, tmp_path, threads=1).run(["train-host"])
    assert one.stages == two.stages
    assert (tmp_path / "host/unpruned.splb").stat().st_mtime_ns == mtime


def test_config_change_reruns(tiny_toml, tmp_path):
    cfg = ExperimentConfig.load(tiny_toml)
    one = Pipeline(cfg, tmp_path, threads=1).run(["train-host"])
    two = Pipeline(cfg.with_overrides(seed=1), tmp_path, threads=1).run(["train-host"])
    assert one.stages["train-host"]["key"] != two.stages["train-host"]["key"]


def test_eval_without_harvest(tiny_toml, tmp_path):
    with pytest.raises(StageError, match="missing activation dataset for site"):
        Pipeline(ExperimentConfig.load(tiny_toml), tmp_path, threads=1).run(["eval"])


def test_stage_error_names_gap(tiny_toml, tmp_path):
    with pytest.raises(StageError, match="host/unpruned.splb"):
        Pipeline(ExperimentConfig.load(tiny_toml), tmp_path, threads=1).run(["prune-host"])


def test_tampered_artifact_is_stale(tiny_run, tiny_toml, tmp_path):
    run_dir, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    target = copy / "eval/attn_out_L1/Pretrained/core.json"
    target.write_text(target.read_text().replace("0", "1", 1))
    with pytest.raises(StaleArtifactError, match="core.json"):
        Pipeline(ExperimentConfig.load(tiny_toml), copy, threads=1).run(["report"])


def test_threads_do_not_change_results(tiny_run, tiny_toml, tmp_path):
    run_dir, _ = tiny_run
    Pipeline(ExperimentConfig.load(tiny_toml), tmp_path, threads=3).run()
    assert _metric_json(tmp_path) == _metric_json(run_dir)


def test_unknown_stage(tiny_toml, tmp_path):
    with pytest.raises(ConfigError):
        Pipeline(ExperimentConfig.load(tiny_toml), tmp_path).run(["train-everything"])


# ---------------------------------------------------------------------------
# report


def test_table_columns(tiny_run):
    run_dir, _ = tiny_run
    rows = list(csv.reader(io.StringIO((run_dir / "report/table_resid_post_L1.csv").read_text())))
    assert rows[0] == ["metric", "Pretrained", "Pruned25", "Pruned50", "Trained"]
    names = [r[0] for r in rows[1:]]
    assert names[: len(CoreReport.metric_names())] == CoreReport.metric_names()
    assert "sparse_probe_top_1" in names
    summary = json.loads((run_dir / "report/summary.json").read_text())
    assert "toy host" in summary["note"]
    core = CoreReport.load(run_dir / "eval/resid_post_L1/Pruned25/core.json")
    assert summary["sites"]["resid_post_L1"]["table"]["ce_loss_score"]["Pruned25"] == core.ce_loss_score


def test_svg_matches_csv(tiny_run):
    run_dir, _ = tiny_run
    for svg in sorted((run_dir / "report").glob("*.svg")):
        decoded = decode_svg_series(svg.read_text())
        table = list(csv.DictReader(io.StringIO(svg.with_suffix(".csv").read_text())))
        assert set(decoded) == {r["series"] for r in table} == {"Pretrained", "Trained"}
        for name, pts in decoded.items():
            want = [(float(r["sparsity_pct"]), float(r["recon_loss"])) for r in table if r["series"] == name]
            assert len(pts) == len(want)
            np.testing.assert_allclose(pts, want, atol=1e-3, rtol=0)


def _fake_core(variant: str, site: str = "resid_post", layer: int = 1) -> CoreReport:
    vals = {m: 0.5 for m in CoreReport.metric_names()}
    return CoreReport(**vals, variant=variant, site=site, layer=layer)


def test_single_series_report(tmp_path):
    (tmp_path / "eval/resid_post_L1/Pretrained").mkdir(parents=True)
    _fake_core("Pretrained").save(tmp_path / "eval/resid_post_L1/Pretrained/core.json")
    (tmp_path / "sweep").mkdir()
    pts = [SweepRow(s, l, "resid_post", 1, "wanda") for s, l in ((0.0, 1.25), (0.25, 1.3), (0.5, 1.75), (0.99, 9.5))]
    (tmp_path / "sweep/resid_post_L1_Pretrained.csv").write_text(sweep_csv(pts))
    emit_report(tmp_path)
    svg = (tmp_path / "report/sweep_resid_post_L1.svg").read_text()
    assert svg.count("<polyline") == 1
    assert "sparsity (%)" in svg and "reconstruction loss" in svg
    decoded = decode_svg_series(svg)["Pretrained"]
    np.testing.assert_allclose(decoded, [(0, 1.25), (25, 1.3), (50, 1.75), (99, 9.5)], atol=1e-3, rtol=0)
    rows = list(csv.reader(io.StringIO((tmp_path / "report/table_resid_post_L1.csv").read_text())))
    assert rows[0] == ["metric", "Pretrained"]


def test_four_variant_columns(tmp_path):
    for v in ("Trained", "Pruned50", "Pretrained", "Pruned25"):
        (tmp_path / f"eval/mlp_out_L0/{v}").mkdir(parents=True)
        _fake_core(v, "mlp_out", 0).save(tmp_path / f"eval/mlp_out_L0/{v}/core.json")
    emit_report(tmp_path)
    header = (tmp_path / "report/table_mlp_out_L0.csv").read_text().splitlines()[0]
    assert header == "metric,Pretrained,Pruned25,Pruned50,Trained"
    assert not (tmp_path / "report/sweep_mlp_out_L0.svg").exists()


def test_empty_run_dir(tmp_path):
    with pytest.raises(InputError):
        emit_report(tmp_path)


def test_svg_precision_on_wide_range():
    series = {"a": [(0.0, 0.001), (50.0, 12345.678), (99.0, 54321.0)]}
    np.testing.assert_allclose(decode_svg_series(line_chart_svg(series))["a"], series["a"], atol=1e-3, rtol=0)


def test_empty_chart_rejected():
    with pytest.raises(InputError):
        line_chart_svg({})


# ---------------------------------------------------------------------------
# command line


def test_exit_code_usage(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["run", "--stages", "train-host,nonsense"]) == 1
    assert main(["eval", "--stages", "eval"]) == 1
    assert main([]) == 1


def test_exit_code_bad_config(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[host]\nd_model = [\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1


def test_exit_code_stage_failure(tiny_toml, tmp_path):
    assert main(["report", "--config", str(tiny_toml), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--config", str(tiny_toml), "--out", str(tmp_path)]) == 2


def test_exit_code_success(tiny_run, tiny_toml, tmp_path, capsys):
    run_dir, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    assert main(["run", "--config", str(tiny_toml), "--out", str(copy), "--stages", "report"]) == 0
    assert "report" in capsys.readouterr().out


def test_threads_env(monkeypatch, tiny_toml, tmp_path):
    monkeypatch.setenv("SPLAB_THREADS", "zero")
    assert main(["train-host", "--config", str(tiny_toml), "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("SPLAB_THREADS", "2")
    assert cli._threads() == 2
    monkeypatch.delenv("SPLAB_THREADS")
    assert cli._threads() == 1
