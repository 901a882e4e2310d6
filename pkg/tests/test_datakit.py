import warnings

import numpy as np
import pytest

from splab.datakit import (
    ActivationDataset,
    CorpusSpec,
    HostHashMismatch,
    MARKER_POOL,
    dataset_roundtrip,
    dumps_dataset,
    generate_labeled_corpus,
    harvest_activations,
    label_correlation,
    load_dataset,
    loads_dataset,
    sample_calibration,
    save_dataset,
)
from splab.errors import ConfigError, FormatError, InputError
from splab.hostmodel import HookSite, HostConfig, HostModel, Substitute, run_with_hook

HOST = HostModel.init(HostConfig(n_layers=2, n_heads=2, d_model=16, d_mlp=32, ctx_len=16, seed=5))


class TestLabeledCorpus:
    def test_rho_one_identical(self):
        c = generate_labeled_corpus(CorpusSpec({"a": 2, "b": 2}, rho=1.0, length=5000, seed=1))
        a, b = c.labels["a"], c.labels["b"]
        marked = a >= 0
        assert marked.sum() > 100
        np.testing.assert_array_equal(a[marked], b[marked])

    def test_rho_zero_uncorrelated(self):
        c = generate_labeled_corpus(CorpusSpec({"a": 2, "b": 2}, rho=0.0, length=100_000, marker_rate=0.1, seed=2))
        assert (c.labels["a"] >= 0).sum() >= 10_000
        assert abs(label_correlation(c.labels["a"], c.labels["b"])) < 0.05

    @pytest.mark.parametrize("rho", [0.3, 0.9])
    def test_rho_matches(self, rho):
        c = generate_labeled_corpus(CorpusSpec({"a": 2, "b": 2}, rho=rho, length=100_000, marker_rate=0.1, seed=3))
        assert abs(label_correlation(c.labels["a"], c.labels["b"]) - rho) < 0.05

    def test_three_classes_balanced(self):
        c = generate_labeled_corpus(CorpusSpec({"cls": 3}, length=100_000, marker_rate=0.1, seed=4))
        lab = c.labels["cls"]
        lab = lab[lab >= 0]
        freqs = np.bincount(lab) / len(lab)
        np.testing.assert_allclose(freqs, 1 / 3, atol=0.02)

    def test_one_class_id_per_marked_token(self):
        c = generate_labeled_corpus(CorpusSpec({"x": 3, "y": 2}, rho=0.5, length=3000, seed=5))
        marked = c.labels["x"] >= 0
        np.testing.assert_array_equal(marked, c.labels["y"] >= 0)
        # every marked token is a marker character and vice versa
        from splab.hostmodel import VOCAB

        chars = np.array([VOCAB[t] in MARKER_POOL for t in c.tokens])
        np.testing.assert_array_equal(chars, marked)

    def test_vocab_too_small(self):
        with pytest.raises(ConfigError):
            generate_labeled_corpus(CorpusSpec({"x": 10, "y": 10}))

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            CorpusSpec({"x": 1})
        with pytest.raises(ConfigError):
            CorpusSpec({"x": 2}, rho=1.5)

    def test_deterministic(self):
        s = CorpusSpec({"x": 3}, length=2000, seed=9)
        assert generate_labeled_corpus(s).corpus_id() == generate_labeled_corpus(s).corpus_id()


@pytest.fixture(scope="module")
def corpus():
    return generate_labeled_corpus(CorpusSpec({"cls": 3}, length=6000, seed=7))


class TestHarvest:
    def test_normalised_mean_norm(self, corpus):
        ds = harvest_activations(HOST, corpus, "resid_post", 1, 1500, normalize=True)
        norms = np.linalg.norm(ds.matrix, axis=1)
        assert norms.mean() == pytest.approx(np.sqrt(16), rel=0.02)
        assert ds.norm_factor > 0

    def test_unscaling_recovers_raw(self, corpus):
        raw = harvest_activations(HOST, corpus, "mlp_out", 0, 800, normalize=False)
        ds = harvest_activations(HOST, corpus, "mlp_out", 0, 800, normalize=True)
        np.testing.assert_allclose(ds.raw(), raw.matrix, rtol=1e-6, atol=1e-7 * np.abs(raw.matrix).max())

    def test_deterministic(self, corpus):
        a = harvest_activations(HOST, corpus, "attn_out", 1, 700, seed=3)
        b = harvest_activations(HOST, corpus, "attn_out", 1, 700, seed=3)
        assert dumps_dataset(a) == dumps_dataset(b)

    def test_substitute_rows_back(self, corpus):
        ds = harvest_activations(HOST, corpus, "mlp_out", 1, 150, normalize=True)  # 10 full windows
        starts = np.array(ds.meta["window_starts"])
        windows = corpus.tokens[starts[:, None] + np.arange(16)]
        plain, act = run_with_hook(HOST, windows, HookSite(1, "mlp_out"))
        rebuilt = act.copy()
        rebuilt[:, 1:, :] = ds.raw().reshape(len(starts), 15, 16)
        logits, _ = run_with_hook(HOST, windows, HookSite(1, "mlp_out"), Substitute(rebuilt))
        np.testing.assert_allclose(logits, plain, rtol=1e-5, atol=1e-5)

    def test_labels_aligned(self, corpus):
        ds = harvest_activations(HOST, corpus, "resid_post", 0, 1000)
        starts = np.array(ds.meta["window_starts"])
        idx = (starts[:, None] + np.arange(1, 16)).reshape(-1)[:1000]
        np.testing.assert_array_equal(ds.label("cls"), corpus.labels["cls"][idx])

    def test_invalid_site(self, corpus):
        with pytest.raises(ConfigError):
            harvest_activations(HOST, corpus, "hook_z", 0, 10)
        with pytest.raises(ConfigError):
            harvest_activations(HOST, corpus, "mlp_out", 4, 10)

    def test_too_many_tokens(self, corpus):
        with pytest.raises(InputError):
            harvest_activations(HOST, corpus, "mlp_out", 0, 10**6)


class TestDatasetFile:
    def _ds(self, labels=True):
        rng = np.random.default_rng(0)
        return ActivationDataset(
            rng.normal(size=(20, 4)).astype(np.float32),
            {"host_hash": "abc", "site": "mlp_out", "layer": 0, "norm_factor": 1.5, "normalized": True},
            rng.integers(-1, 3, size=(20, 2)).astype(np.int32) if labels else None,
            ["a", "b"] if labels else [],
        )

    @pytest.mark.parametrize("labels", [True, False])
    def test_roundtrip(self, tmp_path, labels):
        ds = self._ds(labels)
        back = dataset_roundtrip(ds, tmp_path / "d.spad")
        assert back.matrix.tobytes() == ds.matrix.tobytes()
        assert back.meta == ds.meta
        if labels:
            assert back.labels.tobytes() == ds.labels.tobytes()
            assert back.label_names == ["a", "b"]
        else:
            assert back.labels is None

    def test_checksum(self, tmp_path):
        raw = bytearray(dumps_dataset(self._ds()))
        raw[40] ^= 0xFF
        with pytest.raises(FormatError, match="checksum"):
            loads_dataset(bytes(raw))

    def test_host_hash_mismatch_warns(self, tmp_path):
        save_dataset(self._ds(), tmp_path / "d.spad")
        with pytest.warns(HostHashMismatch):
            load_dataset(tmp_path / "d.spad", expected_host_hash="zzz")
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            load_dataset(tmp_path / "d.spad", expected_host_hash="abc")

    def test_empty_rejected(self, tmp_path):
        ds = ActivationDataset(np.zeros((0, 4), dtype=np.float32), {"norm_factor": 1.0})
        with pytest.raises(InputError):
            save_dataset(ds, tmp_path / "e.spad")


def _overlaps(starts, length):
    iv = sorted((s, s + length) for s in starts)
    return any(a_end > b_start for (_, a_end), (b_start, _) in zip(iv, iv[1:]))


class TestCalibration:
    def test_default_count(self):
        tokens = np.arange(128 * 128 * 2) % 96
        cal = sample_calibration(tokens, ctx_len=128, seed=0)
        assert cal.count == 128
        assert cal.sequences.shape == (128, 128)

    def test_exact_length(self):
        tokens = np.arange(16) % 96
        cal = sample_calibration(tokens, count=1, ctx_len=16)
        np.testing.assert_array_equal(cal.sequences[0], tokens)

    @pytest.mark.parametrize("seed", range(5))
    def test_disjoint_in_bounds(self, seed):
        tokens = np.arange(1000) % 96
        cal = sample_calibration(tokens, count=20, ctx_len=37, seed=seed)
        assert not _overlaps(cal.starts.tolist(), 37)
        assert cal.starts.min() >= 0 and cal.starts.max() + 37 <= 1000
        for s, seq in zip(cal.starts, cal.sequences):
            np.testing.assert_array_equal(seq, tokens[s : s + 37])

    def test_too_small(self):
        with pytest.raises(InputError):
            sample_calibration(np.zeros(100), count=4, ctx_len=32)
