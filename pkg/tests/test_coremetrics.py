import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splab.coremetrics import (
    CoreReport,
    ce_loss_score,
    downstream_scores,
    evaluate_sae,
    kl_div_score,
    l2_ratio,
    mean_kl,
    reconstruction_stats,
    sparsity_stats,
    similarity_stats,
)
from splab.errors import DegenerateBaselineError, DimensionError, InputError
from splab.hostmodel import SITES, HookSite, HostConfig, HostModel
from splab.sae import Sae, SaeConfig, identity_sae


class TestPaperFixtures:
    def test_kl_score(self):
        assert kl_div_score(0.114, 10.125) == pytest.approx(0.989, abs=1e-3)

    def test_ce_score(self):
        assert ce_loss_score(3.234, 3.125, 12.438) == pytest.approx(0.988, abs=1e-3)

    def test_l2_ratio(self):
        assert l2_ratio(19.000, 17.375) == pytest.approx(0.914, abs=1e-3)

    def test_degenerate(self):
        with pytest.raises(DegenerateBaselineError):
            kl_div_score(0.1, 0.0)
        with pytest.raises(DegenerateBaselineError):
            ce_loss_score(3.0, 2.0, 2.0)

    def test_ce_score_not_clamped(self):
        assert ce_loss_score(13.0, 3.0, 12.0) < 0


X = np.random.default_rng(0).normal(size=(200, 6))


class TestReconstruction:
    def test_identity(self):
        r = reconstruction_stats(X, X)
        assert r["mse"] == 0 and r["explained_variance"] == 1 and r["explained_variance_legacy"] == 1
        assert r["cossim"] == pytest.approx(1) and r["l2_ratio"] == 1
        assert r["relative_reconstruction_bias"] == pytest.approx(1)

    def test_half_scale(self):
        r = reconstruction_stats(X, 0.5 * X)
        assert r["cossim"] == pytest.approx(1)
        assert r["l2_ratio"] == pytest.approx(0.5)
        assert r["relative_reconstruction_bias"] == pytest.approx(2)

    def test_ev_uses_mean_vector(self):
        # offset data: reconstructing the mean explains nothing under the proper formula
        x = X + 10
        mean = np.broadcast_to(x.mean(axis=0), x.shape)
        assert reconstruction_stats(x, mean)["explained_variance"] == pytest.approx(0, abs=1e-12)

    def test_hand_values(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        xhat = np.array([[1.0, 1.0], [0.0, 1.0]])
        r = reconstruction_stats(x, xhat)
        assert r["mse"] == pytest.approx(0.25)  # one unit error over 2 samples * 2 dims
        assert r["explained_variance"] == pytest.approx(1 - 1 / 1.0)
        assert r["cossim"] == pytest.approx((1 / np.sqrt(2) + 1) / 2)

    def test_errors(self):
        with pytest.raises(InputError):
            reconstruction_stats(np.ones((5, 3)), np.ones((5, 3)))
        with pytest.raises(DimensionError):
            reconstruction_stats(X, X[:, :3])
        with pytest.raises(InputError):
            reconstruction_stats(X[:1], X[:1])


class TestSparsity:
    def test_topk_l0(self):
        rng = np.random.default_rng(0)
        h = np.zeros((150, 32))
        for row in h:
            row[rng.choice(32, 8, replace=False)] = rng.random(8) + 0.1
        assert sparsity_stats(h)["l0"] == 8

    def test_all_zero(self):
        s = sparsity_stats(np.zeros((100, 4)))
        assert s["l0"] == 0 and s["l1"] == 0 and s["frac_alive"] == 0

    def test_hand_trace(self):
        h = np.zeros((100, 3))
        h[:50, 0] = 1.0
        h[:2, 1] = 3.0
        s = sparsity_stats(h)
        assert s["freq_over_1pct"] == pytest.approx(2 / 3)
        assert s["frac_alive"] == pytest.approx(2 / 3)
        assert s["freq_over_10pct"] == pytest.approx(1 / 3)
        assert s["normalized_freq_over_10pct"] == pytest.approx(0.5 / 0.52)
        assert s["l1"] == pytest.approx((50 + 6) / 100)

    def test_too_few(self):
        with pytest.raises(InputError):
            sparsity_stats(np.zeros((0, 4)))
        with pytest.raises(InputError):
            sparsity_stats(np.zeros((99, 4)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.0, 0.5))
    def test_ordering_property(self, seed, p):
        rng = np.random.default_rng(seed)
        h = (rng.random((120, 10)) < rng.random(10) * p) * rng.random((120, 10))
        s = sparsity_stats(h)
        assert s["freq_over_10pct"] <= s["freq_over_1pct"]
        for k in ("normalized_freq_over_1pct", "normalized_freq_over_10pct", "frac_alive"):
            assert 0 <= s[k] <= 1


class TestSimilarity:
    def _sae(self, we, wd):
        n, m = wd.shape
        sae = Sae.init(SaeConfig(n=n, M=m))
        sae.we, sae.wd = we.astype(np.float32), wd.astype(np.float32)
        return sae

    def test_identical_latents(self):
        v = np.array([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]])
        s = similarity_stats(self._sae(v, v.T))
        assert s["avg_max_encoder_cos"] == pytest.approx(1) and s["avg_max_decoder_cos"] == pytest.approx(1)

    def test_orthogonal(self):
        q = np.vstack([np.eye(3), np.zeros((1, 3))])  # one zero latent, excluded
        s = similarity_stats(self._sae(q, q.T))
        assert s["avg_max_decoder_cos"] == 0 and s["excluded_decoder_cols"] == 1

    def test_random_pairwise_oracle(self):
        rng = np.random.default_rng(5)
        we, wd = rng.normal(size=(8, 4)), rng.normal(size=(4, 8))

        def oracle(vs):
            best = []
            for i, a in enumerate(vs):
                best.append(max(float(a @ b / np.linalg.norm(a) / np.linalg.norm(b)) for j, b in enumerate(vs) if j != i))
            return sum(best) / len(best)

        s = similarity_stats(self._sae(we, wd))
        assert s["avg_max_encoder_cos"] == pytest.approx(oracle(list(we.astype(np.float32).astype(float))), abs=1e-6)
        assert s["avg_max_decoder_cos"] == pytest.approx(oracle(list(wd.astype(np.float32).T.astype(float))), abs=1e-6)


def test_kl_self_zero_and_nonneg():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 5, 9)), rng.normal(size=(3, 5, 9))
    assert mean_kl(a, a) == pytest.approx(0, abs=1e-7)
    assert mean_kl(a, b) > 0


HOST_CFG = HostConfig(n_layers=2, n_heads=2, d_model=16, d_mlp=32, ctx_len=16, seed=4)


@pytest.fixture(scope="module")
def host():
    m = HostModel.init(HOST_CFG)
    rng = np.random.default_rng(0)
    for t in m.params.values():
        t.data += rng.normal(0, 0.3, size=t.shape).astype(np.float32)
    return m


@pytest.fixture(scope="module")
def tokens():
    return np.random.default_rng(2).integers(0, 96, size=(8, 16))


@pytest.mark.parametrize("site", SITES)
def test_identity_sae_fixed_point(host, tokens, site):
    r = downstream_scores(host, identity_sae(16), tokens, HookSite(1, site))
    assert r["kl_with_sae"] == 0 and r["kl_div_score"] == 1 and r["ce_loss_score"] == 1
    assert r["ce_with_sae"] == r["ce_without_sae"]


def test_random_sae_is_worse(host, tokens):
    sae = Sae.init(SaeConfig(n=16, M=32, seed=1))
    r = downstream_scores(host, sae, tokens, HookSite(0, "resid_post"))
    assert r["kl_with_sae"] > 0 and r["kl_with_ablation"] > 0
    assert r["kl_div_score"] < 1


def test_dim_mismatch(host, tokens):
    with pytest.raises(DimensionError):
        downstream_scores(host, identity_sae(8), tokens, HookSite(0, "mlp_out"))


def test_report_json_flat(host, tokens, tmp_path):
    rep = evaluate_sae(host, identity_sae(16), tokens, HookSite(0, "attn_out"), variant="Pretrained")
    assert rep.mse == 0 and rep.explained_variance == 1 and rep.frac_alive <= 1
    rep.save(tmp_path / "r.json")
    raw = json.loads((tmp_path / "r.json").read_text())
    assert all(not isinstance(v, (dict, list)) for v in raw.values())
    assert CoreReport.load(tmp_path / "r.json") == rep
    assert "kl_div_score" in CoreReport.metric_names()
