"""Attention reranker and polar refinement heads, plus parameter files."""

import math

import numpy as np
import pytest

from retrack.exceptions import LabelParseError, NoProposalsError, ValidationError
from retrack.geometry import BBox, FrameDims, polar_update
from retrack.model import (
    G_DIM,
    RefineParams,
    init_params,
    init_refine,
    init_rerank,
    load_params,
    max_step,
    refine_backward,
    refine_forward,
    rerank_argmax,
    rerank_backward,
    rerank_forward,
    save_params,
)

D_EMB = 16


def small_rerank(seed=0):
    return init_rerank(np.random.default_rng(seed), d_emb=D_EMB, n_heads=2, d_k=4)


def random_cands(rng, k):
    return rng.normal(size=(k, D_EMB))


class TestRerankForward:
    def test_single_candidate(self):
        rng = np.random.default_rng(70)
        logits, _ = rerank_forward(rng.normal(size=D_EMB), random_cands(rng, 1), small_rerank())
        assert logits.shape == (1,)
        assert np.isfinite(logits[0])
        assert rerank_argmax(logits) == 0

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(71)
        params = small_rerank()
        f_ref = rng.normal(size=D_EMB)
        cands = random_cands(rng, 6)
        logits, _ = rerank_forward(f_ref, cands, params)
        perm = rng.permutation(6)
        permuted, _ = rerank_forward(f_ref, cands[perm], params)
        assert np.allclose(permuted, logits[perm], atol=1e-12)

    def test_identical_candidates_share_logits(self):
        rng = np.random.default_rng(72)
        params = small_rerank()
        one = rng.normal(size=D_EMB)
        cands = np.tile(one, (4, 1))
        logits, _ = rerank_forward(rng.normal(size=D_EMB), cands, params)
        assert np.allclose(logits, logits[0], atol=1e-12)

    def test_masked_candidates_get_neg_inf(self):
        rng = np.random.default_rng(73)
        params = small_rerank()
        cands = random_cands(rng, 5)
        valid = np.array([True, False, True, True, False])
        logits, cache = rerank_forward(rng.normal(size=D_EMB), cands, params, valid)
        assert np.all(np.isneginf(logits[~valid]))
        assert np.all(np.isfinite(logits[valid]))
        assert np.all(cache.alpha[:, ~valid] == 0.0)
        assert np.allclose(cache.alpha.sum(axis=1), 1.0, atol=1e-12)

    def test_masked_candidate_cannot_influence_valid_logits(self):
        rng = np.random.default_rng(74)
        params = small_rerank()
        f_ref = rng.normal(size=D_EMB)
        cands = random_cands(rng, 4)
        valid = np.array([True, True, False, True])
        base, _ = rerank_forward(f_ref, cands, params, valid)
        tampered = cands.copy()
        tampered[2] = rng.normal(size=D_EMB) * 10.0
        other, _ = rerank_forward(f_ref, tampered, params, valid)
        assert np.array_equal(base[valid], other[valid])

    def test_all_masked_raises(self):
        rng = np.random.default_rng(75)
        with pytest.raises(NoProposalsError):
            rerank_forward(
                rng.normal(size=D_EMB),
                random_cands(rng, 3),
                small_rerank(),
                np.zeros(3, dtype=bool),
            )

    def test_shape_validation(self):
        rng = np.random.default_rng(76)
        params = small_rerank()
        with pytest.raises(ValidationError):
            rerank_forward(rng.normal(size=D_EMB), rng.normal(size=(3, D_EMB + 1)), params)
        with pytest.raises(ValidationError):
            rerank_forward(
                rng.normal(size=D_EMB),
                random_cands(rng, 3),
                params,
                np.ones(4, dtype=bool),
            )


class TestRerankArgmax:
    def test_tie_breaks_low_index(self):
        assert rerank_argmax(np.array([0.5, 0.5, 0.1])) == 0

    def test_shift_invariance(self):
        rng = np.random.default_rng(77)
        logits = rng.normal(size=8)
        assert rerank_argmax(logits) == rerank_argmax(logits + 123.456)

    def test_ignores_neg_inf(self):
        logits = np.array([-np.inf, 0.2, 0.9, -np.inf])
        assert rerank_argmax(logits) == 2

    def test_all_neg_inf_raises(self):
        with pytest.raises(NoProposalsError):
            rerank_argmax(np.full(3, -np.inf))


class TestRerankBackward:
    def test_masked_candidates_get_zero_gradient(self):
        rng = np.random.default_rng(78)
        params = small_rerank()
        cands = random_cands(rng, 5)
        valid = np.array([True, False, True, True, False])
        _, cache = rerank_forward(rng.normal(size=D_EMB), cands, params, valid)
        _, _, d_cands = rerank_backward(cache, params, rng.normal(size=5))
        assert np.all(d_cands[~valid] == 0.0)
        assert np.any(d_cands[valid] != 0.0)

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(79)
        params = small_rerank()
        f_ref = rng.normal(size=D_EMB)
        cands = random_cands(rng, 4)
        upstream = rng.normal(size=4)
        _, cache = rerank_forward(f_ref, cands, params)
        grads, d_fref, d_cands = rerank_backward(cache, params, upstream)

        def objective():
            logits, _ = rerank_forward(f_ref, cands, params)
            return float(upstream @ logits)

        eps = 1e-6
        for name, index in (("w_q", (1, 2, 3)), ("w_o", (5, 4)), ("w_s", (7,))):
            arr = getattr(params, name)
            arr[index] += eps
            plus = objective()
            arr[index] -= 2 * eps
            minus = objective()
            arr[index] += eps
            assert grads[name][index] == pytest.approx(
                (plus - minus) / (2 * eps), abs=1e-6
            )
        f_ref[3] += eps
        plus = objective()
        f_ref[3] -= 2 * eps
        minus = objective()
        f_ref[3] += eps
        assert d_fref[3] == pytest.approx((plus - minus) / (2 * eps), abs=1e-6)
        cands[2, 5] += eps
        plus = objective()
        cands[2, 5] -= 2 * eps
        minus = objective()
        cands[2, 5] += eps
        assert d_cands[2, 5] == pytest.approx((plus - minus) / (2 * eps), abs=1e-6)


class TestRefineForward:
    DIMS = FrameDims(256, 144)

    def zero_params(self, hidden=8):
        return RefineParams(
            w1=np.zeros((hidden, D_EMB + G_DIM)),
            b1=np.zeros(hidden),
            w2=np.zeros((4, hidden)),
            b2=np.zeros(4),
        )

    def test_zero_network_is_half_range_step(self):
        rng = np.random.default_rng(80)
        base = BBox(100.0, 70.0, 30.0, 20.0)
        corr, refined, cache = refine_forward(
            rng.normal(size=D_EMB), rng.normal(size=G_DIM), base, self.zero_params(), self.DIMS
        )
        assert corr.theta == 0.0
        assert corr.step == pytest.approx(0.5 * max_step(self.DIMS), abs=1e-12)
        assert corr.scale_w == 1.0 and corr.scale_h == 1.0
        assert refined == polar_update(base, corr, self.DIMS)
        assert cache.sig_d == 0.5

    def test_step_and_scale_bounds(self):
        dims = self.DIMS
        base = BBox(128.0, 72.0, 24.0, 18.0)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            params = init_refine(rng, D_EMB, hidden=8)
            corr, _, _ = refine_forward(
                rng.normal(size=D_EMB) * 3.0,
                rng.normal(size=G_DIM) * 3.0,
                base,
                params,
                dims,
            )
            assert 0.0 <= corr.step <= max_step(dims)
            assert 0.5 <= corr.scale_w <= 2.0
            assert 0.5 <= corr.scale_h <= 2.0

    def test_forward_applies_polar_update_exactly(self):
        rng = np.random.default_rng(81)
        params = init_refine(rng, D_EMB, hidden=8)
        base = BBox(60.0, 90.0, 22.0, 16.0)
        corr, refined, _ = refine_forward(
            rng.normal(size=D_EMB), rng.normal(size=G_DIM), base, params, self.DIMS
        )
        assert refined == polar_update(base, corr, self.DIMS)

    def test_scale_saturates_at_doubling(self):
        params = self.zero_params()
        params.b2 = np.array([0.0, 0.0, 5.0, -5.0])
        corr, _, _ = refine_forward(
            np.zeros(D_EMB), np.zeros(G_DIM), BBox(100.0, 70.0, 30.0, 20.0), params, self.DIMS
        )
        assert corr.scale_w == pytest.approx(2.0, abs=1e-12)
        assert corr.scale_h == pytest.approx(0.5, abs=1e-12)

    def test_saturated_scale_blocks_gradient(self):
        params = self.zero_params()
        params.b2 = np.array([0.0, 0.0, 5.0, 0.1])
        _, _, cache = refine_forward(
            np.zeros(D_EMB), np.zeros(G_DIM), BBox(100.0, 70.0, 30.0, 20.0), params, self.DIMS
        )
        grads, _, _ = refine_backward(cache, params, np.array([0.0, 0.0, 1.0, 1.0]))
        assert grads["b2"][2] == 0.0
        assert grads["b2"][3] != 0.0

    def test_descriptor_length_checked(self):
        with pytest.raises(ValidationError):
            refine_forward(
                np.zeros(D_EMB),
                np.zeros(G_DIM + 1),
                BBox(100.0, 70.0, 30.0, 20.0),
                self.zero_params(),
                self.DIMS,
            )

    def test_max_step_is_tenth_of_diagonal(self):
        assert max_step(FrameDims(960, 540)) == pytest.approx(
            0.1 * math.hypot(960, 540), abs=1e-12
        )

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(82)
        params = init_refine(rng, D_EMB, hidden=8)
        f_sel = rng.normal(size=D_EMB)
        g = rng.normal(size=G_DIM)
        base = BBox(120.0, 60.0, 26.0, 14.0)
        upstream = rng.normal(size=4)
        _, _, cache = refine_forward(f_sel, g, base, params, self.DIMS)
        grads, d_f, d_g = refine_backward(cache, params, upstream)

        def objective():
            _, refined, _ = refine_forward(f_sel, g, base, params, self.DIMS)
            return float(upstream @ refined.as_array())

        eps = 1e-6
        for name, index in (("w2", (1, 3)), ("w1", (2, 5)), ("b1", (0,))):
            arr = getattr(params, name)
            arr[index] += eps
            plus = objective()
            arr[index] -= 2 * eps
            minus = objective()
            arr[index] += eps
            assert grads[name][index] == pytest.approx(
                (plus - minus) / (2 * eps), abs=1e-5
            )
        g[4] += eps
        plus = objective()
        g[4] -= 2 * eps
        minus = objective()
        g[4] += eps
        assert d_g[4] == pytest.approx((plus - minus) / (2 * eps), abs=1e-5)


class TestParamsSerialization:
    def test_round_trip_is_float32_exact(self, tmp_path):
        params = init_params(11, d_emb=16, n_heads=2, d_k=4, hidden=8, pool=3)
        path = tmp_path / "params.bin"
        save_params(params, path, seed=11)
        loaded = load_params(path)
        originals = dict(params.items())
        for name, arr in loaded.items():
            assert np.array_equal(
                arr.astype(np.float32), originals[name].astype(np.float32)
            ), name
        assert loaded.rerank.n_heads == 2
        assert loaded.proj.pool == 3
        assert np.array_equal(loaded.proj.posenc, params.proj.posenc)

    def test_loaded_params_reproduce_logits(self, tmp_path):
        rng = np.random.default_rng(83)
        params = init_params(12, d_emb=16, n_heads=2, d_k=4, hidden=8, pool=3)
        path = tmp_path / "params.bin"
        save_params(params, path)
        loaded = load_params(path)
        f_ref = rng.normal(size=16)
        cands = rng.normal(size=(5, 16))
        a, _ = rerank_forward(f_ref, cands, params.rerank)
        b, _ = rerank_forward(f_ref, cands, loaded.rerank)
        assert np.allclose(a, b, atol=1e-5)

    def test_missing_manifest_raises(self, tmp_path):
        path = tmp_path / "params.bin"
        path.write_bytes(b"\x00" * 16)
        with pytest.raises(LabelParseError):
            load_params(path)

    def test_wrong_version_raises(self, tmp_path):
        params = init_params(13, d_emb=16, n_heads=2, d_k=4, hidden=8, pool=3)
        path = tmp_path / "params.bin"
        save_params(params, path)
        manifest = path.with_name("params.bin.json")
        manifest.write_text(manifest.read_text().replace('"format_version": 1', '"format_version": 99'))
        with pytest.raises(LabelParseError):
            load_params(path)

    def test_truncated_file_raises(self, tmp_path):
        params = init_params(14, d_emb=16, n_heads=2, d_k=4, hidden=8, pool=3)
        path = tmp_path / "params.bin"
        save_params(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(LabelParseError):
            load_params(path)

    def test_items_order_is_stable(self):
        params = init_params(15, d_emb=16, n_heads=2, d_k=4, hidden=8, pool=3)
        names = [name for name, _ in params.items()]
        assert names == [
            "proj.3",
            "proj.4",
            "proj.5",
            "rerank.w_q",
            "rerank.w_k",
            "rerank.w_v",
            "rerank.w_o",
            "rerank.w_s",
            "rerank.b_s",
            "refine.w1",
            "refine.b1",
            "refine.w2",
            "refine.b2",
        ]
