import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drdiff.attention import (
    HybridMixParams,
    attention_backward,
    attention_forward,
    attention_weights,
    flop_account,
    hybrid_attention_backward,
    hybrid_attention_forward,
    hybrid_mix,
    masked_attention,
    membership,
)
from drdiff.hsa import AttentionMask, HSAConfig, build_hsa_mask, from_dense, hsa_parts, mask_dense, mask_local
from drdiff.numerics import Rng, gaussian
from oracles import central_difference, dense_attention


def qkv(n, d, seed=0):
    rng = Rng(seed)
    return gaussian(rng, n, d), gaussian(rng, n, d), gaussian(rng, n, d)


def random_mask(n, rng, p=0.3):
    grid = rng.uniform(size=(n, n)) < p
    grid |= np.eye(n, dtype=bool)
    return from_dense(grid), grid


class TestMaskedAttention:
    @pytest.mark.parametrize("n", [1, 7, 64])
    def test_dense_mask_matches_oracle(self, n):
        Q, K, V = qkv(n, 4, n)
        out = masked_attention(Q, K, V, mask_dense(n))
        assert np.max(np.abs(out - dense_attention(Q, K, V, np.ones((n, n), bool)))) <= 1e-12

    def test_identity_mask_copies_values(self):
        Q, K, V = qkv(9, 3)
        assert np.array_equal(masked_attention(Q, K, V, mask_local(9, 0)), V)

    def test_zero_keys_average_values(self):
        Q, _, V = qkv(12, 4)
        mask = mask_local(12, 2)
        out = masked_attention(Q, np.zeros_like(Q), V, mask)
        for i in range(12):
            np.testing.assert_allclose(out[i], V[mask.row(i)].mean(axis=0), atol=1e-14)

    def test_weights_sum_to_one_per_row(self):
        Q, K, _ = qkv(30, 4)
        mask = build_hsa_mask(HSAConfig(n1=4, n2=20, n3=25, w4k=2, w8k=6, stride_s=1, w16k=6, s_meta=2), 30, 0)
        p = attention_weights(Q, K, mask)
        np.testing.assert_allclose(np.add.reduceat(p, mask.indptr[:-1]), 1.0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 120), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_random_masks_match_oracle(self, n, d, seed):
        rng = Rng(seed)
        mask, grid = random_mask(n, rng)
        Q, K, V = (gaussian(rng, n, d) for _ in range(3))
        assert np.max(np.abs(masked_attention(Q, K, V, mask) - dense_attention(Q, K, V, grid))) <= 1e-10

    def test_row_storage_order_does_not_matter(self):
        rng = Rng(5)
        mask, _ = random_mask(25, rng, 0.4)
        perm = mask.indices.copy()
        for i in range(mask.n):
            lo, hi = mask.indptr[i], mask.indptr[i + 1]
            perm[lo:hi] = perm[lo:hi][::-1]
        shuffled = AttentionMask(mask.n, mask.indptr, perm, mask.mode)
        Q, K, V = qkv(25, 5, 1)
        np.testing.assert_allclose(masked_attention(Q, K, V, shuffled), masked_attention(Q, K, V, mask),
                                   atol=1e-13)

    def test_shape_mismatch(self):
        Q, K, V = qkv(5, 3)
        with pytest.raises(ValueError):
            masked_attention(Q, K[:, :2], V, mask_dense(5))
        with pytest.raises(ValueError):
            masked_attention(Q, K, V, mask_dense(6))

    @staticmethod
    def _peak_bytes(n, d=8, w=3):
        Q, K, V = qkv(n, d)
        mask = mask_local(n, w)
        tracemalloc.start()
        masked_attention(Q, K, V, mask)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        return peak, 8 * (mask.nnz + n * d)

    def test_working_set_scales_with_nnz(self):
        """Peak allocation is a small multiple of (nnz + n*d) values and grows linearly in n."""
        peak, budget = self._peak_bytes(20_000)
        assert peak <= 4 * budget
        peak2, budget2 = self._peak_bytes(40_000)
        assert peak2 <= 4 * budget2
        assert peak2 / peak < 2.3


class TestGradients:
    def test_backward_matches_finite_differences(self):
        rng = Rng(2)
        mask, _ = random_mask(10, rng, 0.4)
        Q, K, V = (gaussian(rng, 10, 3) for _ in range(3))
        W = gaussian(rng, 10, 3)
        out, p = attention_forward(Q, K, V, mask)
        dQ, dK, dV = attention_backward(W, Q, K, V, mask, p)
        loss = lambda q, k, v: float(np.sum(W * masked_attention(q, k, v, mask)))  # noqa: E731
        np.testing.assert_allclose(dQ, central_difference(lambda x: loss(x, K, V), Q), atol=1e-8)
        np.testing.assert_allclose(dK, central_difference(lambda x: loss(Q, x, V), K), atol=1e-8)
        np.testing.assert_allclose(dV, central_difference(lambda x: loss(Q, K, x), V), atol=1e-8)

    def test_hybrid_backward_matches_finite_differences(self):
        cfg = HSAConfig(n1=4, n2=8, n3=12, w16k=6, s_meta=2, rho=0.2, anchor_cap=3)
        n = 20
        _, local, glob = hsa_parts(cfg, n, 0)
        mask = build_hsa_mask(cfg, n, 0)
        in_l, in_g = membership(mask, local), membership(mask, glob)
        rng = Rng(4)
        Q, K, V, W = (gaussian(rng, n, 2) for _ in range(4))
        beta = 0.3

        def loss(q, k, v, b):
            return float(np.sum(W * hybrid_attention_forward(q, k, v, mask, in_l, in_g, b)[0]))

        _, cache = hybrid_attention_forward(Q, K, V, mask, in_l, in_g, beta)
        dQ, dK, dV, db = hybrid_attention_backward(W, Q, K, V, mask, cache, beta)
        np.testing.assert_allclose(dQ, central_difference(lambda x: loss(x, K, V, beta), Q), atol=1e-8)
        np.testing.assert_allclose(dK, central_difference(lambda x: loss(Q, x, V, beta), K), atol=1e-8)
        np.testing.assert_allclose(dV, central_difference(lambda x: loss(Q, K, x, beta), V), atol=1e-8)
        num_b = (loss(Q, K, V, beta + 1e-6) - loss(Q, K, V, beta - 1e-6)) / 2e-6
        assert db == pytest.approx(num_b, abs=1e-7)


class TestHybrid:
    def test_diagonal_gets_even_split(self):
        # off-diagonal entry has equal local/global weight, so only the diagonal alpha matters
        loc, glb = np.array([0.6, 0.4]), np.array([0.2, 0.4])
        i, j = np.array([0, 0]), np.array([0, 1])
        for beta in (-3.0, 0.0, 5.0):
            out = hybrid_mix(loc, glb, i, j, HybridMixParams(beta))
            np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)

    def test_zero_beta_is_plain_average(self):
        loc = np.array([[0.6, 0.4], [0.3, 0.7]])
        glb = np.array([[0.2, 0.8], [0.5, 0.5]])
        np.testing.assert_allclose(hybrid_mix(loc, glb, None, None, HybridMixParams(0.0)), (loc + glb) / 2,
                                   atol=1e-15)

    def test_large_beta_follows_local_weights_ahead(self):
        alpha = 1.0 / (1.0 + math.exp(-30.0))
        assert 1 - alpha == pytest.approx(9.4e-14, rel=0.01)
        loc, glb = np.array([0.9]), np.array([0.1])
        raw = alpha * 0.9 + (1 - alpha) * 0.1
        out = hybrid_mix(loc, glb, np.array([0]), np.array([3]), HybridMixParams(10.0))
        assert out[0] == pytest.approx(raw / raw)
        assert raw == pytest.approx(0.9, abs=1e-12)

    def test_mismatched_supports(self):
        with pytest.raises(ValueError):
            hybrid_mix(np.ones(3), np.ones(2), [0, 0, 0], [0, 1, 2], HybridMixParams())

    def test_forward_matches_dense_formula(self):
        cfg = HSAConfig(n1=4, n2=8, n3=12, w16k=6, s_meta=2, rho=0.2, anchor_cap=3)
        n, d = 18, 3
        _, local, glob = hsa_parts(cfg, n, 0)
        mask = build_hsa_mask(cfg, n, 0)
        Q, K, V = qkv(n, d, 8)
        beta = -0.7
        out, _ = hybrid_attention_forward(Q, K, V, mask, membership(mask, local), membership(mask, glob), beta)
        s = Q @ K.T / math.sqrt(d)

        def sm(allowed):
            e = np.where(allowed, np.exp(s - s.max(axis=1, keepdims=True)), 0.0)
            return e / e.sum(axis=1, keepdims=True)

        a_loc, a_glb = sm(local.to_dense()), sm(glob.to_dense())
        i, j = np.indices((n, n))
        alpha = 1 / (1 + np.exp(-beta * (j - i)))
        mix = alpha * a_loc + (1 - alpha) * a_glb
        mix /= mix.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out, mix @ V, atol=1e-12)

    def test_membership_flags(self):
        union = mask_local(5, 1)
        part = mask_local(5, 0)
        flags = membership(union, part)
        rows = union.row_ids()
        assert np.array_equal(flags, rows == union.indices)


class TestFlops:
    def test_identity_count(self):
        assert flop_account(mask_local(8, 0), 8, 1) == 2176

    def test_dense_vs_sparse_ratio(self):
        n = 16384
        sparse = build_hsa_mask(HSAConfig(), n, 0)
        d, h = 32, 2
        proj = 4 * n * d * d
        dense_attn = 2 * n * n * (d // h) * h
        sparse_attn = flop_account(sparse, d, h) - proj
        assert dense_attn / sparse_attn == pytest.approx(n / (sparse.nnz / n), rel=1e-12)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            flop_account(mask_local(4, 0), 10, 3)
