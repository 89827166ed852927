import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drdiff.moe import (
    ExpertParams,
    LoadStats,
    RouterParams,
    expert_forward,
    init_expert,
    load_balance_loss,
    load_stats,
    moe_forward,
    moe_layer_backward,
    moe_layer_forward,
    route,
    topk_gate,
)
from drdiff.numerics import Rng, gaussian, softmax
from oracles import central_difference


def router(rng, d, M):
    return RouterParams(W_gate=rng.normal((d, M)), b_gate=rng.normal(M))


def experts(rng, d, d_ff, caps):
    return [init_expert(rng, d, d_ff, c) for c in caps]


class TestRoute:
    def test_zero_weights_give_bias(self):
        p = RouterParams(np.zeros((3, 2)), np.array([1.0, 2.0]))
        assert route(np.array([5.0, -1.0, 2.0]), p).tolist() == [1.0, 2.0]

    def test_zero_input_gives_bias(self):
        p = router(Rng(0), 3, 4)
        assert np.array_equal(route(np.zeros(3), p), p.b_gate)

    def test_matches_matvec(self):
        rng = Rng(1)
        p = router(rng, 5, 4)
        h = rng.normal(5)
        expected = [sum(h[a] * p.W_gate[a, j] for a in range(5)) + p.b_gate[j] for j in range(4)]
        np.testing.assert_allclose(route(h, p), expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            route(np.zeros(4), router(Rng(0), 3, 2))


class TestTopkGate:
    def test_two_of_four(self):
        w = topk_gate([2.0, 1.0, 0.0, -1.0], 2).weights
        e2, e1 = math.exp(2), math.exp(1)
        np.testing.assert_allclose(w, [e2 / (e2 + e1), e1 / (e2 + e1), 0, 0], rtol=1e-15)
        np.testing.assert_allclose(w, [0.7311, 0.2689, 0, 0], atol=5e-5)

    def test_k_equals_m_is_full_softmax(self):
        s = np.array([0.3, -1.0, 2.0])
        np.testing.assert_allclose(topk_gate(s, 3).weights, softmax(s), atol=1e-15)

    def test_ties_go_to_lower_index(self):
        g = topk_gate(np.zeros(4), 2)
        assert g.weights.tolist() == [0.5, 0.5, 0.0, 0.0]
        assert sorted(g.topk.tolist()) == [0, 1]

    @pytest.mark.parametrize("k", [0, 5])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            topk_gate(np.zeros(4), k)

    @settings(max_examples=80)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=9), st.data())
    def test_gating_invariants(self, logits, data):
        M = len(logits)
        k = data.draw(st.integers(1, M))
        c = data.draw(st.floats(-50, 50))
        g = topk_gate(logits, k)
        nz = np.flatnonzero(g.weights)
        assert nz.size == k
        assert set(nz.tolist()) == set(g.topk.tolist())
        assert abs(g.weights.sum() - 1.0) <= 1e-12
        assert np.all((g.weights[nz] > 0) & (g.weights[nz] <= 1))
        shifted = topk_gate(np.asarray(logits) + c, k)
        np.testing.assert_allclose(shifted.weights, g.weights, atol=1e-12)


class TestExpert:
    def test_zero_params_give_bias(self):
        e = ExpertParams(np.zeros((3, 4)), np.zeros(4), np.zeros((4, 3)), np.array([1.0, -2.0, 0.5]))
        assert expert_forward(np.ones(3), e).tolist() == [1.0, -2.0, 0.5]

    def test_negative_preactivation_gives_bias(self):
        rng = Rng(0)
        e = init_expert(rng, 3, 4)
        e.W1 = np.zeros((3, 4))
        e.b1 = -np.ones(4)
        e.b2 = rng.normal(3)
        assert np.array_equal(expert_forward(rng.normal(3), e), e.b2)

    def test_matches_two_step_oracle(self):
        rng = Rng(2)
        e = init_expert(rng, 5, 6)
        e.b1, e.b2 = rng.normal(6), rng.normal(5)
        h = rng.normal(5)
        hidden = [max(0.0, sum(h[a] * e.W1[a, m] for a in range(5)) + e.b1[m]) for m in range(6)]
        expected = [sum(hidden[m] * e.W2[m, b] for m in range(6)) + e.b2[b] for b in range(5)]
        np.testing.assert_allclose(expert_forward(h, e), expected, atol=1e-12)

    def test_half_capacity_width(self):
        e = init_expert(Rng(0), 4, 10, 0.5)
        assert e.W1.shape == (4, 5) and e.W2.shape == (5, 4)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            expert_forward(np.zeros(2), init_expert(Rng(0), 3, 4))


class TestMoEForward:
    def test_single_expert_is_plain_ffn(self):
        rng = Rng(0)
        es = experts(rng, 4, 8, [1.0])
        h = rng.normal(4)
        out, g = moe_forward(h, router(rng, 4, 1), es, 1)
        assert np.array_equal(out, expert_forward(h, es[0]))
        assert g.weights.tolist() == [1.0]

    def test_identical_experts_collapse(self):
        rng = Rng(1)
        e = init_expert(rng, 4, 8)
        h = rng.normal(4)
        out, _ = moe_forward(h, router(rng, 4, 2), [e, e], 2)
        np.testing.assert_allclose(out, expert_forward(h, e), atol=1e-14)

    def test_matches_masked_dense_oracle(self):
        rng = Rng(2)
        p = router(rng, 6, 4)
        es = experts(rng, 6, 8, [1.0, 0.5, 1.0, 0.5])
        H = gaussian(rng, 20, 6)
        out, g = moe_forward(H, p, es, 2)
        all_out = np.stack([expert_forward(H, e) for e in es], axis=1)  # n, M, d
        logits = H @ p.W_gate + p.b_gate
        keep = np.zeros_like(logits, dtype=bool)
        top = np.argsort(-logits, axis=1)[:, :2]
        np.put_along_axis(keep, top, True, axis=1)
        w = np.where(keep, np.exp(logits - logits.max(axis=1, keepdims=True)), 0.0)
        w /= w.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out, np.einsum("nm,nmd->nd", w, all_out), atol=1e-12)

    def test_only_selected_experts_run(self):
        """Each token costs exactly k expert evaluations, all of them in its top-k."""
        rng = Rng(3)
        p = router(rng, 5, 4)
        es = experts(rng, 5, 6, [1.0] * 4)
        H = gaussian(rng, 50, 5)
        counter = Counter()
        _, g = moe_forward(H, p, es, 2, counter=counter)
        assert sum(counter.values()) == 50 * 2
        assert dict(counter) == {j: int((g.topk == j).sum()) for j in range(4) if (g.topk == j).any()}

    def test_unselected_expert_is_never_touched(self):
        rng = Rng(4)
        p = RouterParams(np.zeros((3, 3)), np.array([5.0, 4.0, -10.0]))
        es = experts(rng, 3, 4, [1.0] * 3)
        es[2].W1 = np.full((3, 4), np.nan)
        counter = Counter()
        out, _ = moe_forward(gaussian(rng, 7, 3), p, es, 2, counter=counter)
        assert np.all(np.isfinite(out))
        assert counter[2] == 0

    def test_errors(self):
        rng = Rng(0)
        with pytest.raises(ValueError):
            moe_forward(np.zeros(3), router(rng, 3, 2), [], 1)
        with pytest.raises(ValueError):
            moe_forward(np.zeros(3), router(rng, 3, 2), experts(rng, 3, 4, [1.0] * 3), 1)


class TestLoadBalance:
    @pytest.mark.parametrize("M", [1, 4, 7])
    def test_uniform_gives_lambda(self, M):
        u = np.full(M, 1 / M)
        assert load_balance_loss(LoadStats(u, u, 0.01)) == pytest.approx(0.01, rel=1e-14)

    def test_collapsed_gives_lambda_times_m(self):
        e1 = np.eye(4)[0]
        assert load_balance_loss(LoadStats(e1, e1, 0.01)) == pytest.approx(0.04, rel=1e-14)

    def test_matches_brute_force_tally(self):
        rng = Rng(5)
        p = router(rng, 6, 4)
        H = gaussian(rng, 64, 6)
        g = topk_gate(route(H, p), 2)
        probs = softmax(g.logits, axis=1)
        stats = load_stats(g.topk, probs, 0.01)
        counts = [0] * 4
        psum = [0.0] * 4
        for t in range(64):
            for j in g.topk[t]:
                counts[j] += 1
            for j in range(4):
                psum[j] += probs[t, j]
        f = [c / (64 * 2) for c in counts]
        P = [s / 64 for s in psum]
        np.testing.assert_allclose(stats.f, f, atol=1e-15)
        np.testing.assert_allclose(stats.P, P, atol=1e-14)
        assert abs(stats.P.sum() - 1) <= 1e-9 and abs(stats.f.sum() - 1) <= 1e-15
        assert load_balance_loss(stats) == pytest.approx(0.01 * 4 * sum(a * b for a, b in zip(f, P)), rel=1e-12)

    def test_uniform_minimises_when_f_tracks_p(self):
        rng = np.random.default_rng(0)
        best = load_balance_loss(LoadStats(np.full(4, 0.25), np.full(4, 0.25), 0.01))
        for _ in range(1000):
            q = rng.dirichlet(np.ones(4))
            assert load_balance_loss(LoadStats(q, q, 0.01)) >= best - 1e-15


class TestLayerGradients:
    @staticmethod
    def _setup(seed=6, n=12, d=4, M=4, k=2):
        rng = Rng(seed)
        p = router(rng, d, M)
        es = experts(rng, d, 6, [1.0, 0.5, 1.0, 0.5])
        for e in es:
            e.b1 = 0.1 * rng.normal(e.b1.shape[0])
        x = gaussian(rng, n, d)
        W = gaussian(rng, n, d)
        return p, es, x, W, k

    def test_expert_and_router_gradients(self):
        p, es, x, W, k = self._setup()
        lam = 0.05
        rx = x.copy()

        def loss():
            y, c = moe_layer_forward(x, p, es, k, router_x=rx)
            st = load_stats(c["gating"].topk, c["probs"], lam)
            return float(np.sum(W * y)) + load_balance_loss(st), c, st

        _, cache, st = loss()
        M, N = p.n_experts, x.shape[0]
        aux = lam * M * st.f / N
        _, grads = moe_layer_backward(W, cache, p, es, aux_coef=aux)
        for name in ("W_gate", "b_gate"):
            arr = getattr(p, name)
            num = central_difference(lambda v: (setattr(p, name, v), loss()[0])[1], arr.copy(), h=1e-6)
            setattr(p, name, arr)
            np.testing.assert_allclose(grads[name], num, atol=1e-6)
        for j, e in enumerate(es):
            for name in ("W1", "b1", "W2", "b2"):
                arr = getattr(e, name)
                num = central_difference(lambda v: (setattr(e, name, v), loss()[0])[1], arr.copy(), h=1e-6)
                setattr(e, name, arr)
                np.testing.assert_allclose(grads[(j, name)], num, atol=1e-6)

    def test_input_gradient_skips_router(self):
        p, es, x, W, k = self._setup(seed=7)
        rx = x.copy()
        y, cache = moe_layer_forward(x, p, es, k, router_x=rx)
        dx, _ = moe_layer_backward(W, cache, p, es)
        num = central_difference(lambda v: float(np.sum(W * moe_layer_forward(v, p, es, k, router_x=rx)[0])),
                                 x.copy(), h=1e-6)
        np.testing.assert_allclose(dx, num, atol=1e-6)
        assert np.max(np.abs(dx)) > 1e-3

    def test_router_path_contributes_nothing_to_input(self):
        """With zeroed experts only the router carries signal, yet dx is exactly zero."""
        p, es, x, W, k = self._setup(seed=8)
        for e in es:
            for name in ("W1", "b1", "W2", "b2"):
                setattr(e, name, np.zeros_like(getattr(e, name)))
        y, cache = moe_layer_forward(x, p, es, k)
        dx, grads = moe_layer_backward(W, cache, p, es, aux_coef=np.array([0.3, -0.1, 0.2, 0.05]))
        assert np.all(dx == 0.0)
        assert np.max(np.abs(grads["W_gate"])) > 1e-6

    def test_unrouted_expert_gets_zero_gradient(self):
        p, es, x, W, k = self._setup(seed=9)
        p.W_gate = np.zeros_like(p.W_gate)
        p.b_gate = np.array([3.0, 2.0, -5.0, -6.0])
        y, cache = moe_layer_forward(x, p, es, k)
        _, grads = moe_layer_backward(W, cache, p, es)
        for j in (2, 3):
            for name in ("W1", "b1", "W2", "b2"):
                assert np.all(grads[(j, name)] == 0.0)
        assert np.max(np.abs(grads[(0, "W2")])) > 0
