import math
from collections import Counter

import numpy as np
import pytest

from drdiff.denoiser import (
    AnchorSpec,
    DenoiserParams,
    ModelConfig,
    OptimConfig,
    backward,
    batch_loss_and_grads,
    forward,
    init_params,
    init_state,
    load_checkpoint,
    model_flops,
    random_batch,
    round_to_tokens,
    save_checkpoint,
    time_encoding,
    train_step,
)
from drdiff.diffusion import LatentSeq, build_anchor_targets, make_schedule
from drdiff.hsa import HSAConfig
from drdiff.numerics import Rng, gaussian, grad_check

SCHED = make_schedule("sqrt", 200)
SMALL_HSA = HSAConfig(n1=4, n2=8, n3=12, w4k=2, w8k=4, stride_s=1, w16k=4, s_meta=2, rho=0.2, anchor_cap=3)


def tiny(**kw):
    base = dict(vocab=16, d=8, layers=2, heads=2, d_ff=8, n_experts=2, k=1, capacities=(1.0, 0.5))
    base.update(kw)
    return ModelConfig(**base)


def make_batch(cfg, n, seed=0, items=1):
    rng = Rng(seed)
    return [(gaussian(rng, n, cfg.d), int(rng.integers(20, 180)), gaussian(rng, n, cfg.d)) for _ in range(items)]


def full_grad_error(params, batch, anchor_sets, lam=0.05, h=1e-5):
    """Worst relative error over every trainable tensor, router inputs frozen."""
    _, grads, ri = batch_loss_and_grads(params, batch, SCHED, anchor_sets, lam)
    worst = 0.0
    for name in params.trainable():
        def f(_):
            return batch_loss_and_grads(params, batch, SCHED, anchor_sets, lam, router_inputs=ri,
                                        need_grads=False)[0]["loss"]
        worst = max(worst, grad_check(f, grads[name], params.tensors[name], h=h))
    return worst, grads


class TestForward:
    def test_hand_composed_affine_case(self):
        cfg = ModelConfig(vocab=4, d=2, layers=1, heads=1, d_ff=2, n_experts=2, k=1)
        params = init_params(cfg, Rng(0))
        for name, v in params.tensors.items():
            if not (name.startswith("phi.") or name.endswith("router_w") or name.endswith("_g")):
                v[...] = 0.0
        params.tensors["head_w"][...] = np.eye(2)
        params.tensors["t_b"][...] = [0.5, -1.0]
        params.tensors["head_b"][...] = [2.0, 3.0]
        z = np.array([[1.0, 2.0], [-3.0, 0.25]])
        # attention and experts contribute zero, so eps = (z + t_b) @ I + head_b
        expected = np.array([[3.5, 4.0], [-0.5, 2.25]])
        np.testing.assert_array_equal(forward(params, z, 7), expected)
        params.tensors["head_w"][...] = [[2.0, 0.0], [1.0, -1.0]]
        np.testing.assert_allclose(forward(params, z, 7), (z + [0.5, -1.0]) @ [[2.0, 0.0], [1.0, -1.0]] + [2, 3],
                                   atol=1e-15)

    def test_deterministic(self):
        cfg = tiny()
        params = init_params(cfg, Rng(1))
        z = gaussian(Rng(2), 10, 8)
        assert np.array_equal(forward(params, z, 50), forward(params, LatentSeq(z, 50)))

    def test_expert_relabeling_invariance(self):
        cfg = tiny(n_experts=3, k=2, capacities=(1.0, 0.5, 0.25))
        params = init_params(cfg, Rng(3))
        perm = [2, 0, 1]
        cfg2 = tiny(n_experts=3, k=2, capacities=tuple(cfg.capacities[p] for p in perm))
        t2 = {k: v.copy() for k, v in params.tensors.items()}
        for l in range(cfg.layers):
            t2[f"L{l}.router_w"] = params[f"L{l}.router_w"][:, perm].copy()
            t2[f"L{l}.router_b"] = params[f"L{l}.router_b"][perm].copy()
            for new, old in enumerate(perm):
                for p in ("w1", "b1", "w2", "b2"):
                    t2[f"L{l}.e{new}.{p}"] = params[f"L{l}.e{old}.{p}"].copy()
        z = gaussian(Rng(4), 9, 8)
        np.testing.assert_allclose(forward(DenoiserParams(cfg2, t2), z, 30), forward(params, z, 30), atol=1e-12)

    def test_only_routed_experts_run(self):
        cfg = tiny(n_experts=4, k=2, capacities=None)
        params = init_params(cfg, Rng(5))
        counter = Counter()
        forward(params, gaussian(Rng(6), 12, 8), 10, counter=counter)
        for l in range(cfg.layers):
            assert sum(v for (layer, _), v in counter.items() if layer == l) == 12 * 2

    def test_mode_follows_length(self):
        cfg = tiny(hsa=SMALL_HSA)
        params = init_params(cfg, Rng(0))
        for n, mode in [(3, "dense"), (6, "4k"), (10, "8k"), (15, "16k+")]:
            _, cache = forward(params, gaussian(Rng(n), n, 8), 5, return_cache=True)
            assert cache["layers"][0]["plan"]["mode"] == mode

    def test_fixed_window_overrides_hsa(self):
        cfg = tiny(hsa=SMALL_HSA, fixed_window=1)
        params = init_params(cfg, Rng(0))
        _, cache = forward(params, gaussian(Rng(1), 15, 8), 5, return_cache=True)
        plan = cache["layers"][1]["plan"]
        assert plan["mode"] == "local" and plan["mask"].nnz == 15 * 3 - 2

    def test_shape_errors(self):
        params = init_params(tiny(), Rng(0))
        with pytest.raises(ValueError):
            forward(params, np.zeros((4, 6)), 3)
        with pytest.raises(ValueError):
            forward(params, np.zeros((4, 8)))

    def test_time_encoding(self):
        enc = time_encoding(0, 6)
        assert enc.tolist() == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        assert time_encoding(3, 4)[0] == pytest.approx(math.sin(3.0))


class TestConfig:
    def test_default_capacities_alternate(self):
        assert ModelConfig(n_experts=4).capacities == (1.0, 0.5, 1.0, 0.5)

    @pytest.mark.parametrize("kw", [dict(d=9, heads=3), dict(d=6, heads=4), dict(k=3, n_experts=2),
                                    dict(capacities=(1.0,)), dict(fixed_window=-1)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_layers_extend_hsa(self):
        cfg = ModelConfig(layers=3, hsa=HSAConfig(layers_L=1))
        assert cfg.hsa.layers_L == 3

    def test_round_trip_dict(self):
        cfg = tiny(hsa=SMALL_HSA)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestGradients:
    @pytest.mark.parametrize("n", [3, 6, 10, 15])
    def test_full_model_every_mode(self, n):
        cfg = tiny(hsa=SMALL_HSA)
        params = init_params(cfg, Rng(n))
        for l in range(cfg.layers):
            params.tensors[f"L{l}.beta"][...] = 0.4
        batch = make_batch(cfg, n, seed=n)
        anchors = [build_anchor_targets(batch[0][0], SCHED, [50, 100], 2, Rng(9), 0.5)]
        worst, _ = full_grad_error(params, batch, anchors)
        assert worst <= 1e-4

    def test_fixed_window_model(self):
        cfg = tiny(hsa=SMALL_HSA, fixed_window=2)
        params = init_params(cfg, Rng(1))
        worst, _ = full_grad_error(params, make_batch(cfg, 9, seed=2, items=2), None)
        assert worst <= 1e-4

    def test_decision_net_gets_no_gradient(self):
        cfg = tiny(hsa=SMALL_HSA)
        params = init_params(cfg, Rng(2))
        _, grads, _ = batch_loss_and_grads(params, make_batch(cfg, 10), SCHED, None, 0.01)
        for name in ("phi.w1", "phi.b1", "phi.w2", "phi.b2", "embed"):
            assert np.all(grads[name] == 0.0)

    def test_router_does_not_feed_hidden_state(self):
        """With every expert zeroed, only the router path could carry signal back into z."""
        cfg = tiny(n_experts=2, k=1)
        params = init_params(cfg, Rng(3))
        for name, v in params.tensors.items():
            if ".e" in name:
                v[...] = 0.0
        z = gaussian(Rng(4), 6, 8)
        _, cache = forward(params, z, 40, return_cache=True)
        coefs = [np.array([0.3, -0.2])] * cfg.layers
        grads, dz = backward(params, cache, gaussian(Rng(5), 6, 8), aux_coefs=coefs)
        _, cache_noaux = forward(params, z, 40, return_cache=True)
        _, dz_noaux = backward(params, cache_noaux, gaussian(Rng(5), 6, 8))
        assert np.array_equal(dz, dz_noaux)
        assert np.max(np.abs(grads["L0.router_w"])) > 0

    def test_forced_routing_leaves_other_expert_untouched(self):
        cfg = tiny(n_experts=2, k=1)
        params = init_params(cfg, Rng(6))
        for l in range(cfg.layers):
            params.tensors[f"L{l}.router_b"][...] = [100.0, -100.0]
        _, grads, _ = batch_loss_and_grads(params, make_batch(cfg, 8, items=2), SCHED, None, 0.01)
        for l in range(cfg.layers):
            for p in ("w1", "b1", "w2", "b2"):
                assert np.all(grads[f"L{l}.e1.{p}"] == 0.0)
            assert np.max(np.abs(grads[f"L{l}.e0.w1"])) > 0

    def test_dense_default_thresholds_at_standard_step(self):
        cfg = tiny()
        params = init_params(cfg, Rng(7))
        batch = make_batch(cfg, 16, seed=3)
        anchors = [build_anchor_targets(batch[0][0], SCHED, [50, 100, 150], 2, Rng(1), 0.5)]
        worst, _ = full_grad_error(params, batch, anchors, h=1e-4)
        assert worst <= 1e-4


class TestTraining:
    def _state(self, cfg, seed=0, **opt):
        params = init_params(cfg, Rng(seed))
        return init_state(params, Rng(seed + 1), OptimConfig(**opt))

    def test_zero_lr_keeps_params(self):
        cfg = tiny()
        state = self._state(cfg, lr=0.0, warmup=0)
        before = {k: v.copy() for k, v in state.params.tensors.items()}
        state, m = train_step(state, make_batch(cfg, 8, items=2), SCHED, AnchorSpec([50, 100], [0.5, 0.5]))
        for k, v in before.items():
            assert np.array_equal(state.params[k], v)
        assert m["l_diff"] > 0 and m["l_sas"] > 0 and m["l_aux"] > 0
        assert state.step == 1

    def test_metrics_components(self):
        cfg = tiny(n_experts=4, k=2, capacities=None)
        state = self._state(cfg)
        _, m = train_step(state, make_batch(cfg, 8), SCHED, None, lambda_aux=0.01)
        assert m["loss"] == pytest.approx(m["l_diff"] + m["l_sas"] + m["l_aux"], rel=1e-14)
        assert m["l_sas"] == 0.0
        assert m["dispatch"].sum() == pytest.approx(1.0)
        assert m["l_aux"] >= 0.01 - 1e-12  # uniform routing is the minimum when f tracks P

    def test_warmup_and_clip(self):
        opt = OptimConfig(lr=1e-3, warmup=10)
        assert opt.lr_at(1) == pytest.approx(1e-4) and opt.lr_at(10) == 1e-3 and opt.lr_at(50) == 1e-3
        assert OptimConfig(lr=2e-3, warmup=0).lr_at(1) == 2e-3
        cfg = tiny()
        state = self._state(cfg, lr=1e-3, warmup=0, clip=1e-6, weight_decay=0.0)
        before = state.params["head_w"].copy()
        _, m = train_step(state, make_batch(cfg, 8), SCHED, None)
        assert m["grad_norm"] > 1e-6
        # the first Adam step moves every coordinate by at most lr, whatever the clip
        assert np.max(np.abs(state.params["head_w"] - before)) <= 1e-3 + 1e-12

    def test_weight_decay_only_touches_matrices(self):
        cfg = tiny()
        batch = make_batch(cfg, 8)
        decayed = self._state(cfg, lr=0.1, warmup=0, weight_decay=0.5)
        plain = self._state(cfg, lr=0.1, warmup=0, weight_decay=0.0)
        before = {k: v.copy() for k, v in decayed.params.tensors.items()}
        train_step(decayed, batch, SCHED, None)
        train_step(plain, batch, SCHED, None)
        for k in decayed.params.trainable():
            diff = plain.params[k] - decayed.params[k]
            expected = 0.1 * 0.5 * before[k] if before[k].ndim >= 2 else np.zeros_like(diff)
            np.testing.assert_allclose(diff, expected, atol=1e-14)

    def test_same_seed_same_metrics(self):
        cfg = tiny()
        runs = []
        for _ in range(2):
            state = self._state(cfg, lr=1e-2, warmup=0)
            out = []
            for step in range(3):
                batch = random_batch(state.params, [np.arange(8) % 16, np.arange(8, 16)], SCHED, state.rng)
                _, m = train_step(state, batch, SCHED, AnchorSpec([50, 150], [0.5, 0.5]))
                out.append((m["loss"], m["grad_norm"]))
            runs.append(out)
        assert runs[0] == runs[1]

    def test_non_finite_loss_raises(self):
        cfg = tiny()
        state = self._state(cfg)
        state.params.tensors["head_b"][0] = np.nan
        with pytest.raises(FloatingPointError, match="non-finite loss"):
            train_step(state, make_batch(cfg, 6), SCHED, None)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step(self._state(tiny()), [], SCHED, None)

    def test_single_batch_loss_trends_down(self):
        """Overfitting one fixed item: window means of the noise loss decrease."""
        cfg = ModelConfig(vocab=16, d=8, layers=1, heads=2, d_ff=16, n_experts=2, k=1)
        state = init_state(init_params(cfg, Rng(0)), Rng(1), OptimConfig(lr=3e-3, warmup=10, weight_decay=0.0))
        batch = make_batch(cfg, 16, seed=5)
        batch = [(batch[0][0], 100, batch[0][2])]
        losses = [train_step(state, batch, SCHED, None)[1]["l_diff"] for _ in range(150)]
        windows = [np.mean(losses[i:i + 50]) for i in range(0, 150, 50)]
        assert windows[0] > windows[1] > windows[2]


class TestParamsAndCheckpoints:
    def test_active_params_constant_in_m(self):
        totals, actives = [], []
        for M in (2, 4, 8):
            p = init_params(ModelConfig(n_experts=M, k=2, capacities=(1.0,) * M), Rng(0))
            totals.append(p.total_params())
            actives.append(p.active_params())
        assert actives[0] == actives[1] == actives[2]
        assert totals[2] - totals[1] == 2 * (totals[1] - totals[0])

    def test_active_counts_largest_experts(self):
        p = init_params(ModelConfig(n_experts=3, k=1, capacities=(0.5, 1.0, 0.5)), Rng(0))
        experts = sum(p.expert_size(l, j) for l in range(2) for j in range(3))
        shared = p.total_params() - experts - p.router_params()
        assert p.router_params() == 2 * (32 * 3 + 3)
        assert p.active_params() == shared + 2 * p.expert_size(0, 1)

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = tiny(hsa=SMALL_HSA)
        state = init_state(init_params(cfg, Rng(0)), Rng(1), OptimConfig(lr=5e-3, warmup=0))
        train_step(state, make_batch(cfg, 6), SCHED, None)
        state.rng.normal(3)
        path = tmp_path / "ck.npz"
        save_checkpoint(path, state)
        back = load_checkpoint(path)
        assert back.step == state.step and back.optim == state.optim and back.params.cfg == cfg
        for k, v in state.params.tensors.items():
            assert np.array_equal(back.params[k], v) and back.params[k].dtype == v.dtype
        for k in state.m:
            assert np.array_equal(back.m[k], state.m[k]) and np.array_equal(back.v[k], state.v[k])
        assert np.array_equal(back.rng.normal(5), state.rng.normal(5))

    def test_bad_version(self, tmp_path):
        import json
        state = init_state(init_params(tiny(), Rng(0)), Rng(1))
        path = tmp_path / "ck.npz"
        save_checkpoint(path, state)
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(bytes(arrays["__meta__"]).decode())
        meta["version"] = 99
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_rounding_recovers_embedded_tokens(self):
        params = init_params(tiny(), Rng(0))
        toks = np.array([3, 0, 15, 7, 7])
        assert round_to_tokens(params["embed"][toks], params["embed"]).tolist() == toks.tolist()

    def test_model_flops_sum_layers(self):
        cfg = tiny(hsa=SMALL_HSA)
        nnz, flops = model_flops(cfg, 15)
        assert nnz > 0 and flops > nnz
        nnz_w, _ = model_flops(tiny(hsa=SMALL_HSA, fixed_window=1), 15)
        assert nnz_w == 2 * (15 * 3 - 2)
