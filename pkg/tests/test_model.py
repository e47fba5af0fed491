import math

import numpy as np
import pytest
import scipy.sparse as sp
import torch

from musicrec.core import ConfigError, HyperParams, ModelParams, xavier_uniform
from musicrec.graphs import build_ui_graph, symmetric_normalize
from musicrec.model import (Ablation, ForwardState, SequenceCache, attention_pool, attention_weights,
                            fuse_and_score, load_checkpoint, mm_forward, propagate, propagation_counter,
                            save_checkpoint, si_forward, sinusoidal_pool, sinusoidal_table, ui_forward)
from oracles import dense_normalize, dense_propagate
from conftest import tiny_instance


def random_graph(n, density, seed, kind="UI"):
    rng = np.random.default_rng(seed)
    A = np.triu(rng.random((n, n)) * (rng.random((n, n)) < density), 1)
    return symmetric_normalize(A + A.T, kind)


def small_params(n_items=6, d=3, L_max=5, seed=0):
    hp = HyperParams(d=d, L_max=L_max)
    return ModelParams.init(hp, 2, n_items, 4, 4, seed, torch.float64)


class TestPropagate:
    def test_zero_layers(self):
        X = torch.randn(5, 3, dtype=torch.float64)
        assert torch.equal(propagate(random_graph(5, 0.5, 0), X, 0), X)

    def test_path_graph_one_layer(self):
        A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
        X = torch.eye(3, dtype=torch.float64)
        out = propagate(symmetric_normalize(A), X, 1, "last_layer")
        assert np.allclose(out.numpy(), dense_normalize(A), atol=1e-6)

    @pytest.mark.parametrize("aggregate", ["mean_over_layers", "last_layer"])
    def test_dense_oracle(self, aggregate):
        g = random_graph(100, 0.05, 1)
        X = torch.randn(100, 8, dtype=torch.float64)
        out = propagate(g, X, 3, aggregate)
        assert np.abs(out.numpy() - dense_propagate(g.dense(), X.numpy(), 3, aggregate)).max() < 1e-5

    def test_linear(self):
        g = random_graph(30, 0.2, 2)
        X, Y = torch.randn(30, 4, dtype=torch.float64), torch.randn(30, 4, dtype=torch.float64)
        lhs = propagate(g, 2.0 * X + 3.0 * Y, 2)
        rhs = 2.0 * propagate(g, X, 2) + 3.0 * propagate(g, Y, 2)
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_counter(self):
        propagation_counter.clear()
        propagate(random_graph(10, 0.3, 0, "SI"), torch.randn(10, 2), 4)
        assert propagation_counter["SI"] == 4

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            propagate(random_graph(5, 0.5, 0), torch.randn(6, 2), 1)


class TestBranches:
    def test_empty_ui_graph(self):
        g = build_ui_graph(sp.csr_matrix((2, 3)))
        U, I = torch.randn(2, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
        U_ui, I_ui = ui_forward(g, U, I, 3)
        assert torch.allclose(U_ui, U / 4) and torch.allclose(I_ui, I / 4)

    def test_single_edge_hand_value(self):
        g = build_ui_graph(sp.csr_matrix(np.array([[1.0]])))
        U, I = torch.randn(1, 4, dtype=torch.float64), torch.randn(1, 4, dtype=torch.float64)
        U_ui, _ = ui_forward(g, U, I, 1)
        assert torch.allclose(U_ui[0], (U[0] + I[0]) / 2)

    def test_si_zero_layers(self):
        g = random_graph(7, 0.4, 0, "SI")
        S, I = torch.randn(3, 2), torch.randn(4, 2)
        S_si, I_si = si_forward(g, S, I, 0)
        assert torch.equal(S_si, S) and torch.equal(I_si, I)

    def test_si_single_edge_two_hops(self):
        A = np.zeros((3, 3))
        A[0, 1] = A[1, 0] = 1  # s0 - i0, i1 isolated
        g = symmetric_normalize(A, "SI")
        S, I = torch.randn(1, 2, dtype=torch.float64), torch.randn(2, 2, dtype=torch.float64)
        S_si, _ = si_forward(g, S, I, 2)
        oracle = dense_propagate(g.dense(), torch.cat([S, I]).numpy(), 2, "last_layer")
        assert np.allclose(S_si.numpy(), oracle[:1])
        assert torch.allclose(S_si[0], S[0])


class TestPooling:
    def test_singleton(self):
        p = small_params()
        out = attention_pool([3], p)
        assert torch.allclose(out, p.I[3] + p.P[0])

    def test_identical_items(self):
        p = small_params()
        out = attention_pool([2, 2], p)
        assert torch.allclose(attention_weights([2, 2], p), torch.tensor([0.5, 0.5], dtype=torch.float64))
        assert torch.allclose(out, p.I[2] + (p.P[0] + p.P[1]) / 2)

    def test_weights_simplex(self):
        p = small_params()
        a = attention_weights([0, 4, 1, 5, 2], p)
        assert float(a.sum()) == pytest.approx(1.0) and bool((a > 0).all())

    def test_manual_formula(self):
        p = small_params()
        seq = [1, 4, 0]
        logits = torch.stack([torch.tanh(p.W_a @ p.I[i]) @ p.v_a for i in seq])
        a = torch.softmax(logits, 0)
        expect = sum(a[t] * (p.I[seq[t]] + p.P[t]) for t in range(3))
        assert torch.allclose(attention_pool(seq, p), expect)

    def test_too_long_or_empty(self):
        p = small_params(L_max=2)
        with pytest.raises(ValueError):
            attention_pool([0, 1, 2], p)
        with pytest.raises(ValueError):
            attention_pool([], p)

    def test_sinusoidal_singleton(self):
        p = small_params(d=4)
        pe0 = torch.tensor([0.0, 1.0, 0.0, 1.0], dtype=torch.float64)
        assert torch.allclose(sinusoidal_pool([5], p), p.I[5] + pe0)

    def test_sinusoidal_ignores_attention_params(self):
        p = small_params(d=4)
        before = sinusoidal_pool([0, 2, 3], p)
        with torch.no_grad():
            p.W_a.mul_(7.0)
            p.v_a.add_(1.0)
            p.P.zero_()
        assert torch.equal(sinusoidal_pool([0, 2, 3], p), before)

    def test_sinusoidal_table_odd_dim(self):
        assert sinusoidal_table(3, 5).shape == (3, 5)


class TestCache:
    def test_batched_equals_single(self, tiny):
        split, model, params, _ = tiny
        users = np.arange(model.n_users)
        batched = model.cache.pool(users, params)
        for u in users:
            assert torch.equal(batched[u], attention_pool(model.seqs.seqs[u], params))

    def test_refresh_deterministic(self, tiny):
        _, model, params, _ = tiny
        model.cache.refresh(params, "all")
        first = model.cache.vectors.clone()
        model.cache.refresh(params, "all")
        assert torch.equal(first, model.cache.vectors)

    def test_batch_refresh_isolated(self, tiny):
        _, model, params, _ = tiny
        model.cache.refresh(params, "all", epoch=0)
        before = model.cache.vectors.clone()
        with torch.no_grad():
            params.I.add_(0.5)
        model.cache.refresh(params, np.array([2]), epoch=1)
        changed = (model.cache.vectors != before).any(dim=1).nonzero().flatten().tolist()
        assert changed == [2]
        assert model.cache.epoch_stamp.tolist() == [0, 0, 1, 0, 0, 0]

    def test_live_rows_carry_gradient_only(self, tiny):
        _, model, params, _ = tiny
        params.requires_grad_(True)
        S = model.cache.live(np.array([1, 3]), params)
        grad = torch.autograd.grad(S.sum(), params.I)[0]
        items = set(model.seqs.seqs[1].tolist()) | set(model.seqs.seqs[3].tolist())
        assert set(grad.abs().sum(dim=1).nonzero().flatten().tolist()) <= items
        assert not model.cache.vectors.requires_grad

    def test_empty_sequence_rejected(self, tiny):
        _, model, _, _ = tiny
        seqs = model.seqs
        bad = type(seqs)(seqs=[np.array([], dtype=np.int64)], train_lengths=np.array([0]), L_max=5, n_items=3)
        with pytest.raises(ValueError):
            SequenceCache(bad, 4)


def dense_mm_oracle(G, I, F_v, F_t, W_v, W_t, w_beta, alpha_seed, L):
    def norm(X):
        out = np.zeros_like(X)
        for r in range(len(X)):
            n = math.sqrt(sum(x * x for x in X[r]))
            if n >= 1e-12:
                out[r] = X[r] / n
        return out

    v, t = norm(F_v @ W_v), norm(F_t @ W_t)
    beta = 1 / (1 + np.exp(-(I @ w_beta)))
    mix = (1 - beta)[:, None] * t + beta[:, None] * v
    return dense_propagate(G, I + alpha_seed * mix, L, "last_layer")


class TestMultimodal:
    def setup_inputs(self, alpha_seed=0.1, seed=0):
        rng = np.random.default_rng(seed)
        g = random_graph(4, 0.8, seed, "MM")
        hp = HyperParams(d=3, alpha_seed=alpha_seed)
        p = ModelParams.init(hp, 2, 4, 5, 2, seed, torch.float64)
        F_v = torch.from_numpy(rng.normal(size=(4, 5)))
        F_t = torch.from_numpy(rng.normal(size=(4, 2)))
        return g, p, F_v, F_t

    def test_dense_oracle(self):
        g, p, F_v, F_t = self.setup_inputs()
        out = mm_forward(g, p.I, F_v, F_t, p, 0.1, 1)
        oracle = dense_mm_oracle(g.dense(), p.I.numpy(), F_v.numpy(), F_t.numpy(), p.W_v.numpy(),
                                 p.W_t.numpy(), p.w_beta.numpy(), 0.1, 1)
        assert np.abs(out.I_mm.numpy() - oracle).max() < 1e-6

    def test_zero_seed_ignores_features(self):
        g, p, F_v, F_t = self.setup_inputs()
        a = mm_forward(g, p.I, F_v, F_t, p, 0.0, 1).I_mm
        b = mm_forward(g, p.I, 10 * F_v + 1, -F_t, p, 0.0, 1).I_mm
        assert torch.equal(a, b)
        assert torch.allclose(a, propagate(g, p.I, 1, "last_layer"))

    def test_zero_gate_weights(self):
        g, p, F_v, F_t = self.setup_inputs()
        with torch.no_grad():
            p.w_beta.zero_()
        out = mm_forward(g, p.I, F_v, F_t, p, 0.1, 1)
        assert torch.allclose(out.beta, torch.full((4,), 0.5, dtype=torch.float64))
        assert torch.allclose(out.mix, (out.t_norm + out.v_norm) / 2)

    def test_zero_projection_guarded(self):
        g, p, F_v, F_t = self.setup_inputs()
        F_v = F_v.clone()
        F_v[1] = 0
        out = mm_forward(g, p.I, F_v, F_t, p, 0.1, 1)
        assert torch.isfinite(out.I_mm).all() and not out.v_norm[1].any()

    def test_id_seed_ablation(self):
        g, p, F_v, F_t = self.setup_inputs()
        out = mm_forward(g, p.I, F_v, F_t, p, 0.1, 1, id_seed=False)
        assert torch.allclose(out.I_mm, propagate(g, out.mix, 1, "last_layer"))


class TestScoring:
    def state(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        return ForwardState(U_ui=torch.randn(3, 4, generator=g, dtype=torch.float64),
                            I_ui=torch.randn(5, 4, generator=g, dtype=torch.float64),
                            I_fused=None, I_mm=torch.randn(5, 4, generator=g, dtype=torch.float64))

    def test_pure_collaborative(self):
        s = self.state()
        assert torch.allclose(fuse_and_score(1, [0, 3], s, 0.0), s.I_ui[[0, 3]] @ s.U_ui[1])

    def test_orthogonal(self):
        s = ForwardState(U_ui=torch.tensor([[1.0, 0.0]]), I_ui=torch.tensor([[0.0, 2.0]]), I_fused=None)
        assert float(fuse_and_score(0, [0], s, 0.3)[0]) == 0.0

    def test_loop_oracle(self):
        s = self.state(3)
        for u in range(3):
            got = fuse_and_score(u, range(5), s, 0.2)
            for i in range(5):
                expect = sum(float(s.U_ui[u, k]) * (float(s.I_ui[i, k]) + 0.2 * float(s.I_mm[i, k]))
                             for k in range(4))
                assert float(got[i]) == pytest.approx(expect, abs=1e-12)

    def test_decomposes(self):
        s = self.state(1)
        total = fuse_and_score(2, range(5), s, 0.2)
        parts = s.I_ui @ s.U_ui[2] + 0.2 * (s.I_mm @ s.U_ui[2])
        assert torch.allclose(total, parts)

    def test_bad_ids(self):
        s = self.state()
        with pytest.raises(IndexError):
            fuse_and_score(3, [0], s, 0.1)
        with pytest.raises(IndexError):
            fuse_and_score(0, [5], s, 0.1)


class TestModel:
    def test_xavier_bounds(self):
        g = torch.Generator().manual_seed(0)
        W = xavier_uniform((200, 50), g)
        assert float(W.abs().max()) <= math.sqrt(6 / 250)
        v = xavier_uniform((64,), g)
        assert float(v.abs().max()) <= math.sqrt(6 / 65)

    def test_param_shapes(self, tiny):
        _, model, params, _ = tiny
        assert params.shapes() == {"U": (6, 4), "I": (9, 4), "P": (8, 4), "W_a": (4, 4), "v_a": (4,),
                                   "W_v": (5, 4), "W_t": (3, 4), "w_beta": (4,)}

    def test_forward_fuses(self, tiny):
        _, model, params, _ = tiny
        s = model.forward(params, batch_users=np.array([0]))
        assert torch.allclose(s.I_fused, s.I_ui + model.hp.alpha_mm * s.I_mm)
        assert s.S_si.shape == (6, 4) and s.I_si.shape == (9, 4)

    def test_ablation_exclusive(self):
        with pytest.raises(ConfigError):
            Ablation(no_ui=True, no_mm=True)
        assert Ablation.named("no_si").name == "no_si"
        assert Ablation.named(None).name == "full"

    def test_no_mm_zero_contribution(self):
        split, model, params, _ = tiny_instance()
        from musicrec.pipeline import build_model
        ab = build_model(split, model.F_v.numpy(), model.F_t.numpy(), model.hp, Ablation(no_mm=True),
                         dtype=torch.float64)
        s = ab.forward(params)
        assert s.I_mm is None and torch.equal(s.I_fused, s.I_ui)

    def test_no_ui_uses_raw(self):
        split, model, params, _ = tiny_instance()
        from musicrec.pipeline import build_model
        ab = build_model(split, model.F_v.numpy(), model.F_t.numpy(), model.hp, Ablation(no_ui=True),
                         dtype=torch.float64)
        s = ab.forward(params, with_si=False)
        assert torch.equal(s.U_ui, params.U)

    def test_checkpoint_round_trip(self, tiny, tmp_path):
        _, model, params, _ = tiny
        save_checkpoint(tmp_path / "c.ckpt", params, model.cache.vectors, {"epoch": 3})
        back, S, meta = load_checkpoint(tmp_path / "c.ckpt", torch.float64)
        assert meta == {"epoch": 3}
        for name, t in params.tensors().items():
            assert torch.allclose(back.tensors()[name], t.float().double())
        assert S.shape == model.cache.vectors.shape
