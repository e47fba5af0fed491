import math

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from musicrec.core import HyperParams, ModelParams, reindex
from musicrec.data import leave_two_out
from musicrec.losses import TripleBatch
from musicrec.pipeline import build_model
from musicrec.train import (AdamState, EarlyStopping, TrainingDivergence, TripleSampler, adam_step, backward,
                            batch_objective, fit, sample_batch)
from oracles import finite_difference_check
from conftest import FIXTURE_HP, random_log, tiny_instance


class TestSampler:
    def test_forced_negative(self):
        raw = [("u", i, i) for i in range(6)] + [("v", i, i) for i in range(7)]
        split = leave_two_out(reindex(raw))
        u = split.train.user_index["u"]
        sampler = TripleSampler(split)
        neg = sampler.negatives(np.full(20, u), np.random.default_rng(0))
        assert set(neg.tolist()) == {split.valid[u], split.test[u], split.train.item_index[6]}

    def test_saturated_user(self):
        raw = [("u", i, i) for i in range(5)] + [("v", 0, 0), ("v", 1, 1), ("v", 2, 2)]
        split = leave_two_out(reindex(raw))
        # v's train prefix is one item, u's covers three of five; saturate by hand
        R = TripleSampler(split)
        R.saturated.add(0)
        with pytest.raises(ValueError, match="every item"):
            R.negatives(np.array([0]), np.random.default_rng(0))

    def test_negatives_uniform(self):
        split = leave_two_out(random_log(5, 30, 12, 12, seed=0))
        sampler = TripleSampler(split)
        seen = set(split.train.histories()[0].tolist())
        neg = sampler.negatives(np.zeros(10_000, dtype=np.int64), np.random.default_rng(1))
        assert not seen & set(neg.tolist())
        unseen = [i for i in range(split.n_items) if i not in seen]
        counts = np.array([np.sum(neg == i) for i in unseen])
        assert counts.sum() == 10_000
        assert chisquare(counts).pvalue > 0.01

    def test_batch_positives_are_train_pairs(self):
        split = leave_two_out(random_log(20, 30, 4, 10, seed=2))
        b = sample_batch(split, 64, np.random.default_rng(0))
        pairs = split.train.pairs()
        assert len(b) == 64
        assert all((u, p) in pairs for u, p in zip(b.users.tolist(), b.pos.tolist()))
        assert not any((u, n) in pairs for u, n in zip(b.users.tolist(), b.neg.tolist()))

    def test_epoch_covers_pairs(self):
        split = leave_two_out(random_log(10, 20, 4, 8, seed=3))
        sampler = TripleSampler(split)
        seen = [(u, p) for b in sampler.epoch(7, np.random.default_rng(0)) for u, p in zip(b.users, b.pos)]
        assert sorted(seen) == sorted(split.train.pairs())


class TestGradients:
    def test_finite_differences(self):
        _, model, params, batch = tiny_instance()
        err, where = finite_difference_check(lambda p: batch_objective(model, p, batch, update_cache=False)[0],
                                             params)
        assert err < 1e-4, where

    def test_dead_feature_path(self):
        _, model, params, batch = tiny_instance(alpha_seed=0.0, lambda_u=0.0, lambda_i=0.0, lambda_mm=0.0, reg=0.0)
        params.requires_grad_(True)
        total, _ = batch_objective(model, params, batch)
        g = backward(total, params)
        assert not g["W_v"].any() and not g["W_t"].any()

    def test_cached_rows_are_constants(self):
        _, model, params, batch = tiny_instance()
        short = [4, 5]  # users with the two shortest sequences
        batch = TripleBatch(batch.users[short], batch.pos[short], batch.neg[short])
        outside = sorted(set(range(6)) - set(batch.users.tolist()))
        model.cache.vectors.requires_grad_(True)
        params.requires_grad_(True)
        total, _ = batch_objective(model, params, batch, update_cache=False)
        (g_cache,) = torch.autograd.grad(total, [model.cache.vectors], allow_unused=True)
        assert g_cache is None
        # positional rows past the longest live sequence get no gradient,
        # however long the cached outside sequences are
        model.cache.vectors.requires_grad_(False)
        with torch.no_grad():
            model.cache.vectors[outside] += 0.5
        g = backward(batch_objective(model, params, batch, update_cache=False)[0], params)
        longest_live = max(len(model.seqs.seqs[u]) for u in batch.users)
        assert max(len(model.seqs.seqs[u]) for u in outside) > longest_live
        assert not g["P"][longest_live:].any()

    def test_nonfinite_gradient_named(self):
        _, model, params, batch = tiny_instance()
        params.requires_grad_(True)
        total = (params.W_a * float("nan")).sum() + params.U.sum()
        with pytest.raises(TrainingDivergence, match="W_a"):
            backward(total, params)

    @pytest.mark.parametrize("lr", [1e-3, 1e-4])
    def test_small_step_descends(self, lr):
        _, model, params, batch = tiny_instance()
        params.requires_grad_(True)
        before, _ = batch_objective(model, params, batch, update_cache=False)
        grads = backward(before, params)
        params.requires_grad_(False)
        adam_step(params, grads, AdamState(lr=lr))
        after, _ = batch_objective(model, params, batch, update_cache=False)
        assert float(after) < float(before.detach())


class TestAdam:
    def params(self):
        hp = HyperParams(d=2, L_max=2)
        return ModelParams.init(hp, 2, 3, 2, 2, 0, torch.float64)

    def test_zero_gradient(self):
        p = self.params()
        before = p.detach_clone()
        opt = AdamState(lr=0.1)
        g = {k: torch.zeros_like(v) for k, v in p.tensors().items()}
        adam_step(p, g, opt)
        for k in before.tensors():
            assert torch.equal(before.tensors()[k], p.tensors()[k])
        opt.m["U"].fill_(1.0)
        adam_step(p, g, opt)
        assert torch.allclose(opt.m["U"], torch.full_like(opt.m["U"], 0.9))

    def test_single_step_hand_formula(self):
        p = self.params()
        before = p.U.clone()
        g = {k: torch.zeros_like(v) for k, v in p.tensors().items()}
        g["U"] = torch.tensor([[0.5, -2.0], [1e-3, 0.0]], dtype=torch.float64)
        adam_step(p, g, AdamState(lr=0.01))
        m_hat = (0.1 * g["U"]) / (1 - 0.9)
        v_hat = (0.001 * g["U"] ** 2) / (1 - 0.999)
        assert torch.allclose(p.U - before, -0.01 * m_hat / (v_hat.sqrt() + 1e-8), atol=1e-15)

    def test_constant_gradient_limit(self):
        p = self.params()
        opt = AdamState(lr=0.01)
        g = {k: torch.full_like(v, 3.7) for k, v in p.tensors().items()}
        for _ in range(500):
            before = p.U.clone()
            adam_step(p, g, opt)
        delta = (before - p.U).abs()
        assert torch.allclose(delta, torch.full_like(delta, 0.01), rtol=0.01)

    def test_shape_mismatch(self):
        p = self.params()
        g = {k: torch.zeros_like(v) for k, v in p.tensors().items()}
        g["U"] = torch.zeros(5)
        with pytest.raises(ValueError, match="shape"):
            adam_step(p, g, AdamState())


class TestEarlyStopping:
    def test_patience_zero(self):
        s = EarlyStopping(0)
        assert s(0.1, 0) and not s.stop
        assert not s(0.1, 1) and s.stop

    def test_patience_counts(self):
        s = EarlyStopping(2)
        for e, v in enumerate([0.1, 0.2, 0.15, 0.19]):
            s(v, e)
        assert s.stop and s.best_epoch == 1


@pytest.fixture(scope="module")
def fixture_run(synthetic, synthetic_split):
    hp = HyperParams(**FIXTURE_HP)
    model = build_model(synthetic_split, synthetic.F_v, synthetic.F_t, hp)
    mm_before = model.mm_graph.matrix.copy()
    best, report = fit(model, synthetic_split, seed=0)
    return model, best, report, mm_before


class TestFit:
    def test_beats_random(self, fixture_run, synthetic_split):
        _, _, report, _ = fixture_run
        assert report.best_valid_r20 > 20 / synthetic_split.n_items

    def test_loss_halves(self, fixture_run):
        _, _, report, _ = fixture_run
        first, at_best = report.epochs[0]["loss"], report.epochs[report.best_epoch]["loss"]
        assert at_best <= 0.5 * first

    def test_best_is_running_max(self, fixture_run):
        _, _, report, _ = fixture_run
        r20 = [e["valid_r20"] for e in report.epochs]
        assert report.best_valid_r20 == max(r20[:report.best_epoch + 1])
        assert report.stop_reason == "early_stopping"

    def test_mm_graph_frozen(self, fixture_run):
        model, _, _, mm_before = fixture_run
        assert (model.mm_graph.matrix != mm_before).nnz == 0

    def test_patience_zero_stops_on_first_plateau(self, synthetic, synthetic_split):
        hp = HyperParams(patience=0, max_epochs=30, lr=0.05)
        model = build_model(synthetic_split, synthetic.F_v, synthetic.F_t, hp)
        _, report = fit(model, synthetic_split, seed=1)
        r20 = [e["valid_r20"] for e in report.epochs]
        first_flat = next((k for k in range(1, len(r20)) if r20[k] <= max(r20[:k])), None)
        assert first_flat is not None and len(r20) == first_flat + 1

    def test_deterministic(self, synthetic, synthetic_split):
        hp = HyperParams(max_epochs=3, lr=0.01)
        runs = []
        for _ in range(2):
            model = build_model(synthetic_split, synthetic.F_v, synthetic.F_t, hp)
            best, report = fit(model, synthetic_split, seed=7)
            runs.append((best, report.deterministic_view()))
        assert runs[0][1] == runs[1][1]
        for k, t in runs[0][0].tensors().items():
            assert torch.equal(t, runs[1][0].tensors()[k])

    def test_divergence(self, synthetic, synthetic_split):
        hp = HyperParams(max_epochs=2, lr=0.01)
        model = build_model(synthetic_split, synthetic.F_v, synthetic.F_t, hp)
        params = model.init_params(0)
        with torch.no_grad():
            params.U[0, 0] = float("inf")
        with pytest.raises(TrainingDivergence) as info:
            fit(model, synthetic_split, params=params)
        assert info.value.report.stop_reason == "diverged"
