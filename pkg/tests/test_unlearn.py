import math

import numpy as np
import pytest

from faithlab import autograd as ag
from faithlab.autograd import Tensor
from faithlab.evalkit import memorization, memorization_table
from faithlab.microlm import ModelConfig, NeuronMask, apply_gradients, ffn_param_names, forward, init_model
from faithlab.unlearn import (
    METHODS,
    AttributionMap,
    ConfigError,
    NumericAbort,
    ReferenceModel,
    UnlearnConfig,
    attribute,
    klue_mask,
    loss_for_method,
    n_selected,
    random_neurons,
    regularize,
    regularize_scores,
    select_neurons,
    select_unforgotten,
    unlearn_run,
)
from faithlab.unlearn import loop as loop_mod
from faithlab.worldgen import REJECT, encode_items


@pytest.fixture
def batches(small_world):
    f = encode_items(small_world.vocab, [c.base for c in small_world.split_clusters("forget")][:3])
    r = encode_items(small_world.vocab, [c.base for c in small_world.split_clusters("retain")][:3])
    return f, r


class TestConfig:
    def test_defaults(self):
        cfg = UnlearnConfig()
        assert (cfg.alpha, cfg.n_mismatch, cfg.neuron_ratio, cfg.batch_size) == (10.0, 5, 0.05, 4)
        assert (cfg.forget_weight, cfg.retain_weight, cfg.ua_stop_threshold) == (0.7, 1.0, 33.34)
        assert cfg.selects_samples and not cfg.replace(method="ga").selects_samples

    @pytest.mark.parametrize("kw", [dict(method="sgd"), dict(neuron_ratio=0.0), dict(neuron_ratio=1.5),
                                    dict(alpha=-1.0), dict(lr=0.0), dict(batch_size=0),
                                    dict(neuron_selection="top")])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ConfigError):
            UnlearnConfig(**kw)

    def test_every_method_has_a_learning_rate(self):
        assert all(UnlearnConfig(method=m).learning_rate > 0 for m in METHODS)


class TestRegularize:
    def test_alpha_zero_is_identity(self, rng):
        a = rng.normal(size=(3, 16))
        assert np.array_equal(regularize_scores(a, rng.normal(size=(5, 3, 16)), 0.0), a)

    def test_worked_example(self):
        out = regularize_scores(np.array([[1.0]]), np.array([[[0.2]], [[-0.4]], [[0.6]]]), 1.0)
        assert abs(out[0, 0] - (1.0 - 0.8 / 3)) < 1e-12

    def test_no_mismatched_pairs_is_identity(self, rng):
        a = rng.normal(size=(2, 4))
        assert np.array_equal(regularize_scores(a, np.zeros((0, 2, 4)), 10.0), a)

    def test_never_raises_scores(self, rng):
        a = rng.normal(size=(3, 16))
        assert (regularize_scores(a, rng.normal(size=(5, 3, 16)), 3.0) <= a).all()

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            regularize_scores(np.zeros((1, 1)), np.zeros((1, 1, 1)), -0.5)

    def test_model_level_alpha_zero(self, small_world, small_memorized):
        pairs = [(c.base.question, c.base.answer) for c in small_world.split_clusters("forget")[:2]]
        base = attribute(small_memorized, pairs, small_world.vocab)
        mism = [(c.base.question, pairs[0][1]) for c in small_world.split_clusters("retain")[:5]]
        assert np.array_equal(regularize(base, small_memorized, mism, 0.0, small_world.vocab).scores, base.scores)


class TestAttribution:
    def test_parameter_gradients_untouched(self, small_world, small_memorized):
        c = small_world.clusters[0]
        attr = attribute(small_memorized, [(c.base.question, c.base.answer)], small_world.vocab)
        assert attr.scores.shape == (3, 256)
        assert all(p.grad is None for p in small_memorized.params.values())

    def test_dead_layer_has_zero_attribution(self, tiny64, small_world):
        model = tiny64.copy()
        w_in, b_in, _ = ffn_param_names(0)
        model.params[w_in].data[:] = 0.0
        model.params[b_in].data[:] = 0.0
        it = small_world.items("base")[0]
        attr = attribute(model, [(it.question, it.answer)], small_world.vocab)
        assert not attr.scores[0].any() and attr.scores[1].any()

    def test_single_token_question_is_elementwise_product(self, tiny64):
        ids, ans = [[5]], 3
        attr = attribute(tiny64, [(ids[0], ans)])
        res = forward(tiny64, np.array(ids), capture=True, param_grad=False)
        ag.backward(ag.softmax(res.logits)[0, ans])
        for l in range(2):
            np.testing.assert_array_equal(attr.scores[l], res.activations.values(l)[0, 0] * res.activations.grads(l)[0, 0])

    def test_ablation_oracle(self, small_world, small_memorized):
        vocab = small_world.vocab
        rng = np.random.default_rng(0)
        items = small_world.items("base")[:20]

        def prob(ids, ans, hit=None):
            def hook(l, h):
                if hit is None or l != hit[0]:
                    return None
                h = h.copy()
                h[..., hit[1]] = 0.0
                return h

            with ag.no_grad():
                z = forward(small_memorized, ids, ffn_hook=hook).logits.data[0].astype(np.float64)
            p = np.exp(z - z.max())
            return p[ans] / p.sum()

        top_drop, rand_drop = [], []
        for it in items:
            ids, ans = np.array([vocab.encode(it.question)]), vocab.id(it.answer)
            scores = attribute(small_memorized, [(it.question, it.answer)], vocab).scores
            top = np.unravel_index(np.argmax(scores), scores.shape)
            rnd = (int(rng.integers(3)), int(rng.integers(256)))
            p0 = prob(ids, ans)
            top_drop.append(p0 - prob(ids, ans, top))
            rand_drop.append(p0 - prob(ids, ans, rnd))
        assert np.mean(top_drop) > np.mean(rand_drop)


class TestSelection:
    def test_default_count(self):
        attr = AttributionMap(np.random.default_rng(0).normal(size=(3, 256)))
        assert len(select_neurons(attr, 0.05).selected) == 39 == n_selected(0.05, 768)

    def test_full_selection(self):
        assert len(select_neurons(AttributionMap(np.ones((3, 4))), 1.0).selected) == 12

    def test_ties_by_index(self):
        assert select_neurons(AttributionMap(np.zeros((1, 10))), 0.5).selected == {(0, i) for i in range(5)}

    def test_global_not_per_layer(self):
        s = np.zeros((2, 4))
        s[1] = [5, 6, 7, 8]
        assert select_neurons(AttributionMap(s), 0.5).selected == {(1, i) for i in range(4)}

    def test_exact_products_do_not_round_up(self):
        assert n_selected(0.07, 100) == 7 and n_selected(0.01, 768) == 8

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            select_neurons(AttributionMap(np.array([[np.nan, 1.0]])), 0.5)

    @pytest.mark.parametrize("p", [0.0, 1.2])
    def test_bad_ratio(self, p):
        with pytest.raises(ValueError):
            select_neurons(AttributionMap(np.ones((1, 4))), p)

    def test_random_neurons_same_size(self):
        m = random_neurons(3, 256, 0.05, np.random.default_rng(1))
        assert len(m.selected) == 39 and all(0 <= l < 3 and 0 <= i < 256 for l, i in m.selected)


class TestSelectUnforgotten:
    def test_memorized_model_returns_everything(self, small_world, small_memorized):
        items = [c.base for c in small_world.split_clusters("forget")]
        table = memorization_table(small_memorized, items, small_world.vocab)
        assert select_unforgotten(small_memorized, items, small_world.vocab) == [it for it in items if table[it.id]]

    def test_cross_check_midway(self, small_world, small_memorized):
        model, _ = unlearn_run(small_memorized, small_world, UnlearnConfig(method="ga", lr=5e-4, max_epochs=3))
        items = [c.base for c in small_world.split_clusters("forget")]
        kept = select_unforgotten(model, items, small_world.vocab)
        assert kept == [it for it in items if memorization(model, it, small_world.vocab) == 1]

    def test_model_that_memorizes_nothing(self, small_world):
        model = init_model(ModelConfig(vocab_size=len(small_world.vocab), d_model=16, n_heads=2, d_ffn=16))
        items = [c.base for c in small_world.split_clusters("forget")]
        kept = select_unforgotten(model, items, small_world.vocab)
        assert all(memorization(model, it, small_world.vocab) == 1 for it in kept)
        assert len(kept) < len(items)


def _fd_through(model, name, fn):
    original = model.params[name]

    def f(leaf):
        model.params[name] = leaf
        try:
            return fn()
        finally:
            model.params[name] = original

    return ag.finite_diff_check(f, Tensor(original.data.copy()), 1e-6)


class TestLosses:
    @pytest.mark.parametrize("method", METHODS)
    @pytest.mark.parametrize("name", ["layers.0.ffn.w_in", "layers.1.attn.wv", "head.b"])
    def test_finite_differences(self, tiny64, small_world, batches, method, name):
        f, r = batches
        ref = ReferenceModel(tiny64)
        model = tiny64.copy()
        model.params[name].data += 0.05 * np.random.default_rng(3).normal(size=model.params[name].shape)
        cfg = UnlearnConfig(method=method)
        reject = small_world.vocab.id(REJECT)

        def fn():
            return loss_for_method(method, model, ref, f, r, cfg, reject_id=reject, rng=np.random.default_rng(5))

        assert _fd_through(model, name, fn) < 1e-4

    def test_ga_zero_weight_is_stationary(self, tiny64, batches):
        f, _ = batches
        loss = loss_for_method("ga", tiny64, None, f, None, UnlearnConfig(method="ga", forget_weight=0.0))
        assert float(loss.data) == 0.0
        before = tiny64.checksum()
        ag.backward(loss)
        apply_gradients(tiny64, 1.0)
        assert tiny64.checksum() == before

    def test_npo_at_reference(self, tiny64, batches):
        f, _ = batches
        cfg = UnlearnConfig(method="npo", retain_weight=0.0, forget_weight=1.0)
        loss = loss_for_method("npo", tiny64, ReferenceModel(tiny64), f, None, cfg)
        assert abs(float(loss.data) - (2 / cfg.beta_pref) * math.log(2)) < 1e-12

    def test_reference_required(self, tiny64, batches):
        with pytest.raises(ValueError):
            loss_for_method("npo", tiny64, None, batches[0], None, UnlearnConfig(method="npo"))

    def test_reference_never_updated(self, small_world, small_memorized, monkeypatch):
        refs = []
        real = loop_mod.ReferenceModel

        def spy(model):
            refs.append(real(model))
            return refs[-1]

        monkeypatch.setattr(loop_mod, "ReferenceModel", spy)
        unlearn_run(small_memorized, small_world, UnlearnConfig(method="npo", max_epochs=2))
        assert refs and refs[0].unchanged()

    def test_klue_step_matches_masked_gradient(self, tiny64, small_world, batches, f64):
        f, r = batches
        cfg = UnlearnConfig(method="klue", neuron_ratio=0.25)
        mask = klue_mask(tiny64, f, f, cfg.replace(regularization=False), np.random.default_rng(0))
        w_in = ffn_param_names(1)[0]
        before = tiny64.params[w_in].data.copy()
        original = tiny64.params[w_in]

        def loss_at(leaf):
            tiny64.params[w_in] = leaf
            try:
                return loss_for_method("klue", tiny64, None, f, r, cfg)
            finally:
                tiny64.params[w_in] = original

        numeric = np.zeros_like(before)
        eps = 1e-6
        with ag.no_grad():
            for idx in np.ndindex(before.shape):
                hi, lo = before.copy(), before.copy()
                hi[idx] += eps
                lo[idx] -= eps
                numeric[idx] = (float(loss_at(Tensor(hi)).data) - float(loss_at(Tensor(lo)).data)) / (2 * eps)
        ag.backward(loss_for_method("klue", tiny64, None, f, r, cfg))
        apply_gradients(tiny64, 0.1, mask)
        rows = [i for l, i in mask.selected if l == 1]
        expected = before.copy()
        expected[rows] -= 0.1 * numeric[rows]
        diff = np.abs(tiny64.params[w_in].data - expected) / np.maximum(1.0, np.abs(expected))
        assert diff.max() < 1e-4


class TestLoop:
    def test_zero_epochs_is_noop(self, small_world, small_memorized):
        model, hist = unlearn_run(small_memorized, small_world, UnlearnConfig(max_epochs=0))
        assert model.checksum() == small_memorized.checksum() and len(hist) == 0

    def test_input_model_untouched(self, small_world, small_memorized):
        before = small_memorized.checksum()
        unlearn_run(small_memorized, small_world, UnlearnConfig(method="ga", max_epochs=1))
        assert small_memorized.checksum() == before

    def test_empty_mask_never_lowers_ua(self, small_world, small_memorized, monkeypatch):
        monkeypatch.setattr(loop_mod, "select_neurons", lambda attr, p: NeuronMask(frozenset()))
        model, hist = unlearn_run(small_memorized, small_world, UnlearnConfig(max_epochs=3))
        assert model.checksum() == small_memorized.checksum()
        assert len(hist) == 3 and not hist.early_stopped
        assert all(e.ua >= hist.initial_ua for e in hist.epochs)

    def test_deterministic(self, small_world, small_memorized):
        cfg = UnlearnConfig(max_epochs=2, lr=0.2)
        a, ha = unlearn_run(small_memorized, small_world, cfg)
        b, hb = unlearn_run(small_memorized, small_world, cfg)
        assert a.checksum() == b.checksum() and [e.ua for e in ha.epochs] == [e.ua for e in hb.epochs]

    def test_early_stop_reaches_threshold(self, small_world, small_memorized):
        _, hist = unlearn_run(small_memorized, small_world, UnlearnConfig(method="ga", lr=5e-3, max_epochs=100))
        assert hist.early_stopped and hist.final_ua <= 33.34

    def test_skipped_items_are_unmemorized(self, small_world, small_memorized):
        items = [c.base for c in small_world.split_clusters("forget")]
        tables = []

        def cb(model, rec):
            tables.append(memorization_table(model, items, small_world.vocab))

        _, hist = unlearn_run(small_memorized, small_world, UnlearnConfig(lr=0.3, max_epochs=6), callback=cb)
        for prev, rec in zip(tables, hist.epochs[1:]):
            assert rec.skipped_ids == sorted(i for i, v in prev.items() if v == 0)

    def test_checkpoints_and_history(self, small_world, small_memorized, tmp_path):
        cfg = UnlearnConfig(method="ga", lr=1e-4, max_epochs=2, checkpoint_every=1)
        _, hist = unlearn_run(small_memorized, small_world, cfg, checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["unlearn_epoch001.npz", "unlearn_epoch002.npz"]
        hist.write(tmp_path / "h.jsonl")
        assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 2

    def test_numeric_abort(self, small_world, small_memorized, monkeypatch):
        monkeypatch.setattr(loop_mod, "loss_for_method", lambda *a, **k: Tensor(np.float32(np.nan)))
        with pytest.raises(NumericAbort) as exc:
            unlearn_run(small_memorized, small_world, UnlearnConfig(method="ga", max_epochs=1))
        assert exc.value.snapshot["epoch"] == 0
