import json

import numpy as np
import pytest

from conftest import max_fd_rel_error, tiny_set
from hdmi_lab.diffnet import sgd_step, softmax, softmax_backward
from hdmi_lab.errors import ConfigError, DomainError, ShapeError
from hdmi_lab.hypotheses import (
    HypothesisSet, SourceSnapshot, anchor_predict, default_architecture, ensemble_mean,
    ensemble_predict, predict_all, to_target,
)
from hdmi_lab.objectives import hdmi_loss, hypothesis_disparity_grads, mutual_information_grad


def values_of(hset):
    return {(k, n): s.values(n).copy() for k, s in hset.named_stores() for n in s}


class TestBuild:
    def test_m_must_be_positive(self):
        with pytest.raises(ConfigError):
            tiny_set(M=0)

    def test_same_seed_same_set(self):
        a, b = tiny_set(seed=4, M=2), tiny_set(seed=4, M=2)
        va, vb = values_of(a), values_of(b)
        assert va.keys() == vb.keys()
        assert all(va[k].tobytes() == vb[k].tobytes() for k in va)

    def test_ic_heads_are_independent(self):
        s = tiny_set(M=3)
        stores = s.classifier_stores()
        assert len(stores) == 3
        assert not np.array_equal(stores[0].values("0.W"), stores[1].values("0.W"))

    def test_mc_heads_share_store_with_distinct_masks(self):
        s = tiny_set(M=3, variant="MC", dropout=0.5)
        assert len(s.classifier_stores()) == 1
        assert len({id(c.store) for c in s.classifiers}) == 1
        masks = [c.fixed_mask(s.mask_id(m), 0) for m, c in enumerate(s.classifiers)]
        assert not np.array_equal(masks[0], masks[1])

    def test_default_architecture(self):
        ext, clf = default_architecture(2, 3)
        assert [(l.in_dim, l.out_dim) for l in ext] == [(2, 64), (64, 32)]
        assert [(l.in_dim, l.out_dim) for l in clf] == [(32, 32), (32, 3)]
        assert clf[0].dropout_rate == 0.5 and clf[1].activation == "identity"


class TestPredict:
    def test_mc_without_dropout_identical(self, rng):
        s = tiny_set(M=3, variant="MC", dropout=0.5)
        ps = predict_all(s, rng.normal(size=(5, 2)), "eval", dropout=False)
        assert all(np.array_equal(ps[0], p) for p in ps[1:])

    def test_mc_masks_stable_across_calls(self, rng):
        s = tiny_set(M=3, variant="MC", dropout=0.5)
        x = rng.normal(size=(5, 2))
        a = predict_all(s, x, "train", rng=np.random.default_rng(1))
        b = predict_all(s, x, "train", rng=np.random.default_rng(2))
        assert all(np.array_equal(p, q) for p, q in zip(a, b))

    def test_zero_classifiers_uniform(self, rng):
        s = tiny_set(M=2, k=4)
        for store in s.classifier_stores():
            for n in store:
                store.values(n)[...] = 0
        for p in predict_all(s, rng.normal(size=(3, 2))):
            np.testing.assert_allclose(p, 0.25)

    def test_ic_heads_differ(self, rng):
        ps = predict_all(tiny_set(M=3), rng.normal(size=(6, 2)))
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.max(np.abs(ps[i] - ps[j])) > 0

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            predict_all(tiny_set(), np.zeros((2, 3)))

    def test_ensemble(self, rng):
        s = tiny_set(M=3)
        x = rng.normal(size=(6, 2))
        ps = predict_all(s, x)
        ens = ensemble_predict(s, x)
        np.testing.assert_allclose(ens, (ps[0] + ps[1] + ps[2]) / 3, atol=1e-15)
        np.testing.assert_allclose(ens.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(ensemble_mean([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]),
                                      [[0.5, 0.5]])

    def test_anchor(self, rng):
        s = tiny_set(M=3)
        x = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(anchor_predict(s, x, 2), predict_all(s, x)[2])
        one = tiny_set(M=1)
        np.testing.assert_array_equal(anchor_predict(one, x, 0), ensemble_predict(one, x))
        with pytest.raises(DomainError):
            anchor_predict(s, x, 3)


class TestTransfer:
    def _step(self, hset, rng):
        x = rng.normal(size=(8, 2))
        logits, et, ct = hset.forward_heads(x, "train", rng=rng)
        dl = [rng.normal(size=z.shape) for z in logits]
        hset.backward_heads(et, ct, dl)
        if hset.frozen_classifiers:
            for store in hset.classifier_stores():
                store.zero_grad()
        for store in hset.trainable_stores():
            sgd_step(store, 0.1)

    def test_frozen_classifiers_unchanged(self, rng):
        t, snap = to_target(tiny_set(M=2))
        for _ in range(20):
            self._step(t, rng)
        assert snap.matches(t, "classifier")
        assert not snap.matches(t, "extractor")

    def test_unfrozen_classifiers_change(self, rng):
        t, snap = to_target(tiny_set(M=2), freeze_classifiers=False)
        self._step(t, rng)
        assert not snap.matches(t, "classifier")

    def test_source_set_untouched(self, rng):
        src = tiny_set(M=2)
        before = values_of(src)
        t, _ = to_target(src)
        self._step(t, rng)
        after = values_of(src)
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_snapshot_is_immutable(self):
        _, snap = to_target(tiny_set())
        with pytest.raises(ValueError):
            snap["extractor.0"]["0.W"][0, 0] = 1.0
        with pytest.raises(TypeError):
            snap.values["x"] = 1

    def test_snapshot_round_trip(self):
        t, snap = to_target(tiny_set(M=3))
        back = SourceSnapshot.from_dict(json.loads(json.dumps(snap.to_dict())), t)
        for key, entries in snap.values.items():
            for name, v in entries.items():
                assert v.tobytes() == back[key][name].tobytes()

    def test_independent_extractors(self, rng):
        t, _ = to_target(tiny_set(M=3), shared_extractor=False)
        assert len(t.extractor_stores()) == 3
        self._step(t, rng)
        w = [s.values("0.W") for s in t.extractor_stores()]
        assert not np.array_equal(w[0], w[1])


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["IC", "MC"])
    def test_round_trip(self, variant, rng):
        s = tiny_set(M=3, variant=variant, dropout=0.3)
        s.anchor = 1
        back = HypothesisSet.from_dict(json.loads(json.dumps(s.to_dict())))
        assert back.variant == variant and back.M == 3 and back.anchor == 1
        x = rng.normal(size=(5, 2))
        for p, q in zip(predict_all(s, x), predict_all(back, x)):
            assert p.tobytes() == q.tobytes()

    def test_bad_version(self):
        doc = tiny_set().to_dict()
        doc["format_version"] = 0
        with pytest.raises(ConfigError):
            HypothesisSet.from_dict(doc)


class TestGradientFlow:
    def _hd_loss(self, hset, x, anchor, stop=False):
        def loss():
            logits, et, ct = hset.forward_heads(x, "eval")
            ps = [softmax(z) for z in logits]
            b = hdmi_loss(ps, anchor, 0.5)
            mi = [-mutual_information_grad(p) / len(ps) for p in ps]
            hd = hypothesis_disparity_grads(ps, anchor, stop_anchor_grad=stop)
            dps = [a + 0.5 * h for a, h in zip(mi, hd)]
            hset.backward_heads(et, ct, [softmax_backward(p, d) for p, d in zip(ps, dps)])
            return b.total
        return loss

    def test_hdmi_fd_through_shared_extractor(self, rng):
        s = tiny_set(seed=3, M=3)
        x = rng.normal(size=(6, 2))
        assert max_fd_rel_error(s, self._hd_loss(s, x, 1)) < 1e-5

    def test_stop_gradient_breaks_fd(self, rng):
        s = tiny_set(seed=3, M=2)
        x = rng.normal(size=(6, 2))
        assert max_fd_rel_error(s, self._hd_loss(s, x, 0, stop=True)) > 1e-3
