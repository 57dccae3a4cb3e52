import numpy as np
import pytest

from conftest import tiny_config
from oracles import wlra_oracle
from unlearnlab import adapters as ad
from unlearnlab import model as md
from unlearnlab.numerics import ShapeError, svd, truncate


class TestSpec:
    def test_parse_targets(self):
        assert ad.parse_targets("q,v,ffn") == ("Q", "V", "FFN_in", "FFN_out")
        assert ad.parse_targets("K, o") == ("K", "O")
        with pytest.raises(ValueError):
            ad.parse_targets("q,mlp")

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ad.AdapterSpec(rank=0)
        with pytest.raises(ValueError):
            ad.AdapterSpec(targets=())
        with pytest.raises(ValueError):
            ad.AdapterSpec(init="gaussian")

    def test_rank_too_large(self, tiny_params):
        with pytest.raises(ShapeError):
            ad.attach_default(tiny_params, ad.AdapterSpec(rank=17), seed=0)


class TestDefaultInit:
    def test_zero_b_and_bounded_a(self, tiny_params):
        ads = ad.attach_default(tiny_params, ad.AdapterSpec(rank=4), seed=3)
        assert len(ads) == 2 * 4
        for name, a in ads.adapters.items():
            d, k = tiny_params[name].shape
            assert a.a.shape == (4, k) and a.b.shape == (d, 4)
            assert np.all(a.b == 0)
            assert np.abs(a.a).max() <= np.sqrt(6.0 / k)

    def test_transparent_at_attachment(self, tiny_params, rng):
        x = rng.integers(0, 23, 10)
        ads = ad.attach_default(tiny_params, ad.AdapterSpec(rank=4), seed=3)
        np.testing.assert_array_equal(md.forward(tiny_params, ads, x), md.forward(tiny_params, None, x))


class TestFisher:
    def test_per_sequence_squares(self, tiny_params, rng):
        from unlearnlab.objectives import Kind, ObjectiveSpec

        seqs = rng.integers(0, 23, (3, 8))
        est = ad.estimate_fisher(tiny_params, seqs, ["blk0.q"])
        manual = sum(md.grads(tiny_params, None, ObjectiveSpec(Kind.LM), md.Batch(s[None]))[1]["blk0.q"] ** 2 for s in seqs)
        np.testing.assert_allclose(est.sums["blk0.q"], manual, atol=1e-15)
        assert est.n_examples == 3

    def test_merge_of_shards_equals_whole(self, tiny_params, rng):
        seqs = rng.integers(0, 23, (5, 8))
        whole = ad.estimate_fisher(tiny_params, seqs)
        parts = ad.estimate_fisher(tiny_params, seqs[:2]).merge(ad.estimate_fisher(tiny_params, seqs[2:]))
        assert parts.n_examples == 5
        for k in whole.sums:
            np.testing.assert_allclose(parts.sums[k], whole.sums[k], rtol=1e-12, atol=1e-300)

    def test_relative_fisher_frozen(self):
        f = ad.FisherEstimate({"w": np.array([[2.0, 4.0]])}, 2)
        r = ad.FisherEstimate({"w": np.array([[1.0, 0.0]])}, 1)
        np.testing.assert_allclose(ad.relative_fisher(f, r)["w"], [[1.0 / (1.0 + 1e-8), 2.0 / 1e-8]])

    def test_relative_fisher_errors(self):
        f = ad.FisherEstimate({"w": np.ones((2, 2))}, 1)
        with pytest.raises(ShapeError):
            ad.relative_fisher(f, ad.FisherEstimate({"w": np.ones((2, 3))}, 1))
        with pytest.raises(ValueError):
            ad.relative_fisher(f, f, eps=0.0)
        with pytest.raises(ValueError):
            ad.FisherEstimate({"w": np.ones(2)}, 0).mean()


class TestFloraInit:
    def test_unit_weights_match_truncated_svd(self, rng):
        w = rng.standard_normal((8, 6))
        a, b, w_star = ad.flora_init(w, np.ones_like(w) / 6.0, 2)
        np.testing.assert_allclose(b @ a, truncate(svd(w), 2).reconstruct(), atol=1e-12)
        np.testing.assert_allclose(w_star + b @ a, w, atol=1e-14)

    def test_closed_form_beats_projected_gradient(self, rng):
        f = rng.uniform(0.01, 3.0, (8, 6))
        w = rng.standard_normal((8, 6))
        a, b, _ = ad.flora_init(w, f, 2)
        dvec = np.sqrt(f.sum(axis=1))[:, None] * np.ones((1, 6))
        x = wlra_oracle(w, dvec, 2, steps=2000)
        assert ad.weighted_objective(w, dvec, a, b) <= float(np.sum((dvec * (w - x)) ** 2)) + 1e-6

    def test_floor_applies_to_zero_rows(self):
        w = np.arange(12.0).reshape(4, 3)
        f = np.zeros((4, 3))
        a, b, _ = ad.flora_init(w, f, 1)
        assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))

    def test_errors(self, rng):
        w = rng.standard_normal((4, 3))
        with pytest.raises(ShapeError):
            ad.flora_init(w, np.ones((3, 4)), 1)
        with pytest.raises(ShapeError):
            ad.flora_init(w, np.ones((4, 3)), 4)
        with pytest.raises(ValueError):
            ad.flora_init(w, np.ones((4, 3)), 1, floor=0.0)

    def test_attach_flora_compensates(self, tiny_params, rng):
        spec = ad.AdapterSpec(rank=3, init="flora")
        f_rel = {n: rng.uniform(0, 1, tiny_params[n].shape) for n in spec.tensor_names(tiny_params.config)}
        new, ads = ad.attach_flora(tiny_params, spec, f_rel)
        assert ads.init == "flora" and set(ads.compensated) == set(ads.adapters)
        x = rng.integers(0, 23, 12)
        np.testing.assert_allclose(md.forward(new, ads, x), md.forward(tiny_params, None, x), rtol=1e-12, atol=1e-12)
        # untouched tensors are shared, targets replaced
        assert new["head"] is tiny_params["head"]
        assert not np.array_equal(new["blk0.q"], tiny_params["blk0.q"])


class TestMerge:
    def test_merge_equals_adapted_forward(self, tiny_params, rng):
        ads = ad.attach_default(tiny_params, ad.AdapterSpec(rank=2), seed=0)
        ads = ad.AdapterSet({k: ad.LoraAdapter(k, v.a, rng.standard_normal(v.b.shape) * 0.1) for k, v in ads.adapters.items()})
        x = rng.integers(0, 23, 9)
        merged = ad.merge(tiny_params, ads)
        np.testing.assert_allclose(md.forward(merged, None, x), md.forward(tiny_params, ads, x), atol=1e-12)

    def test_merge_none_is_identity(self, tiny_params):
        assert ad.merge(tiny_params, None) is tiny_params

    def test_set_invariants(self):
        a = ad.LoraAdapter("blk0.q", np.zeros((1, 2)), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            ad.AdapterSet({"blk0.q": a}, (), "flora")
        with pytest.raises(ValueError):
            ad.AdapterSet({"blk0.q": a}, ("blk0.q",), "default")
