import numpy as np
import pytest

from iterquant.errors import DimensionError, ValidationError
from iterquant.model_io import ModelBundle
from iterquant.pruning import (
    apply_mask,
    apply_mask_bundle,
    magnitude_prune,
    mask_from_bundle,
    mask_to_bundle,
)
from iterquant.quantizer import dequantize, quantize_tensor


def one_tensor_bundle(m, name="w"):
    return ModelBundle([(name, np.asarray(m, dtype=np.float64))])


class TestMagnitudePrune:
    def test_hand_example(self):
        bundle = one_tensor_bundle([[0.1, -0.5, 0.2, 0.9]])
        mask = magnitude_prune(bundle, 0.5)
        np.testing.assert_array_equal(mask.masks["w"], [[False, True, False, True]])

    def test_rate_zero_all_survive(self):
        bundle = one_tensor_bundle(np.arange(12.0).reshape(3, 4))
        mask = magnitude_prune(bundle, 0.0)
        assert mask.survivor_count() == 12

    def test_exact_survivor_count(self):
        rng = np.random.default_rng(50)
        bundle = one_tensor_bundle(rng.normal(size=(100, 100)))
        mask = magnitude_prune(bundle, 0.8)
        assert mask.survivor_count() == 2000
        assert mask.achieved_rate() == pytest.approx(0.8)

    def test_threshold_correctness_vs_sort_oracle(self):
        """Every pruned |w| <= every surviving |w| (full-sort oracle)."""
        rng = np.random.default_rng(51)
        for _ in range(10):
            m = rng.normal(size=(13, 17))
            rate = float(rng.uniform(0.1, 0.9))
            mask = magnitude_prune(one_tensor_bundle(m), rate)
            mags = np.abs(m)
            pruned = mags[~mask.masks["w"]]
            survived = mags[mask.masks["w"]]
            n_prune = int(np.ceil(rate * m.size))
            assert pruned.size == n_prune
            expected_pruned = np.sort(mags.ravel())[:n_prune]
            np.testing.assert_allclose(np.sort(pruned), expected_pruned)
            if pruned.size and survived.size:
                assert pruned.max() <= survived.min() + 1e-15

    def test_ties_pruned_by_index_order(self):
        m = np.array([[0.5, 0.5, 0.5, 0.5]])
        mask = magnitude_prune(one_tensor_bundle(m), 0.5)
        np.testing.assert_array_equal(mask.masks["w"], [[False, False, True, True]])

    def test_global_equals_per_tensor_for_single_tensor(self):
        rng = np.random.default_rng(52)
        bundle = one_tensor_bundle(rng.normal(size=(20, 30)))
        per = magnitude_prune(bundle, 0.7, scope="per-tensor")
        glob = magnitude_prune(bundle, 0.7, scope="global")
        np.testing.assert_array_equal(per.masks["w"], glob.masks["w"])

    def test_global_pools_across_tensors(self):
        big = ModelBundle([
            ("small", np.full((1, 4), 0.01)),
            ("large", np.full((1, 4), 10.0)),
        ])
        mask = magnitude_prune(big, 0.5, scope="global")
        assert mask.masks["small"].sum() == 0  # all small weights pruned
        assert mask.masks["large"].sum() == 4

    def test_tensor_filter(self):
        bundle = ModelBundle([
            ("keep", np.ones((2, 2))),
            ("skip", np.ones((2, 2))),
        ])
        mask = magnitude_prune(bundle, 0.5, tensor_filter=lambda n: n == "keep")
        assert set(mask.masks) == {"keep"}

    def test_rate_one_rejected(self):
        with pytest.raises(ValidationError):
            magnitude_prune(one_tensor_bundle(np.ones((2, 2))), 1.0)

    def test_bad_scope(self):
        with pytest.raises(ValidationError):
            magnitude_prune(one_tensor_bundle(np.ones((2, 2))), 0.5, scope="rows")


class TestApplyMask:
    def test_identity_with_full_mask(self):
        m = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(apply_mask(m, np.ones((2, 3), bool)), m)

    def test_zero_with_empty_mask(self):
        m = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(
            apply_mask(m, np.zeros((2, 3), bool)), np.zeros((2, 3))
        )

    def test_idempotent(self):
        rng = np.random.default_rng(53)
        m = rng.normal(size=(4, 5))
        mask = rng.random((4, 5)) < 0.5
        once = apply_mask(m, mask)
        np.testing.assert_array_equal(apply_mask(once, mask), once)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            apply_mask(np.ones((2, 3)), np.ones((3, 2), bool))

    def test_bundle_apply(self):
        rng = np.random.default_rng(54)
        bundle = one_tensor_bundle(rng.normal(size=(6, 6)))
        mask = magnitude_prune(bundle, 0.5)
        pruned = apply_mask_bundle(bundle, mask)
        assert np.count_nonzero(pruned.tensor("w")) == mask.survivor_count()


class TestCompositionWithQuantizer:
    def test_quantize_then_dequantize_zeros_pruned(self):
        rng = np.random.default_rng(55)
        m = rng.normal(size=(10, 40))
        mask = magnitude_prune(one_tensor_bundle(m), 0.8).masks["w"]
        q = quantize_tensor(m, 1, 2, mask=mask, method="alternating")
        deq = dequantize(q)
        assert np.all(deq[~mask] == 0.0)
        assert np.all(deq[mask] != 0.0)


class TestMaskSerialization:
    def test_round_trip_via_bundle(self, tmp_path):
        from iterquant.model_io import load_model, save_model

        rng = np.random.default_rng(56)
        bundle = one_tensor_bundle(rng.normal(size=(9, 9)))
        mask = magnitude_prune(bundle, 0.75)
        path = tmp_path / "mask.iqwt"
        save_model(mask_to_bundle(mask), path)
        loaded = mask_from_bundle(load_model(path))
        np.testing.assert_array_equal(loaded.masks["w"], mask.masks["w"])
        assert loaded.pruning_rate == 0.75

    def test_non_mask_bundle_rejected(self):
        with pytest.raises(ValidationError):
            mask_from_bundle(one_tensor_bundle(np.ones((2, 2))))
