"""Loss fixtures, brute-force mining/triplet oracles, and invariants."""

import math

import numpy as np
import pytest

from kpembed.errors import ContractError, ShapeError, TrainingDivergenceError
from kpembed.gradcheck import grad_check
from kpembed.losses import (
    LossWeights,
    batch_hard_mine,
    classification_ce,
    heatmap_mse,
    kp_triplet_loss,
    per_keypoint_triplet_terms,
    soft_margin_triplet,
    total_loss,
    visibility_bce,
)
from kpembed.model import AlignedEmbedding
from kpembed.tensor import Tensor


# -----------------------------------------------------------------------
# independent oracles
# -----------------------------------------------------------------------


def brute_mine(emb: np.ndarray, labels: np.ndarray):
    """O(M^2) loop-based hardest positive/negative search."""
    m = len(emb)
    out = []
    for a in range(m):
        d_ap, d_an = None, None
        for b in range(m):
            if b == a:
                continue
            d = float(np.linalg.norm(emb[a] - emb[b]))
            if labels[b] == labels[a]:
                d_ap = d if d_ap is None else max(d_ap, d)
            else:
                d_an = d if d_an is None else min(d_an, d)
        out.append((d_ap, d_an))
    return out


def brute_kp_triplet(emb: np.ndarray, labels, visibility, k: int, d: int) -> float:
    """Literal triple-loop evaluation of the visibility-masked triplet loss."""

    def mean_term(rows: np.ndarray, labs: np.ndarray) -> float | None:
        picks = brute_mine(rows, labs)
        vals = [
            math.log1p(math.exp(-(abs(ap - an)))) + max(ap - an, 0.0)
            for ap, an in picks
            if ap is not None and an is not None
        ]
        return float(np.mean(vals)) if vals else None

    per_kp = 0.0
    for i in range(k):
        subset = np.where(visibility[:, i])[0]
        if subset.size < 2:
            continue
        term = mean_term(emb[subset, i * d : (i + 1) * d], labels[subset])
        if term is not None:
            per_kp += term
    whole = mean_term(emb, labels)
    return per_kp / k + (whole if whole is not None else 0.0)


# -----------------------------------------------------------------------
# soft-margin triplet
# -----------------------------------------------------------------------


class TestSoftMarginTriplet:
    def test_symmetric_case(self):
        assert soft_margin_triplet(1.5, 1.5) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_easy_triplet(self):
        assert soft_margin_triplet(0.0, 10.0) == pytest.approx(4.5399e-5, rel=1e-4)

    def test_hard_triplet(self):
        assert soft_margin_triplet(2.0, 0.0) == pytest.approx(2.126928, abs=1e-6)

    def test_strictly_positive(self):
        for ap, an in [(0.0, 100.0), (0.0, 0.0), (50.0, 0.0)]:
            assert soft_margin_triplet(ap, an) > 0.0

    def test_monotone_in_both_arguments(self):
        base = soft_margin_triplet(1.0, 1.0)
        assert soft_margin_triplet(1.1, 1.0) > base
        assert soft_margin_triplet(1.0, 1.1) < base

    def test_tensor_form_matches_scalar(self):
        ap = Tensor(np.array([0.3, 2.0]))
        an = Tensor(np.array([1.1, 0.5]))
        got = soft_margin_triplet(ap, an).data
        expect = [soft_margin_triplet(0.3, 1.1), soft_margin_triplet(2.0, 0.5)]
        np.testing.assert_allclose(got, expect, atol=1e-15)


# -----------------------------------------------------------------------
# batch-hard mining
# -----------------------------------------------------------------------


class TestBatchHardMine:
    def test_one_dimensional_fixture(self):
        emb = Tensor(np.array([[0.0], [1.0], [0.5], [3.0]]))
        labels = np.array([0, 0, 1, 1])
        mined = batch_hard_mine(emb, labels)
        assert mined.valid.all()
        # anchor 0: hardest positive 1.0 away, nearest negative 0.5 away
        assert mined.d_ap.data[0] == pytest.approx(1.0)
        assert mined.d_an.data[0] == pytest.approx(0.5)

    def test_single_class_all_invalid(self):
        emb = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        mined = batch_hard_mine(emb, np.zeros(4, dtype=int))
        assert not mined.valid.any()
        assert mined.d_ap is None

    def test_matches_brute_force_on_100_batches(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            m = int(rng.integers(2, 20))
            dim = int(rng.integers(1, 6))
            emb = rng.normal(size=(m, dim))
            labels = rng.integers(0, 4, size=m)
            mined = batch_hard_mine(Tensor(emb), labels)
            oracle = brute_mine(emb, labels)
            vi = 0
            for a in range(m):
                ap, an = oracle[a]
                if ap is None or an is None:
                    assert not mined.valid[a]
                    continue
                assert mined.valid[a]
                assert abs(mined.d_ap.data[vi] - ap) < 1e-10
                assert abs(mined.d_an.data[vi] - an) < 1e-10
                vi += 1

    def test_rejects_tiny_batch(self):
        with pytest.raises(ContractError):
            batch_hard_mine(Tensor(np.zeros((1, 2))), np.array([0]))


# -----------------------------------------------------------------------
# keypoint triplet loss
# -----------------------------------------------------------------------


def embed(arr: np.ndarray, k: int, d: int) -> AlignedEmbedding:
    return AlignedEmbedding(Tensor(arr), k, d)


class TestKpTripletLoss:
    def test_all_invisible_reduces_to_whole_term(self):
        rng = np.random.default_rng(1)
        arr = rng.normal(size=(6, 8))
        labels = np.array([0, 0, 0, 1, 1, 1])
        vis = np.zeros((6, 4), dtype=bool)
        got = kp_triplet_loss(embed(arr, 4, 2), labels, vis)
        mined = batch_hard_mine(Tensor(arr), labels)
        expect = soft_margin_triplet(mined.d_ap, mined.d_an).mean()
        np.testing.assert_allclose(got.data, expect.data, atol=1e-12)

    def test_single_keypoint_structural_identity(self):
        rng = np.random.default_rng(2)
        arr = rng.normal(size=(6, 3))
        labels = np.array([0, 0, 1, 1, 2, 2])
        vis = np.ones((6, 1), dtype=bool)
        got = kp_triplet_loss(embed(arr, 1, 3), labels, vis)
        mined = batch_hard_mine(Tensor(arr), labels)
        whole = soft_margin_triplet(mined.d_ap, mined.d_an).mean()
        np.testing.assert_allclose(got.data, 2.0 * whole.data, atol=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(4, 12))
            k = int(rng.integers(1, 5))
            d = int(rng.integers(1, 4))
            arr = rng.normal(size=(n, k * d))
            labels = rng.integers(0, 3, size=n)
            vis = rng.random((n, k)) < 0.7
            got = kp_triplet_loss(embed(arr, k, d), labels, vis).item()
            expect = brute_kp_triplet(arr, labels, vis, k, d)
            assert abs(got - expect) < 1e-10

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        arr = rng.normal(size=(8, 6))
        labels = rng.integers(0, 3, size=8)
        vis = rng.random((8, 3)) < 0.7
        base = kp_triplet_loss(embed(arr, 3, 2), labels, vis).item()
        for _ in range(5):
            perm = rng.permutation(8)
            permuted = kp_triplet_loss(
                embed(arr[perm], 3, 2), labels[perm], vis[perm]
            ).item()
            assert abs(base - permuted) < 1e-10

    def test_masking_ignores_invisible_rows_exactly(self):
        rng = np.random.default_rng(5)
        arr = rng.normal(size=(8, 4))
        labels = np.array([0, 0, 1, 1, 0, 1, 0, 1])
        vis = np.ones((8, 2), dtype=bool)
        vis[[2, 5], 0] = False
        terms = per_keypoint_triplet_terms(embed(arr, 2, 2), labels, vis)

        tampered = arr.copy()
        tampered[[2, 5], 0:2] += 100.0  # outside V_0, subvector 0 slice
        terms2 = per_keypoint_triplet_terms(embed(tampered, 2, 2), labels, vis)
        np.testing.assert_array_equal(terms[0].data, terms2[0].data)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            arr = rng.normal(size=(6, 4))
            labels = rng.integers(0, 2, size=6)
            vis = rng.random((6, 2)) < 0.5
            assert kp_triplet_loss(embed(arr, 2, 2), labels, vis).item() >= 0.0

    def test_gradients_reach_embedding(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        labels = np.array([0, 0, 1, 1, 2, 2])
        vis = rng.random((6, 2)) < 0.8
        kp_triplet_loss(AlignedEmbedding(x, 2, 2), labels, vis).backward()
        assert x.grad is not None and np.any(x.grad != 0.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        labels = np.array([0, 0, 1, 1, 2, 2])
        vis = rng.random((6, 2)) < 0.8
        report = grad_check(
            lambda: kp_triplet_loss(AlignedEmbedding(x, 2, 2), labels, vis), [x], step=1e-6
        )
        assert report.max_rel_error < 1e-4, report.summary()


# -----------------------------------------------------------------------
# heatmap reconstruction loss
# -----------------------------------------------------------------------


class TestHeatmapMse:
    def test_perfect_reconstruction(self):
        gt = np.full((1, 1, 2, 2), 0.5)
        assert heatmap_mse(Tensor(np.zeros((1, 1, 2, 2))), gt).item() == 0.0

    def test_zero_logits_zero_targets(self):
        gt = np.zeros((2, 3, 4, 4))
        assert heatmap_mse(Tensor(np.zeros((2, 3, 4, 4))), gt).item() == pytest.approx(0.25)

    def test_zero_logits_single_peak(self):
        gt = np.zeros((1, 1, 64, 64))
        gt[0, 0, 10, 20] = 1.0
        got = heatmap_mse(Tensor(np.zeros((1, 1, 64, 64))), gt).item()
        assert got == pytest.approx((0.25 * 4095 + 0.25 * 1) / 4096, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            heatmap_mse(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 3, 3)))


# -----------------------------------------------------------------------
# visibility loss
# -----------------------------------------------------------------------


class TestVisibilityBce:
    def test_zero_logit_invisible(self):
        logits = np.zeros((1, 1, 2, 2))
        got = visibility_bce(Tensor(logits), np.zeros((1, 1))).item()
        assert got == pytest.approx(math.log(2.0), abs=1e-12)

    def test_high_logit_visible(self):
        logits = np.full((1, 1, 2, 2), -3.0)
        logits[0, 0, 1, 1] = 10.0
        got = visibility_bce(Tensor(logits), np.ones((1, 1))).item()
        assert got == pytest.approx(4.5399e-5, rel=1e-4)

    def test_low_logit_visible_safe_form(self):
        logits = np.full((1, 1, 3, 3), -12.0)
        logits[0, 0, 0, 0] = -10.0
        got = visibility_bce(Tensor(logits), np.ones((1, 1))).item()
        assert got == pytest.approx(10.0000454, abs=1e-6)

    def test_mean_over_batch_and_keypoints(self):
        logits = np.zeros((2, 3, 2, 2))
        y = np.array([[0, 1, 0], [1, 0, 1]], dtype=float)
        got = visibility_bce(Tensor(logits), y).item()
        assert got == pytest.approx(math.log(2.0), abs=1e-12)

    def test_rejects_non_binary_targets(self):
        with pytest.raises(ContractError):
            visibility_bce(Tensor(np.zeros((1, 1, 2, 2))), np.array([[0.5]]))

    def test_max_is_over_spatial_logits(self):
        logits = np.full((1, 1, 2, 2), -50.0)
        logits[0, 0, 0, 1] = 30.0
        got = visibility_bce(Tensor(logits), np.ones((1, 1))).item()
        assert got == pytest.approx(0.0, abs=1e-12)


# -----------------------------------------------------------------------
# classification loss
# -----------------------------------------------------------------------


class TestClassificationCe:
    def test_uniform_scores(self):
        got = classification_ce(Tensor(np.zeros((3, 4))), np.array([0, 1, 2])).item()
        assert got == pytest.approx(math.log(4.0), abs=1e-12)

    def test_confident_correct(self):
        scores = np.zeros((1, 5))
        scores[0, 2] = 50.0
        got = classification_ce(Tensor(scores), np.array([2])).item()
        assert got == pytest.approx(0.0, abs=1e-12)

    def test_two_class_fixture(self):
        got = classification_ce(Tensor(np.array([[1.0, 0.0]])), np.array([0])).item()
        assert got == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-12)

    def test_large_logits_stable(self):
        scores = np.array([[1000.0, 999.0]])
        got = classification_ce(Tensor(scores), np.array([1])).item()
        assert np.isfinite(got)
        assert got == pytest.approx(math.log(1.0 + math.exp(1.0)), abs=1e-9)

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            classification_ce(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        labels = np.array([0, 2, 4, 1])
        report = grad_check(lambda: classification_ce(x, labels), [x], step=1e-6)
        assert report.max_rel_error < 1e-5, report.summary()


# -----------------------------------------------------------------------
# total loss
# -----------------------------------------------------------------------


def scalar(v: float) -> Tensor:
    return Tensor(np.asarray(v, dtype=np.float64))


class TestTotalLoss:
    def test_reference_weights_fixture(self):
        comps = {name: scalar(0.1) for name in ("triplet", "heatmap", "visibility", "classification")}
        got = total_loss(comps, LossWeights(10.0, 1000.0, 1.0, 1.0)).item()
        assert got == pytest.approx(101.2, abs=1e-9)

    def test_all_zero_weights(self):
        comps = {name: scalar(5.0) for name in ("triplet", "heatmap", "visibility", "classification")}
        assert total_loss(comps, LossWeights(0.0, 0.0, 0.0, 0.0)).item() == 0.0

    def test_single_weight_isolates_component(self):
        comps = {
            "triplet": scalar(3.0),
            "heatmap": scalar(7.0),
            "visibility": scalar(11.0),
            "classification": scalar(13.0),
        }
        got = total_loss(comps, LossWeights(0.0, 0.0, 2.0, 0.0)).item()
        assert got == pytest.approx(22.0)

    def test_nan_component_identified(self):
        comps = {"triplet": scalar(float("nan")), "heatmap": scalar(0.0)}
        with pytest.raises(TrainingDivergenceError, match="triplet"):
            total_loss(comps, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ContractError):
            LossWeights(triplet=-1.0)

    def test_zero_iff_weighted_components_zero(self):
        comps = {"triplet": scalar(0.0), "classification": scalar(2.0)}
        w = LossWeights(10.0, 1000.0, 1.0, 0.0)
        assert total_loss(comps, w).item() == 0.0
        w2 = LossWeights(10.0, 1000.0, 1.0, 0.5)
        assert total_loss(comps, w2).item() > 0.0
