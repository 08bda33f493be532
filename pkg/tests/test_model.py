"""Model assembly: shapes, attention contract, locality, and determinism."""

import numpy as np
import pytest

from kpembed.errors import ConfigError
from kpembed.gradcheck import grad_check
from kpembed.model import (
    ChannelAttention,
    KeypointBlock,
    KeypointEmbeddingNet,
    ModelConfig,
    ParameterStore,
)
from kpembed.tensor import Tensor


def micro_config(**kw):
    base = dict(
        keypoint_names=["head", "tail"],
        num_classes=3,
        input_size=(16, 16),
        backbone_channels=(4, 8),
        reduction=4,
        heatmap_size=(8, 8),
    )
    base.update(kw)
    return ModelConfig(**base)


class TestModelConfig:
    def test_derived_quantities(self):
        cfg = micro_config()
        assert cfg.channels == 8
        assert cfg.subvector_length == 2
        assert cfg.feature_size == (4, 4)
        assert cfg.decoder_stages == 1
        assert cfg.embedding_length == 4

    def test_reduction_must_divide_channels(self):
        with pytest.raises(ConfigError):
            micro_config(reduction=3)

    def test_duplicate_keypoints_rejected(self):
        with pytest.raises(ConfigError):
            micro_config(keypoint_names=["a", "a"])

    def test_heatmap_smaller_than_features_rejected(self):
        with pytest.raises(ConfigError):
            micro_config(heatmap_size=(2, 2))

    def test_non_power_of_two_ratio_rejected(self):
        with pytest.raises(ConfigError):
            micro_config(input_size=(48, 48), heatmap_size=(36, 36))


class TestBackbone:
    def test_desk_scale_shape(self):
        cfg = ModelConfig(
            keypoint_names=[f"k{i}" for i in range(4)], num_classes=5,
            input_size=(64, 64), backbone_channels=(16, 32, 64, 128),
            reduction=8, heatmap_size=(16, 16),
        )
        net = KeypointEmbeddingNet(cfg, seed=0)
        out = net.backbone_forward(Tensor(np.zeros((1, 3, 64, 64))), "eval")
        assert out.shape == (1, 128, 4, 4)

    def test_paper_scale_shape(self):
        cfg = ModelConfig(
            keypoint_names=["k"], num_classes=2,
            input_size=(256, 256), backbone_channels=(8, 16, 32, 2048),
            reduction=32, heatmap_size=(64, 64),
        )
        net = KeypointEmbeddingNet(cfg, seed=0)
        out = net.backbone_forward(Tensor(np.zeros((1, 3, 256, 256))), "eval")
        assert out.shape == (1, 2048, 16, 16)

    def test_batch_axis_preserved(self):
        cfg = micro_config()
        net = KeypointEmbeddingNet(cfg, seed=0)
        out = net.backbone_forward(Tensor(np.zeros((2, 3, 16, 16))), "eval")
        assert out.shape[0] == 2

    def test_wrong_input_size_rejected(self):
        net = KeypointEmbeddingNet(micro_config(), seed=0)
        with pytest.raises(ConfigError):
            net.backbone_forward(Tensor(np.zeros((1, 3, 8, 8))), "eval")


class TestChannelAttention:
    def _build(self, channels=4, hidden=2, seed=0):
        cfg = micro_config()
        store = ParameterStore()
        buffers = {}
        att = ChannelAttention(
            store, buffers, "att", channels, hidden, cfg, np.random.default_rng(seed)
        )
        return att, store

    def test_zero_weights_give_half(self):
        att, store = self._build()
        for name, p in store.items():
            if not name.endswith(".gamma"):
                p.data[:] = 0.0
        out = att(Tensor(np.random.default_rng(0).normal(size=(3, 4, 2, 2))), "train")
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_constant_features_make_branches_coincide(self):
        att, _ = self._build()
        x = Tensor(np.full((2, 4, 3, 3), 1.7))
        got = att(x, "train")
        # GAP == GMP on constant maps, so the sum is twice one branch
        from kpembed.tensor import global_avg_pool

        one_branch = att._shared(global_avg_pool(x), "train")
        expect = 1.0 / (1.0 + np.exp(-2.0 * one_branch.data))
        np.testing.assert_allclose(got.data, expect, atol=1e-12)

    def test_matches_hand_computation(self):
        att, store = self._build(channels=2, hidden=1, seed=9)
        rng = np.random.default_rng(42)
        x = rng.normal(size=(3, 2, 2, 2))
        got = att(Tensor(x), "train").data

        w1 = store["att.fc1.weight"].data
        g1 = store["att.bn1.gamma"].data
        be1 = store["att.bn1.beta"].data
        w2 = store["att.fc2.weight"].data
        g2 = store["att.bn2.gamma"].data
        be2 = store["att.bn2.beta"].data
        eps = 1e-5

        def bn(z, gamma, beta):
            mu = z.mean(axis=0)
            var = ((z - mu) ** 2).mean(axis=0)
            return (z - mu) / np.sqrt(var + eps) * gamma + beta

        def phi(z):
            a = np.maximum(z @ w1.T, 0.0)
            a = bn(a, g1, be1)
            a = np.maximum(a @ w2.T, 0.0)
            return bn(a, g2, be2)

        gap = x.mean(axis=(2, 3))
        gmp = x.max(axis=(2, 3))
        expect = 1.0 / (1.0 + np.exp(-(phi(gap) + phi(gmp))))
        np.testing.assert_allclose(got, expect, atol=1e-12)

    def test_strictly_inside_unit_interval(self):
        att, _ = self._build(seed=3)
        rng = np.random.default_rng(8)
        for _ in range(5):
            out = att(Tensor(rng.normal(size=(4, 4, 3, 3)) * 5.0), "train").data
            assert np.all(out > 0.0) and np.all(out < 1.0)


class TestKeypointBlock:
    def test_paper_scale_block_shapes(self):
        cfg = ModelConfig(
            keypoint_names=["k"], num_classes=2,
            input_size=(256, 256), backbone_channels=(8, 16, 32, 2048),
            reduction=32, heatmap_size=(64, 64),
        )
        assert cfg.subvector_length == 64
        assert cfg.decoder_stages == 2
        store = ParameterStore()
        buffers = {}
        block = KeypointBlock(store, buffers, "b", cfg, np.random.default_rng(0))
        features = Tensor(np.random.default_rng(1).normal(size=(1, 2048, 16, 16)))
        emb, logits = block.forward(features, "eval")
        assert emb.shape == (1, 64)
        assert logits.shape == (1, 1, 64, 64)
        assert len(block.decoder.stages) == 2

    def test_zero_parameters_zero_features(self):
        cfg = micro_config()
        store = ParameterStore()
        block = KeypointBlock(store, {}, "b", cfg, np.random.default_rng(0))
        for name, p in store.items():
            if not name.endswith(".gamma"):
                p.data[:] = 0.0
        emb, logits = block.forward(Tensor(np.zeros((2, 8, 4, 4))), "eval")
        np.testing.assert_array_equal(emb.data, 0.0)
        assert np.ptp(logits.data) == 0.0  # bias/BN-determined constant map

    def test_zeroed_attention_channel_blocks_feature_channel(self):
        cfg = micro_config()
        store = ParameterStore()
        block = KeypointBlock(store, {}, "b", cfg, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        feats = rng.normal(size=(2, 8, 4, 4))
        att = block.compute_attention(Tensor(feats), "eval")
        att_fixed = att.data.copy()
        att_fixed[:, 3] = 0.0

        emb0, _ = block.forward(Tensor(feats), "eval", decode=False, attention=Tensor(att_fixed))
        perturbed = feats.copy()
        perturbed[:, 3] += rng.normal(size=(2, 4, 4)) * 10.0
        emb1, _ = block.forward(
            Tensor(perturbed), "eval", decode=False, attention=Tensor(att_fixed)
        )
        np.testing.assert_array_equal(emb0.data, emb1.data)

    def test_block_gradcheck_micro_batch(self):
        cfg = micro_config(dtype="float64")
        store = ParameterStore()
        buffers = {}
        block = KeypointBlock(store, buffers, "b", cfg, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        feats = Tensor(rng.normal(size=(2, 8, 4, 4)), requires_grad=True)

        def f():
            emb, logits = block.forward(feats, "train")
            return (emb * emb).sum() + logits.sigmoid().mean()

        params = {"features": feats}
        params.update({n: p for n, p in store.items()})
        report = grad_check(f, params, step=1e-5, max_elements_per_input=6)
        assert report.nonfinite == 0, report.summary()
        assert report.max_rel_error < 1e-4, report.summary()


class TestFullNetwork:
    def test_fifteen_subvectors_of_64(self):
        cfg = ModelConfig(
            keypoint_names=[f"k{i}" for i in range(15)], num_classes=4,
            input_size=(32, 32), backbone_channels=(8, 128),
            reduction=2, heatmap_size=(8, 8),
        )
        net = KeypointEmbeddingNet(cfg, seed=0)
        res = net.forward(Tensor(np.zeros((1, 3, 32, 32))), mode="eval")
        assert res.embedding.vector.shape == (1, 960)
        assert res.embedding.subvector(14).shape == (1, 64)

    def test_eval_returns_embedding_only(self):
        net = KeypointEmbeddingNet(micro_config(), seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 16, 16)))
        res = net.forward(x, mode="eval")
        assert res.class_scores is None and res.heatmap_logits is None
        full = net.forward(x, mode="eval", heads=True)
        assert full.class_scores.shape == (2, 3)
        assert full.heatmap_logits.shape == (2, 2, 8, 8)
        # heads do not feed the embedding
        np.testing.assert_array_equal(res.embedding.vector.data, full.embedding.vector.data)

    def test_block_order_contract(self):
        net = KeypointEmbeddingNet(micro_config(), seed=1)
        x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 16, 16)))
        base = net.forward(x, mode="eval").embedding
        net.blocks = [net.blocks[1], net.blocks[0]]
        swapped = net.forward(x, mode="eval").embedding
        np.testing.assert_array_equal(swapped.subvector(0).data, base.subvector(1).data)
        np.testing.assert_array_equal(swapped.subvector(1).data, base.subvector(0).data)

    def test_subvector_locality(self):
        net = KeypointEmbeddingNet(micro_config(), seed=3)
        x = Tensor(np.random.default_rng(4).normal(size=(2, 3, 16, 16)))
        before = net.forward(x, mode="eval").embedding
        for name, p in net.store.items():
            if name.startswith("blocks.01."):
                p.data += 0.37
        after = net.forward(x, mode="eval").embedding
        np.testing.assert_array_equal(before.subvector(0).data, after.subvector(0).data)
        assert np.any(before.subvector(1).data != after.subvector(1).data)

    def test_attention_param_count(self):
        # both fc layers are bias-free (batch norm directly follows), so the
        # count is the two weight matrices plus the BN scales and shifts
        cfg = micro_config()
        net = KeypointEmbeddingNet(cfg, seed=0)
        c, d = cfg.channels, cfg.subvector_length
        count = sum(
            p.size for n, p in net.store.items() if n.startswith("blocks.00.attention.")
        )
        assert count == c * d + d * c + 2 * d + 2 * c

    def test_eval_forward_is_pure(self):
        net = KeypointEmbeddingNet(micro_config(), seed=5)
        x = Tensor(np.random.default_rng(6).normal(size=(3, 3, 16, 16)))
        stats_before = {
            k: (s.running_mean.copy(), s.running_var.copy()) for k, s in net.buffers.items()
        }
        a = net.forward(x, mode="eval", heads=True)
        b = net.forward(x, mode="eval", heads=True)
        np.testing.assert_array_equal(a.embedding.vector.data, b.embedding.vector.data)
        np.testing.assert_array_equal(a.heatmap_logits.data, b.heatmap_logits.data)
        for k, s in net.buffers.items():
            np.testing.assert_array_equal(s.running_mean, stats_before[k][0])
            np.testing.assert_array_equal(s.running_var, stats_before[k][1])

    def test_train_mode_outputs_all_heads(self):
        net = KeypointEmbeddingNet(micro_config(), seed=7)
        x = Tensor(np.random.default_rng(8).normal(size=(4, 3, 16, 16)))
        res = net.forward(x, mode="train")
        assert res.embedding.vector.shape == (4, 4)
        assert res.class_scores.shape == (4, 3)
        assert res.heatmap_logits.shape == (4, 2, 8, 8)
        assert len(res.attention) == 2
        for att in res.attention:
            assert np.all(att.data > 0.0) and np.all(att.data < 1.0)

    def test_variants_forward(self):
        for variant in ("no_attention", "no_blocks"):
            net = KeypointEmbeddingNet(micro_config(variant=variant), seed=9)
            x = Tensor(np.random.default_rng(10).normal(size=(2, 3, 16, 16)))
            res = net.forward(x, mode="train")
            assert res.embedding.vector.shape == (2, 4)
            assert res.heatmap_logits.shape == (2, 2, 8, 8)

    def test_same_seed_same_parameters(self):
        a = KeypointEmbeddingNet(micro_config(), seed=11)
        b = KeypointEmbeddingNet(micro_config(), seed=11)
        for (na, pa), (nb, pb) in zip(a.store.items(), b.store.items()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
