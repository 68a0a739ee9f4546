import numpy as np
import pytest

from owfs.embed import ConfigError, Embedder, EmbedderConfig, build_embedder


def small_cfg(**kw):
    base = dict(in_channels=1, in_size=(16, 16), num_blocks=2, channels=4)
    base.update(kw)
    return EmbedderConfig(**base)


class TestGeometry:
    def test_default_28x28_gives_dim_64(self):
        # 28 -> 14 -> 7 -> 3 -> 1 under floor pooling, so D = 64*1*1.
        emb = build_embedder(EmbedderConfig())
        assert emb.output_dim == 64
        out = emb.embed(np.zeros((2, 1, 28, 28)), training=False)
        assert out.shape == (2, 64)

    def test_zero_blocks_rejected(self):
        with pytest.raises(ConfigError, match="num_blocks"):
            build_embedder(EmbedderConfig(num_blocks=0))

    def test_too_small_input_rejected(self):
        with pytest.raises(ConfigError, match="in_size"):
            build_embedder(EmbedderConfig(in_size=(8, 8), num_blocks=4))

    def test_bad_activation_rejected(self):
        with pytest.raises(ConfigError, match="activation"):
            build_embedder(small_cfg(activation="gelu"))

    def test_input_geometry_checked(self):
        emb = build_embedder(small_cfg())
        with pytest.raises(ConfigError, match="input"):
            emb.embed(np.zeros((2, 1, 28, 28)), training=False)


class TestForward:
    def test_zero_weights_give_zero_embedding(self):
        emb = build_embedder(small_cfg())
        for block in emb.blocks:
            block.weight.data = np.zeros_like(block.weight.data)
        rng = np.random.default_rng(0)
        out = emb.embed(rng.normal(size=(3, 1, 16, 16)), training=True)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_identical_batch_stays_finite(self):
        # Degenerate batch: BN variance is 0, clamped by eps, no NaN.
        emb = build_embedder(small_cfg())
        img = np.random.default_rng(1).normal(size=(1, 1, 16, 16))
        batch = np.repeat(img, 3, axis=0)
        out = emb.embed(batch, training=True)
        assert np.all(np.isfinite(out.data))

    def test_embed_is_pure_in_eval_mode(self):
        emb = build_embedder(small_cfg())
        x = np.random.default_rng(2).normal(size=(4, 1, 16, 16))
        a = emb.embed(x, training=False).data
        b = emb.embed(x, training=False).data
        assert np.array_equal(a, b)

    def test_train_mode_updates_running_stats_eval_does_not(self):
        emb = build_embedder(small_cfg())
        x = np.random.default_rng(3).normal(size=(4, 1, 16, 16))
        before = emb.blocks[0].bn.running_mean.copy()
        emb.embed(x, training=False)
        assert np.array_equal(emb.blocks[0].bn.running_mean, before)
        emb.embed(x, training=True)
        assert not np.array_equal(emb.blocks[0].bn.running_mean, before)

    def test_transductive_uses_batch_stats_without_update(self):
        emb = build_embedder(small_cfg())
        x = np.random.default_rng(4).normal(size=(4, 1, 16, 16))
        rm = emb.blocks[0].bn.running_mean.copy()
        trans = emb.embed(x, training=False, transductive=True).data
        assert np.array_equal(emb.blocks[0].bn.running_mean, rm)
        train = emb.embed(x, training=True).data
        assert np.array_equal(trans, train)


class TestBlockOrder:
    def test_reordered_embedding_is_centered_and_unit_variance(self):
        # gamma=1, beta=0 at init; the reordered layout ends on BN, so the
        # per-dimension batch mean is 0 and variance is 1 up to the eps
        # correction. This is the property the null class stands on.
        cfg = EmbedderConfig(order="reordered", activation="leaky_relu")
        emb = build_embedder(cfg, seed=5)
        x = np.random.default_rng(5).normal(size=(16, 1, 28, 28))
        out = emb.embed(x, training=True).data
        mean = out.mean(axis=0)
        var = out.var(axis=0)
        assert np.max(np.abs(mean)) <= 1e-6
        assert np.max(np.abs(var - 1.0)) <= 1e-3

    def test_standard_and_reordered_differ(self):
        x = np.random.default_rng(6).normal(size=(4, 1, 16, 16))
        a = build_embedder(small_cfg(order="standard"), seed=7)
        b = build_embedder(small_cfg(order="reordered"), seed=7)
        out_a = a.embed(x, training=True).data
        out_b = b.embed(x, training=True).data
        assert not np.allclose(out_a, out_b)

    def test_reordered_last_op_is_bn(self):
        cfg = small_cfg(order="reordered")
        emb = build_embedder(cfg, seed=8)
        # Shifting beta of the last block shifts the embedding exactly.
        x = np.random.default_rng(8).normal(size=(4, 1, 16, 16))
        base = emb.embed(x, training=True).data
        emb.blocks[-1].bn.beta.data = emb.blocks[-1].bn.beta.data + 2.5
        shifted = emb.embed(x, training=True).data
        np.testing.assert_allclose(shifted - base, 2.5, atol=1e-12)


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        a = build_embedder(small_cfg(), seed=11)
        b = build_embedder(small_cfg(), seed=11)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            assert np.array_equal(pa.data, pb.data)

    def test_different_seed_different_parameters(self):
        a = build_embedder(small_cfg(), seed=11)
        b = build_embedder(small_cfg(), seed=12)
        assert not np.array_equal(a.blocks[0].weight.data,
                                  b.blocks[0].weight.data)

    def test_parameter_order_is_lexicographic(self):
        emb = build_embedder(small_cfg())
        names = [p.name for p in emb.parameters()]
        assert names == sorted(names)

    def test_state_dict_round_trip(self):
        a = build_embedder(small_cfg(), seed=13)
        x = np.random.default_rng(13).normal(size=(4, 1, 16, 16))
        a.embed(x, training=True)  # move the running stats
        b = build_embedder(small_cfg(), seed=99)
        b.load_state_dict(a.state_dict())
        out_a = a.embed(x, training=False).data
        out_b = b.embed(x, training=False).data
        assert np.array_equal(out_a, out_b)
