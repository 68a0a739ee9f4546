import numpy as np
import pytest

from owfs.config import RunConfig
from owfs.embed import ConfigError
from owfs.tensor import Parameter
from owfs.train import (AdamState, GradientNaNError, MultiSeedReport,
                        adam_step, build_splits, multi_seed, train_run)


def blob_cfg(**kw):
    base = dict(
        head="one_way_proto", dataset="synth", synth_classes=12,
        synth_per_class=14, synth_spread=0.8, image_size=16, blocks=2,
        filters=8, shots=5, episodes_per_epoch=200, epochs=1,
        eval_episodes=300,
    )
    base.update(kw)
    return RunConfig(**base)


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Parameter("w", np.array([1.0, -2.0]))
        state = AdamState.for_params([p])
        before = p.data.copy()
        p.tensor.grad = np.zeros(2)
        adam_step([p], state)
        np.testing.assert_array_equal(p.data, before)

    def test_moments_decay_toward_zero_on_zero_grad(self):
        p = Parameter("w", np.array([1.0]))
        state = AdamState.for_params([p])
        p.tensor.grad = np.array([1.0])
        adam_step([p], state)
        m1, v1 = state.m["w"].copy(), state.v["w"].copy()
        p.tensor.grad = np.array([0.0])
        adam_step([p], state)
        assert abs(state.m["w"][0]) < abs(m1[0])
        assert abs(state.v["w"][0]) < abs(v1[0])

    def test_first_step_is_lr_times_sign(self):
        # Hand-evaluated recurrence at t=1 with g=1: m_hat = v_hat = 1, so
        # the update is -lr / (1 + eps).
        p = Parameter("w", np.array([0.5]))
        state = AdamState.for_params([p], lr=1e-3)
        p.tensor.grad = np.array([1.0])
        adam_step([p], state)
        expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.data, [expected], rtol=0, atol=1e-15)
        assert abs((p.data[0] - 0.5) + 1e-3) < 1e-9

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(0)
        p = Parameter("w", rng.normal(size=4))
        state = AdamState.for_params([p], lr=0.01)
        # Independent reference implementation.
        theta = p.data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 26):
            g = rng.normal(size=4)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            theta = theta - 0.01 * mh / (np.sqrt(vh) + 1e-8)
            p.tensor.grad = g.copy()
            adam_step([p], state)
        np.testing.assert_allclose(p.data, theta, atol=1e-12)

    def test_nan_gradient_aborts_naming_parameter(self):
        p = Parameter("conv.weight", np.array([1.0]))
        state = AdamState.for_params([p])
        p.tensor.grad = np.array([np.nan])
        with pytest.raises(GradientNaNError, match="conv.weight"):
            adam_step([p], state)


class TestTrainRun:
    def test_blobs_reach_high_train_accuracy(self):
        # 2000 episodes of 5-shot one-way proto on separable blobs.
        cfg = blob_cfg(episodes_per_epoch=1000, epochs=2)
        report, _ = train_run(cfg, seed=0)
        assert report.final_acc > 0.95

    def test_zero_lr_keeps_parameters_fixed(self):
        cfg = blob_cfg(lr=0.0, episodes_per_epoch=50)
        splits = build_splits(cfg)
        from owfs.model import build_model
        ref = build_model(cfg, seed=3)
        before = {p.name: p.data.copy() for p in ref.parameters()}
        _, model = train_run(cfg, seed=3, splits=splits)
        for p in model.parameters():
            np.testing.assert_array_equal(p.data, before[p.name])

    def test_identical_runs_are_bit_identical(self):
        cfg = blob_cfg(episodes_per_epoch=100)
        r1, m1 = train_run(cfg, seed=1)
        r2, m2 = train_run(cfg, seed=1)
        assert r1.epochs == r2.epochs
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert np.array_equal(p1.data, p2.data)

    def test_losses_finite_for_all_heads(self):
        for head in ("one_way_proto", "two_way_proto", "two_way_matching",
                     "one_way_normal", "two_way_normal"):
            cfg = blob_cfg(head=head, episodes_per_epoch=100)
            report, _ = train_run(cfg, seed=2)
            assert np.isfinite(report.final_loss), head

    def test_gaussian_head_refuses_single_shot(self):
        cfg = blob_cfg(head="two_way_normal", shots=1)
        with pytest.raises(ConfigError, match="shots"):
            train_run(cfg, seed=0)

    def test_relu_gaussian_aborts_leaky_does_not(self):
        base = blob_cfg(head="one_way_normal", shots=2,
                        episodes_per_epoch=400)
        with pytest.raises(GradientNaNError) as err:
            train_run(base.replace(activation="relu"), seed=0)
        assert err.value.parameter  # diagnostic names the parameter
        report, _ = train_run(base.replace(activation="leaky_relu"), seed=0)
        assert report.episodes_total == 400

    def test_one_way_embeds_half_the_supports(self):
        cfg_one = blob_cfg(head="one_way_proto", episodes_per_epoch=60)
        cfg_two = blob_cfg(head="two_way_proto", episodes_per_epoch=60)
        splits = build_splits(cfg_one)
        r_one, _ = train_run(cfg_one, seed=0, splits=splits)
        r_two, _ = train_run(cfg_two, seed=0, splits=splits)
        assert r_one.supports_embedded * 2 == r_two.supports_embedded

    def test_writes_artifacts(self, tmp_path):
        cfg = blob_cfg(episodes_per_epoch=30)
        report, _ = train_run(cfg, seed=0, out_dir=tmp_path)
        assert (tmp_path / "model.owfs").exists()
        assert (tmp_path / "report.json").exists()
        csv = (tmp_path / "report.csv").read_text().splitlines()
        assert csv[0] == "epoch,loss,acc,seconds"
        assert len(csv) == 1 + cfg.epochs


class TestCheckpointRoundTrip:
    def test_loaded_model_gives_identical_logits(self, tmp_path):
        from owfs.episodes import episode_at
        from owfs.model import load_model

        cfg = blob_cfg(episodes_per_epoch=80)
        splits = build_splits(cfg)
        _, model = train_run(cfg, seed=4, splits=splits, out_dir=tmp_path)
        loaded, opt = load_model(tmp_path / "model.owfs")
        assert "adam.t" in opt
        test_split = splits[1]
        for i in range(20):
            ep = episode_at(test_split, "one_way", 5, 99, 0, i)
            a = model.episode_logits(ep, training=False).data
            b = loaded.episode_logits(ep, training=False).data
            assert np.array_equal(a, b)

    def test_checkpoint_bytes_are_reproducible(self, tmp_path):
        cfg = blob_cfg(episodes_per_epoch=50)
        train_run(cfg, seed=5, out_dir=tmp_path / "a")
        train_run(cfg, seed=5, out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "model.owfs").read_bytes()
        b = (tmp_path / "b" / "model.owfs").read_bytes()
        assert a == b


class TestMultiSeed:
    def test_single_seed_std_zero(self):
        cfg = blob_cfg(seeds=[0], episodes_per_epoch=60, eval_episodes=100)
        rep = multi_seed(cfg)
        assert rep.aggregate["test_acc_std"] == 0.0
        assert not rep.partial

    def test_seed_order_invariance(self):
        a = multi_seed(blob_cfg(seeds=[1, 2], episodes_per_epoch=40,
                                eval_episodes=80))
        b = multi_seed(blob_cfg(seeds=[2, 1], episodes_per_epoch=40,
                                eval_episodes=80))
        assert a.aggregate == b.aggregate
        assert a.per_seed == b.per_seed

    def test_six_seeds_low_spread(self):
        cfg = blob_cfg(seeds=list(range(6)), synth_spread=0.6,
                       episodes_per_epoch=300, eval_episodes=200)
        rep = multi_seed(cfg)
        assert len(rep.per_seed) == 6
        assert rep.aggregate["test_acc_std"] < 0.02

    def test_failing_seed_marks_partial(self, monkeypatch):
        import owfs.train as train_mod

        real = train_mod.train_run

        def flaky(cfg, seed, **kw):
            if seed == 1:
                raise GradientNaNError("blocks.00.conv.weight", 7)
            return real(cfg, seed, **kw)

        monkeypatch.setattr(train_mod, "train_run", flaky)
        rep = multi_seed(blob_cfg(seeds=[0, 1], episodes_per_epoch=40,
                                  eval_episodes=80))
        assert rep.partial
        assert rep.failures[0]["seed"] == 1
        assert "blocks.00.conv.weight" in rep.failures[0]["error"]
        assert len(rep.per_seed) == 1
