"""Optimizer algebra, curriculum loop, determinism, resume, and NaN abort."""

import numpy as np
import pytest

from shapeflow import autodiff as ad
from shapeflow import checkpoint as cp
from shapeflow import synthdata as sd
from shapeflow import training as tr
from shapeflow.config import RunConfig, config_hash


def tiny_config(**overrides) -> RunConfig:
    base = dict(
        frames=4,
        depth=1,
        d_model=16,
        heads=2,
        d_time=8,
        ffn_mult=2,
        batch_size=2,
        stage1_iters=2,
        stage2_iters=3,
        seed=7,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return sd.build_corpus(2, 3, seed=7, frames=4)


def params_of(values: dict) -> dict:
    return {k: ad.parameter(np.array(v, dtype=np.float64)) for k, v in values.items()}


class TestAdamW:
    def opt(self, params, lr=0.1, wd=0.0):
        cfg = tiny_config(lr=lr, weight_decay=wd)
        return tr.init_optimizer(params, cfg)

    def test_first_step_unit_gradient(self):
        # Bias correction makes step 1 move by ~lr regardless of moments:
        # mhat = g, vhat = g^2, update = g/|g| = 1 for g = 1.
        p = params_of({"w": [0.0]})
        state = self.opt(p, lr=0.1)
        tr.adamw_step(p, {"w": np.array([1.0])}, state)
        np.testing.assert_allclose(p["w"].data, [-0.1], rtol=1e-6)

    def test_zero_grads_zero_decay_is_identity(self):
        p = params_of({"w": [1.5, -2.0]})
        state = self.opt(p)
        before = p["w"].data.copy()
        tr.adamw_step(p, {}, state)
        np.testing.assert_array_equal(p["w"].data, before)
        assert state.step == 1

    def test_decay_only_scales(self):
        p = params_of({"w": [2.0, -4.0]})
        state = self.opt(p, lr=0.1, wd=0.5)
        start = p["w"].data.copy()
        tr.adamw_step(p, {}, state)
        np.testing.assert_allclose(p["w"].data, start * (1 - 0.1 * 0.5), rtol=1e-15)
        tr.adamw_step(p, {}, state)
        np.testing.assert_allclose(p["w"].data, start * (1 - 0.1 * 0.5) ** 2, rtol=1e-15)

    def test_matches_reference_loop(self):
        # Two steps with varying gradients against an independent transcription
        # of the update equations.
        rng = np.random.default_rng(0)
        w0 = rng.standard_normal(5)
        g1, g2 = rng.standard_normal(5), rng.standard_normal(5)
        lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.01

        p = params_of({"w": w0})
        state = self.opt(p, lr=lr, wd=wd)
        tr.adamw_step(p, {"w": g1}, state)
        tr.adamw_step(p, {"w": g2}, state)

        w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
        for t, g in ((1, g1), (2, g2)):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            w = w - lr * (mhat / (np.sqrt(vhat) + eps) + wd * w)
        np.testing.assert_allclose(p["w"].data, w, atol=1e-15)

    def test_moments_shaped_like_params(self):
        p = params_of({"a": np.zeros((3, 4)), "b": np.zeros(2)})
        state = self.opt(p)
        assert state.m["a"].shape == (3, 4)
        assert state.v["b"].shape == (2,)

    def test_shape_mismatch_rejected(self):
        p = params_of({"w": np.zeros(3)})
        state = self.opt(p)
        with pytest.raises(tr.TrainingError, match="shape"):
            tr.adamw_step(p, {"w": np.zeros(4)}, state)


class TestModelParts:
    def test_build_is_deterministic(self):
        cfg = tiny_config()
        a, b = tr.build_model(cfg), tr.build_model(cfg)
        for name, t in a.trainables().items():
            np.testing.assert_array_equal(t.data, b.trainables()[name].data)

    def test_trainables_cover_generator_and_connector(self):
        parts = tr.build_model(tiny_config())
        names = set(parts.trainables())
        assert "null.joint" in names
        assert any(n.startswith("connector.") for n in names)
        assert "time.freqs" not in names  # frozen frequency table

    def test_placeholder_id_valid(self):
        parts = tr.build_model(tiny_config())
        assert parts.vocab.word_of(parts.placeholder_id) == "<img>"


class TestIterationZero:
    def test_loss_equals_batch_expectation(self, corpus):
        # Zero-init head predicts v = 0, so the loss is exactly the batch
        # mean of ||eps - z0||^2 / D; the 5% margin covers nothing here
        # beyond float noise, but is the documented contract.
        cfg = tiny_config()
        res = tr.train(cfg, corpus, stop_after=1)
        parts = tr.build_model(cfg)
        cache = tr.SampleCache(parts, corpus)
        records = corpus.manifest.by_tier(sd.CORE_TIER)
        rng = tr.iteration_rng(cfg.seed, 0)
        idx = rng.integers(0, len(records), size=cfg.batch_size)
        rng.uniform(size=cfg.batch_size)  # the t draws
        vals = []
        for b in range(cfg.batch_size):
            enc = cache.get(records[idx[b]].index)
            eps = rng.standard_normal(enc.z0.shape)
            rng.random()  # dropout coin
            vals.append(np.mean((eps - enc.z0) ** 2))
        expected = float(np.mean(vals))
        assert res.losses[0][2] == pytest.approx(expected, rel=0.05)
        assert res.losses[0][2] == pytest.approx(expected, rel=1e-12)


class TestTrainLoop:
    def test_stage_labels_and_counts(self, corpus):
        res = tr.train(tiny_config(), corpus)
        stages = [s for _, s, _ in res.losses]
        assert stages == ["core"] * 2 + ["full"] * 3
        assert [i for i, _, _ in res.losses] == list(range(5))
        assert res.checkpoint.iteration == 5
        assert res.checkpoint.stage == "full"

    def test_losses_finite_and_decreasing_overall(self, corpus):
        cfg = tiny_config(stage1_iters=10, stage2_iters=10, lr=5e-3)
        res = tr.train(cfg, corpus)
        losses = [l for _, _, l in res.losses]
        assert all(np.isfinite(losses))
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_bitwise_determinism(self, corpus, tmp_path):
        cfg = tiny_config()
        a = tr.train(cfg, corpus)
        b = tr.train(cfg, corpus)
        assert a.losses == b.losses
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        cp.save_checkpoint(a.checkpoint, pa)
        cp.save_checkpoint(b.checkpoint, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_seed_changes_losses(self, corpus):
        a = tr.train(tiny_config(), corpus)
        b = tr.train(tiny_config(seed=8), corpus)
        assert a.losses != b.losses

    def test_resume_matches_unbroken_run(self, corpus, tmp_path):
        cfg = tiny_config(stage1_iters=4, stage2_iters=8)
        full = tr.train(cfg, corpus)

        head = tr.train(cfg, corpus, stop_after=3)
        assert head.checkpoint.iteration == 3
        tail = tr.train(cfg, corpus, resume=head.checkpoint)
        assert head.losses + tail.losses == full.losses  # bitwise, >= 10 iters

        pa, pb = tmp_path / "full.ckpt", tmp_path / "resumed.ckpt"
        cp.save_checkpoint(full.checkpoint, pa)
        cp.save_checkpoint(tail.checkpoint, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_resume_across_stage_boundary(self, corpus):
        cfg = tiny_config()
        full = tr.train(cfg, corpus)
        head = tr.train(cfg, corpus, stop_after=2)
        assert head.checkpoint.stage == "core"
        tail = tr.train(cfg, corpus, resume=head.checkpoint)
        assert head.losses + tail.losses == full.losses

    def test_resume_wrong_config_rejected(self, corpus):
        head = tr.train(tiny_config(), corpus, stop_after=1)
        with pytest.raises(tr.TrainingError, match="different config"):
            tr.train(tiny_config(lr=9e-9), corpus, resume=head.checkpoint)

    def test_frozen_encoders_untouched(self, corpus):
        cfg = tiny_config()
        parts = tr.build_model(cfg)
        before = parts.stack.frozen_hash()
        tr.train(cfg, corpus)
        assert tr.build_model(cfg).stack.frozen_hash() == before

    def test_checkpoint_hash_pins_config(self, corpus):
        cfg = tiny_config()
        res = tr.train(cfg, corpus, stop_after=1)
        assert res.checkpoint.config_hash == config_hash(cfg)
        assert res.checkpoint.rng["scheme"] == "iteration-derived"

    def test_nan_aborts_with_snapshot(self, corpus, tmp_path):
        cfg = tiny_config()
        head = tr.train(cfg, corpus, stop_after=1)
        poisoned = head.checkpoint
        poisoned.params["patch.proj"] = np.full_like(poisoned.params["patch.proj"], np.nan)
        poisoned.iteration = 0
        snap = tmp_path / "diag.ckpt"
        with pytest.raises(tr.TrainingError, match="non-finite"):
            tr.train(cfg, corpus, resume=poisoned, nan_snapshot_path=snap)
        assert snap.exists()
        assert cp.load_checkpoint(snap).iteration == 0

    def test_text_only_ablation_trains(self, corpus):
        res = tr.train(tiny_config(joint_streams="text"), corpus, stop_after=2)
        assert len(res.losses) == 2
        assert all(np.isfinite(l) for _, _, l in res.losses)


class TestEncodingCache:
    def test_cache_returns_same_object(self, corpus):
        parts = tr.build_model(tiny_config())
        cache = tr.SampleCache(parts, corpus)
        assert cache.get(0) is cache.get(0)

    def test_encoded_sample_shapes(self, corpus):
        cfg = tiny_config()
        parts = tr.build_model(cfg)
        enc = tr.encode_sample(parts, corpus[0])
        hh = cfg.latent_size
        assert enc.z0.shape == (cfg.frames, 48, hh, hh)
        assert enc.c_text.shape[1] == cfg.d_cond
        assert enc.h_mllm.shape[1] == cfg.d_mllm
        assert enc.m_ref.shape == (enc.k_refs, 1, hh, hh)
        assert len(enc.c_vae) == enc.k_refs

    def test_load_into_rejects_mismatch(self, corpus):
        cfg = tiny_config()
        head = tr.train(cfg, corpus, stop_after=1)
        parts = tr.build_model(cfg)
        bad = head.checkpoint
        del bad.params["head.bias"]
        with pytest.raises(tr.TrainingError, match="do not match"):
            tr.load_into(parts, bad)
