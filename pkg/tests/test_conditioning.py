"""Tests for conditioning assembly: sequences, joint stream, padded latents."""

import numpy as np
import pytest

from shapeflow import autodiff as ad
from shapeflow import synthdata as sd
from shapeflow.conditioning import (
    ConditioningError,
    build_bundle,
    build_sequence,
    cfg_dropout,
    make_joint,
    null_bundle,
    pad_and_place,
)
from shapeflow.encoders import EncoderConfig, EncoderStack
from shapeflow.vocab import IMAGE_PLACEHOLDER, build_vocab

VOCAB = build_vocab()
PLACEHOLDER = VOCAB.id_of(IMAGE_PLACEHOLDER)


@pytest.fixture(scope="module")
def stack():
    return EncoderStack(EncoderConfig(vocab_size=len(VOCAB.words)))


def refs(n, seed=0):
    rng = np.random.default_rng(seed)
    shapes = ["circle", "square", "triangle", "circle"]
    colors = ["red", "green", "blue", "yellow"]
    specs = [
        sd.SubjectSpec(shapes[i], colors[i], 4.8, (0.0, 0.0), (16.0, 16.0))
        for i in range(n)
    ]
    return sd.make_references(specs, 32, rng)


class TestBuildSequence:
    def test_text_only(self):
        ids = VOCAB.encode("red circle moves right")
        seq, images = build_sequence(ids, [], PLACEHOLDER)
        assert seq.ids == tuple(ids)
        assert all(k == "text" for k in seq.kinds)
        assert images == []

    def test_placeholders_after_text(self):
        ids = VOCAB.encode("red circle moves right")
        images = refs(2)
        seq, out_images = build_sequence(ids, images, PLACEHOLDER)
        assert seq.kinds == ("text",) * 4 + ("image_placeholder",) * 2
        assert seq.ids[4:] == (PLACEHOLDER, PLACEHOLDER)
        assert out_images == list(images)

    def test_empty_prompt(self):
        seq, _ = build_sequence([], refs(1), PLACEHOLDER)
        assert seq.kinds == ("image_placeholder",)

    def test_too_many_references(self):
        with pytest.raises(ConditioningError):
            build_sequence([], refs(4) + refs(1), PLACEHOLDER, k_max=4)


class TestMakeJoint:
    def test_lengths_add(self):
        a = np.zeros((5, 8))
        b = np.ones((7, 8))
        joint = make_joint(a, b)
        assert joint.shape == (12, 8)

    def test_prefix_recovers_first_block(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((5, 8)), rng.random((7, 8))
        joint = make_joint(a, b)
        assert np.array_equal(joint.data[:5], a)
        assert np.array_equal(joint.data[5:], b)

    def test_empty_text_rejected(self):
        with pytest.raises(ConditioningError):
            make_joint(np.zeros((5, 8)), np.zeros((0, 8)))

    def test_width_mismatch_rejected(self):
        with pytest.raises(ConditioningError):
            make_joint(np.zeros((5, 8)), np.zeros((3, 9)))

    def test_gradient_splits_to_blocks(self):
        a = ad.parameter(np.ones((2, 3)))
        b = ad.parameter(np.ones((1, 3)))
        with ad.Tape() as tape:
            joint = make_joint(a, b)
            loss = ad.tensor_sum(joint * joint)
            tape.backward(loss)
        assert np.array_equal(a.grad, 2 * np.ones((2, 3)))
        assert np.array_equal(b.grad, 2 * np.ones((1, 3)))


class TestPadAndPlace:
    def make_inputs(self, t=4, k=2, cz=6, hw=5, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((t, cz, hw, hw))
        c_vae = [rng.standard_normal((cz, hw, hw)) for _ in range(k)]
        m_ref = np.ones((k, 1, hw, hw))
        return x, c_vae, m_ref

    def test_layout(self):
        x, c_vae, m_ref = self.make_inputs()
        padded = pad_and_place(x, c_vae, m_ref)
        t, cz = 4, 6
        assert padded.x_tilde.shape == (6, 2 * cz + 1, 5, 5)
        assert padded.ref_slot_index_range == (4, 6)
        # noisy channels recover x_t bitwise on video slots
        assert np.array_equal(padded.x_tilde[:t, :cz], x)
        # noisy channels zero on reference slots
        assert np.abs(padded.x_tilde[t:, :cz]).max() == 0.0
        # k-th reference latent sits on slot t+k, bitwise
        assert np.array_equal(padded.x_tilde[t + 1, cz : 2 * cz], c_vae[1])
        # reference channels zero on video slots
        assert np.abs(padded.x_tilde[:t, cz : 2 * cz]).max() == 0.0

    def test_mask_channel_counts(self):
        x, c_vae, m_ref = self.make_inputs(t=3, k=2, hw=4)
        padded = pad_and_place(x, c_vae, m_ref)
        mask = padded.x_tilde[:, -1]
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert mask.sum() == 2 * 4 * 4
        assert np.abs(mask[:3]).max() == 0.0
        assert mask[3:].min() == 1.0

    def test_zero_references(self):
        x, _, _ = self.make_inputs(k=0)
        padded = pad_and_place(x, [], np.zeros((0, 1, 5, 5)))
        assert padded.x_tilde.shape[0] == 4
        assert np.abs(padded.x_tilde[:, 6:]).max() == 0.0

    def test_spatial_mismatch_rejected(self):
        x, c_vae, m_ref = self.make_inputs()
        c_vae[0] = c_vae[0][:, :4, :]
        with pytest.raises(ConditioningError):
            pad_and_place(x, c_vae, m_ref)


class TestBundle:
    def test_build_bundle_shapes(self, stack):
        images = refs(2)
        ids = VOCAB.encode("red circle and green square")[:4]
        bundle = build_bundle(stack, ids, images, PLACEHOLDER)
        cfg = stack.config
        per_image = (cfg.ref_size // cfg.mllm_image_patch) ** 2
        l_mllm = len(ids) + 2 * per_image
        assert bundle.c_joint.shape == (l_mllm + len(ids), cfg.d_cond)
        assert bundle.c_clip.shape == (2 * cfg.identity_tokens_per_image, cfg.d_cond)
        assert bundle.k_refs == 2
        assert len(bundle.c_vae) == 2
        s = cfg.vae_stride
        assert bundle.c_vae[0].shape == (cfg.latent_channels, 32 // s, 32 // s)
        assert bundle.m_ref.shape == (2, 1, 32 // s, 32 // s)
        assert not bundle.dropped.unconditional

    def test_joint_prefix_is_connector_output(self, stack):
        images = refs(1)
        ids = VOCAB.encode("red circle moves right")
        bundle = build_bundle(stack, ids, images, PLACEHOLDER)
        seq, imgs = build_sequence(ids, images, PLACEHOLDER)
        h = stack.mllm_encode(seq, imgs)
        c_mllm = stack.connector_project(h).data
        assert np.array_equal(bundle.c_joint.data[: c_mllm.shape[0]], c_mllm)
        assert np.array_equal(
            bundle.c_joint.data[c_mllm.shape[0] :], stack.text_encode(ids)
        )

    def test_reference_latent_matches_encoder(self, stack):
        images = refs(1)
        bundle = build_bundle(stack, VOCAB.encode("red circle moves right"), images, PLACEHOLDER)
        assert np.array_equal(bundle.c_vae[0], stack.encode_reference_latent(images[0]))

    def test_empty_prompt_rejected(self, stack):
        with pytest.raises(ConditioningError):
            build_bundle(stack, [], refs(1), PLACEHOLDER)


class TestCfgDropout:
    def nulls(self):
        return ad.parameter(np.zeros((1, 32))), ad.parameter(np.zeros((1, 32)))

    def sample_bundle(self, stack):
        return build_bundle(
            stack, VOCAB.encode("red circle moves right"), refs(1), PLACEHOLDER
        )

    def test_rate_zero_is_identity(self, stack):
        bundle = self.sample_bundle(stack)
        out = cfg_dropout(bundle, 0.0, np.random.default_rng(0))
        assert out is bundle

    def test_rate_one_rejected(self, stack):
        bundle = self.sample_bundle(stack)
        with pytest.raises(ConditioningError):
            cfg_dropout(bundle, 1.0, np.random.default_rng(0))

    def test_dropped_bundle_is_null(self, stack):
        bundle = self.sample_bundle(stack)
        nj, nc = self.nulls()
        out = cfg_dropout(bundle, 0.999, np.random.default_rng(0), nj, nc)
        assert out.dropped.unconditional
        assert out.k_refs == 0
        assert out.c_joint is nj
        assert out.c_clip is nc
        assert out.c_vae == []

    def test_seeded_drop_pattern_repeats(self, stack):
        bundle = self.sample_bundle(stack)
        nj, nc = self.nulls()

        def pattern(seed):
            rng = np.random.default_rng(seed)
            return [
                cfg_dropout(bundle, 0.5, rng, nj, nc).dropped.unconditional
                for _ in range(20)
            ]

        assert pattern(7) == pattern(7)
        assert True in pattern(7) and False in pattern(7)

    def test_null_bundle_flags(self):
        nj, nc = self.nulls()
        nb = null_bundle(nj, nc)
        assert nb.dropped.unconditional and nb.k_refs == 0
