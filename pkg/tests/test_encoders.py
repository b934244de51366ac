"""Tests for the frozen encoder stack and the trainable connector.

The identity-descriptor math is pinned against a whole-image loop oracle
(no patching), and the subject-separation property is measured over the
same augmented renders the corpus produces.
"""

import numpy as np
import pytest

from shapeflow import autodiff as ad
from shapeflow import synthdata as sd
from shapeflow.encoders import (
    EncoderConfig,
    EncoderError,
    EncoderStack,
    ReferenceImage,
    TokenSequence,
)
from shapeflow.vocab import VocabError, build_vocab

from oracles import identity_descriptor_loops

VOCAB = build_vocab()


def make_stack(**overrides):
    return EncoderStack(EncoderConfig(vocab_size=len(VOCAB.words), **overrides))


@pytest.fixture(scope="module")
def stack():
    return make_stack()


def ref_render(spec, seed, augment=True):
    rng = np.random.default_rng(seed)
    return sd.make_references([spec], 32, rng, augment=augment)[0]


def subject(shape, color):
    return sd.SubjectSpec(shape, color, 4.8, (0.0, 0.0), (16.0, 16.0))


class TestTokenSequence:
    def test_parallel_length_mismatch(self):
        with pytest.raises(EncoderError):
            TokenSequence(ids=(1, 2), kinds=("text",))

    def test_unknown_kind(self):
        with pytest.raises(EncoderError):
            TokenSequence(ids=(1,), kinds=("audio",))

    def test_views(self):
        seq = TokenSequence(ids=(3, 4, 9, 9), kinds=("text", "text", "image_placeholder", "image_placeholder"))
        assert seq.text_ids == (3, 4)
        assert seq.placeholder_count == 2


class TestReferenceImage:
    def test_shape_validation(self):
        with pytest.raises(EncoderError):
            ReferenceImage(pixels=np.zeros((32, 32)), subject_id="s")

    def test_range_validation(self):
        bad = np.full((3, 8, 8), 1.5)
        with pytest.raises(EncoderError):
            ReferenceImage(pixels=bad, subject_id="s")


class TestTextEncoder:
    def test_deterministic(self, stack):
        ids = VOCAB.encode("red circle moves right")
        a = stack.text_encode(ids)
        b = stack.text_encode(ids)
        assert np.array_equal(a, b)

    def test_single_token(self, stack):
        out = stack.text_encode([VOCAB.id_of("red")])
        assert out.shape == (1, stack.config.d_cond)

    def test_positional_sensitivity(self, stack):
        a = stack.text_encode(VOCAB.encode("red circle"))
        b = stack.text_encode(VOCAB.encode("circle red"))
        assert not np.allclose(a, b)

    def test_empty_prompt_rejected(self, stack):
        with pytest.raises(EncoderError):
            stack.text_encode([])

    def test_unknown_id_rejected(self, stack):
        with pytest.raises(VocabError):
            stack.text_encode([len(VOCAB.words)])


class TestReasoner:
    def two_image_sequence(self):
        ph = VOCAB.id_of("<img>")
        ids = VOCAB.encode("red circle and green square") + [ph, ph]
        kinds = ("text",) * 5 + ("image_placeholder",) * 2
        return TokenSequence(ids=tuple(ids), kinds=kinds)

    def test_text_only_length(self, stack):
        ids = VOCAB.encode("red circle moves right")
        seq = TokenSequence(ids=tuple(ids), kinds=("text",) * 4)
        out = stack.mllm_encode(seq, [])
        assert out.shape == (4, stack.config.d_mllm)

    def test_placeholder_expansion_length(self, stack):
        seq = self.two_image_sequence()
        refs = [
            ref_render(subject("circle", "red"), 1),
            ref_render(subject("square", "green"), 2),
        ]
        out = stack.mllm_encode(seq, refs)
        per_image = (stack.config.ref_size // stack.config.mllm_image_patch) ** 2
        assert out.shape == (5 + 2 * per_image, stack.config.d_mllm)

    def test_count_mismatch_rejected(self, stack):
        seq = self.two_image_sequence()
        with pytest.raises(EncoderError):
            stack.mllm_encode(seq, [ref_render(subject("circle", "red"), 1)])

    def test_deterministic(self, stack):
        seq = self.two_image_sequence()
        refs = [
            ref_render(subject("circle", "red"), 1),
            ref_render(subject("square", "green"), 2),
        ]
        assert np.array_equal(stack.mllm_encode(seq, refs), stack.mllm_encode(seq, refs))

    def test_image_swap_moves_patch_and_text_rows(self, stack):
        seq = self.two_image_sequence()
        ra = ref_render(subject("circle", "red"), 1)
        rb = ref_render(subject("square", "green"), 2)
        h_ab = stack.mllm_encode(seq, [ra, rb])
        h_ba = stack.mllm_encode(seq, [rb, ra])
        n_text = 5
        # patch rows differ where the images swapped ...
        assert not np.allclose(h_ab[n_text:], h_ba[n_text:])
        # ... and attention carries the change into the text rows too
        assert not np.allclose(h_ab[:n_text], h_ba[:n_text])


class TestIdentityEncoder:
    def test_empty_stream(self, stack):
        out = stack.identity_encode([])
        assert out.shape == (0, stack.config.d_cond)

    def test_tokens_per_image(self, stack):
        ref = ref_render(subject("circle", "red"), 1)
        out = stack.identity_encode([ref, ref])
        p = stack.config.identity_tokens_per_image
        assert out.shape == (2 * p, stack.config.d_cond)
        assert np.array_equal(out[:p], out[p:])

    def test_background_maps_to_zero_tokens(self, stack):
        bg = np.empty((3, 32, 32))
        for c in range(3):
            bg[c].fill(sd.BACKGROUND[c])
        out = stack.identity_encode([ReferenceImage(pixels=bg, subject_id="none")])
        assert np.abs(out).max() < 1e-12
        assert np.array_equal(stack.pooled_identity(bg), np.zeros(6))

    def test_pooled_matches_loop_oracle(self, stack):
        for i, (shape, color) in enumerate(
            [("circle", "red"), ("square", "yellow"), ("triangle", "cyan")]
        ):
            ref = ref_render(subject(shape, color), 40 + i)
            got = stack.pooled_identity(ref)
            want = identity_descriptor_loops(ref.pixels, sd.BACKGROUND)
            assert np.abs(got - want).max() < 1e-10

    def test_angular_moments_separate_shapes(self, stack):
        # clean centered renders: circle has no angular structure, the
        # square is four-fold, the triangle three-fold
        descs = {
            shape: stack.pooled_identity(ref_render(subject(shape, "red"), 0, augment=False))
            for shape in sd.SHAPE_WORDS
        }
        n3 = {s: d[3] for s, d in descs.items()}
        n4 = {s: d[4] for s, d in descs.items()}
        assert n3["circle"] < 0.05 and n4["circle"] < 0.05
        assert n4["square"] > 0.8 and n3["square"] < 0.05
        assert n3["triangle"] > 1.0 and n4["triangle"] < 0.05

    def test_same_subject_beats_other_subjects(self, stack):
        # two independently augmented renders of one subject must be
        # closer than renders of different subjects, pair by pair
        def cos(a, b):
            return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

        specs = [
            subject(shape, color) for color in sd.PALETTE for shape in sd.SHAPE_WORDS
        ]
        rng = np.random.default_rng(0)
        margins = []
        for trial in range(100):
            a = specs[int(rng.integers(len(specs)))]
            while True:
                b = specs[int(rng.integers(len(specs)))]
                if b.subject_id != a.subject_id:
                    break
            anchor = stack.pooled_identity(ref_render(a, 1000 + trial))
            same = cos(anchor, stack.pooled_identity(ref_render(a, 5000 + trial)))
            diff = cos(anchor, stack.pooled_identity(ref_render(b, 9000 + trial)))
            margins.append(same - diff)
        assert min(margins) > 0.05


class TestVideoCodec:
    def test_round_trip(self, stack):
        rng = np.random.default_rng(11)
        video = rng.random((4, 3, 32, 32))
        back = stack.vae_decode(stack.vae_encode(video))
        assert np.abs(back - video).max() <= 1e-10

    def test_zero_video(self, stack):
        z = stack.vae_encode(np.zeros((2, 3, 32, 32)))
        assert np.abs(z).max() == 0.0

    def test_latent_shape(self, stack):
        s = stack.config.vae_stride
        z = stack.vae_encode(np.zeros((5, 3, 32, 32)))
        assert z.shape == (5, 3 * s * s, 32 // s, 32 // s)

    def test_reference_latent_same_rule(self, stack):
        ref = ref_render(subject("triangle", "blue"), 3)
        single = stack.encode_reference_latent(ref)
        batch = stack.vae_encode(ref.pixels[None])
        assert single.shape == batch.shape[1:]
        assert np.array_equal(single, batch[0])

    def test_divisibility_rejected(self, stack):
        with pytest.raises(EncoderError):
            stack.vae_encode(np.zeros((1, 3, 30, 30)))

    def test_bad_latent_channels_rejected(self, stack):
        with pytest.raises(EncoderError):
            stack.vae_decode(np.zeros((1, 7, 8, 8)))


class TestConnector:
    def test_shapes(self, stack):
        for length in (1, 5):
            h = np.zeros((length, stack.config.d_mllm))
            out = stack.connector_project(h)
            assert out.shape == (length, stack.config.d_cond)

    def test_wrong_width_rejected(self, stack):
        with pytest.raises(EncoderError):
            stack.connector_project(np.zeros((2, stack.config.d_mllm + 1)))

    def test_zero_input_is_bias_path(self, stack):
        from math import erf, sqrt

        out = stack.connector_project(np.zeros((3, stack.config.d_mllm))).data
        c = {k: v.data for k, v in stack.connector.items()}
        # composed bias path, computed independently
        act = c["connector.b1"] * 0.5 * (1.0 + np.array([erf(v / sqrt(2.0)) for v in c["connector.b1"]]))
        row = act @ c["connector.w2"] + c["connector.b2"]
        assert np.abs(out - row[None, :]).max() < 1e-12
        assert np.abs(out - out[0]).max() == 0.0

    def test_grad_check(self):
        stack = make_stack()
        rng = np.random.default_rng(5)
        h = rng.standard_normal((3, stack.config.d_mllm))
        target = rng.standard_normal((3, stack.config.d_cond))

        def loss_fn():
            out = stack.connector_project(h)
            diff = out - ad.Tensor(target)
            return ad.tensor_mean(diff * diff)

        worst = ad.grad_check_params(
            loss_fn, stack.connector, max_coords=6, rng=np.random.default_rng(0)
        )
        assert worst < 1e-4


class TestFrozenStack:
    def test_hash_stable_across_instantiations(self):
        assert make_stack().frozen_hash() == make_stack().frozen_hash()

    def test_hash_ignores_connector_updates(self):
        stack = make_stack()
        before = stack.frozen_hash()
        for t in stack.connector.values():
            t.data += 1.0
        assert stack.frozen_hash() == before

    def test_hash_tracks_seeds(self):
        assert make_stack().frozen_hash() != make_stack(seed_identity=999).frozen_hash()

    def test_narrow_conditioning_width_rejected(self):
        with pytest.raises(EncoderError):
            make_stack(d_cond=12)
