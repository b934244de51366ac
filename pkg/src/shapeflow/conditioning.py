"""Conditioning assembly: joint stream, identity stream, and padded latents.

Everything the velocity model consumes besides (z_t, t) is packed into a
ConditioningBundle here: the joint sequence (cross-modal states through
the connector, concatenated with the frozen text features), the identity
tokens, the per-reference latents, and the slot masks. The padded latent
layout appends one slot per reference after the video frames and stacks
noisy channels, reference channels, and a mask channel.

Dropout for guidance training replaces the whole bundle with learned null
tokens and removes the reference slots, so the unconditional branch sees
no reference information at all, not even slot count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .encoders import IMAGE_KIND, TEXT_KIND, EncoderStack, ReferenceImage, TokenSequence

K_MAX_DEFAULT = 4


class ConditioningError(ValueError):
    """Malformed conditioning assembly."""


@dataclass(frozen=True)
class DroppedFlags:
    """Which streams were replaced by null conditioning."""

    joint: bool = False
    clip: bool = False
    vae: bool = False

    @property
    def unconditional(self) -> bool:
        return self.joint and self.clip and self.vae


@dataclass
class ConditioningBundle:
    """Everything the velocity model consumes besides (z_t, t).

    c_joint rows [0, L_mllm) are the connector-projected cross-modal
    states, rows [L_mllm, Lj) the frozen text features. c_clip is empty
    for K=0 (stream omitted downstream, never attended). c_vae holds one
    single-frame latent per reference, m_ref one mask plane per
    reference.
    """

    c_joint: ad.Tensor  # [Lj, d_cond]
    c_clip: Union[np.ndarray, ad.Tensor]  # [K*p, d_cond]
    c_vae: List[np.ndarray]  # K entries, each [Cz, H', W']
    m_ref: np.ndarray  # [K, 1, H', W']
    k_refs: int
    dropped: DroppedFlags = DroppedFlags()

    def __post_init__(self):
        if len(self.c_vae) != self.k_refs or self.m_ref.shape[0] != self.k_refs:
            raise ConditioningError(
                f"bundle claims {self.k_refs} references but carries "
                f"{len(self.c_vae)} latents and {self.m_ref.shape[0]} masks"
            )


@dataclass(frozen=True)
class PaddedLatent:
    """Model input layout: [T+K, 2*Cz+1, H', W'].

    Channels [0, Cz) carry the noisy video latent on slots [0, T) and
    zeros on the reference slots; channels [Cz, 2Cz) are zero on video
    slots and carry the k-th reference latent on slot T+k; the final
    channel is the slot mask.
    """

    x_tilde: np.ndarray
    ref_slot_index_range: tuple  # [T, T+K)

    @property
    def n_slots(self) -> int:
        return self.x_tilde.shape[0]


def build_sequence(
    text_ids: Sequence[int],
    images: Sequence[ReferenceImage],
    placeholder_id: int,
    k_max: int = K_MAX_DEFAULT,
) -> tuple:
    """Text tokens followed by one placeholder per reference image."""
    k = len(images)
    if k > k_max:
        raise ConditioningError(f"{k} reference images exceed the limit of {k_max}")
    ids = tuple(int(i) for i in text_ids) + (int(placeholder_id),) * k
    kinds = (TEXT_KIND,) * len(text_ids) + (IMAGE_KIND,) * k
    return TokenSequence(ids=ids, kinds=kinds), list(images)


def make_joint(c_mllm, c_text) -> ad.Tensor:
    """Sequence-axis concatenation [c_mllm; c_text], cross-modal block first."""
    a = c_mllm if isinstance(c_mllm, ad.Tensor) else ad.Tensor(np.asarray(c_mllm, dtype=np.float64))
    b = c_text if isinstance(c_text, ad.Tensor) else ad.Tensor(np.asarray(c_text, dtype=np.float64))
    if b.shape[0] == 0:
        raise ConditioningError("text stream must not be empty")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConditioningError(f"stream widths differ: {a.shape} vs {b.shape}")
    return ad.concat([a, b])


def pad_and_place(
    x_t: np.ndarray, c_vae: Sequence[np.ndarray], m_ref: np.ndarray
) -> PaddedLatent:
    """Append one slot per reference and stack noisy/reference/mask channels."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 4:
        raise ConditioningError(f"expected latent video [T, Cz, H', W'], got {x_t.shape}")
    t, cz, hh, ww = x_t.shape
    k = len(c_vae)
    if m_ref.shape[0] != k or (k and m_ref.shape[1:] != (1, hh, ww)):
        raise ConditioningError(
            f"mask shape {m_ref.shape} does not match {k} references at {hh}x{ww}"
        )
    out = np.zeros((t + k, 2 * cz + 1, hh, ww), dtype=np.float64)
    out[:t, :cz] = x_t
    for i, ref in enumerate(c_vae):
        ref = np.asarray(ref, dtype=np.float64)
        if ref.shape != (cz, hh, ww):
            raise ConditioningError(
                f"reference latent {i} has shape {ref.shape}, expected {(cz, hh, ww)}"
            )
        out[t + i, cz : 2 * cz] = ref
        out[t + i, 2 * cz] = m_ref[i, 0]
    return PaddedLatent(x_tilde=out, ref_slot_index_range=(t, t + k))


def build_bundle(
    stack: EncoderStack,
    text_ids: Sequence[int],
    images: Sequence[ReferenceImage],
    placeholder_id: int,
    k_max: int = K_MAX_DEFAULT,
) -> ConditioningBundle:
    """Run the frozen encoders and the connector over one sample's inputs."""
    if not text_ids:
        raise ConditioningError("prompt must contain at least one text token")
    seq, imgs = build_sequence(text_ids, images, placeholder_id, k_max=k_max)
    h_mllm = stack.mllm_encode(seq, imgs)
    c_mllm = stack.connector_project(h_mllm)
    c_text = stack.text_encode(text_ids)
    c_joint = make_joint(c_mllm, c_text)
    c_clip = stack.identity_encode(imgs)
    c_vae = [stack.encode_reference_latent(im) for im in imgs]
    s = stack.config.vae_stride
    hh = ww = stack.config.ref_size // s
    k = len(imgs)
    m_ref = np.ones((k, 1, hh, ww), dtype=np.float64)
    return ConditioningBundle(
        c_joint=c_joint, c_clip=c_clip, c_vae=c_vae, m_ref=m_ref, k_refs=k
    )


def null_bundle(null_joint: ad.Tensor, null_clip: ad.Tensor) -> ConditioningBundle:
    """The fully unconditional bundle: learned null tokens, no reference slots."""
    return ConditioningBundle(
        c_joint=null_joint,
        c_clip=null_clip,
        c_vae=[],
        m_ref=np.zeros((0, 1, 1, 1), dtype=np.float64),
        k_refs=0,
        dropped=DroppedFlags(joint=True, clip=True, vae=True),
    )


def cfg_dropout(
    bundle: ConditioningBundle,
    rate: float,
    rng: np.random.Generator,
    null_joint: Optional[ad.Tensor] = None,
    null_clip: Optional[ad.Tensor] = None,
) -> ConditioningBundle:
    """With probability ``rate``, replace all streams by null conditioning.

    All streams drop together: the unconditional branch of guidance is a
    fully unconditional model, not a partially conditioned one. The rng
    draw happens on every call so seeded runs drop the same samples.
    """
    if not 0.0 <= rate < 1.0:
        raise ConditioningError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng.random() >= rate:
        return bundle
    if null_joint is None or null_clip is None:
        raise ConditioningError("dropout requires the learned null tokens")
    return null_bundle(null_joint, null_clip)
