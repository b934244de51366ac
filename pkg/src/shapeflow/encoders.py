"""Frozen toy encoders and the trainable connector.

Stand-ins for the large pretrained encoders of the full-scale system,
with the same interface contracts at desk scale:

* a cross-modal reasoner over interleaved text and image-placeholder
  tokens (two self-attention blocks, placeholders expanded to patch
  tokens of their image),
* a text encoder (embedding + positions + one self-attention block),
* an identity encoder (patchify + frozen linear + a mean summary token
  per image) whose projection rows include exact local image moments, so
  pooled similarities are robust to the corpus pose augmentations,
* an exact-inverse video latent codec (s x s spatial folding followed by
  a frozen orthogonal channel map).

All of these are frozen: weights come from seeds in the config, are
stored as plain arrays, and never receive gradients. The only trainable
piece is the connector, a two-layer GELU MLP that projects reasoner
states into the conditioning width; its weights are autodiff tensors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from . import autodiff as ad
from .vocab import VocabError

TEXT_KIND = "text"
IMAGE_KIND = "image_placeholder"


class EncoderError(ValueError):
    """Malformed encoder input."""


@dataclass(frozen=True)
class TokenSequence:
    """Interleaved prompt: text token ids plus image placeholders.

    ``ids`` and ``kinds`` run in parallel; placeholder entries carry the
    placeholder token id and ``kinds[i] == "image_placeholder"``.
    """

    ids: tuple
    kinds: tuple

    def __post_init__(self):
        if len(self.ids) != len(self.kinds):
            raise EncoderError(f"ids/kinds lengths differ: {len(self.ids)} vs {len(self.kinds)}")
        for kind in self.kinds:
            if kind not in (TEXT_KIND, IMAGE_KIND):
                raise EncoderError(f"unknown token kind {kind!r}")

    @property
    def text_ids(self) -> tuple:
        return tuple(i for i, k in zip(self.ids, self.kinds) if k == TEXT_KIND)

    @property
    def placeholder_count(self) -> int:
        return sum(1 for k in self.kinds if k == IMAGE_KIND)


@dataclass(frozen=True)
class ReferenceImage:
    """One clean subject image plus an opaque identity label."""

    pixels: np.ndarray  # [3, Hr, Wr] floats in [0, 1]
    subject_id: str

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != 3:
            raise EncoderError(f"reference pixels must be [3, H, W], got {p.shape}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise EncoderError("reference pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_cond: int = 32
    d_mllm: int = 48
    mllm_blocks: int = 2
    mllm_image_patch: int = 16
    text_blocks: int = 1
    identity_patch: int = 16
    ref_size: int = 32
    vae_stride: int = 4
    connector_hidden: int = 64
    seed_mllm: int = 101
    seed_text: int = 102
    seed_identity: int = 103
    seed_vae: int = 104
    seed_connector: int = 105

    @property
    def latent_channels(self) -> int:
        return 3 * self.vae_stride * self.vae_stride

    @property
    def identity_tokens_per_image(self) -> int:
        g = self.ref_size // self.identity_patch
        return g * g + 1


# --- plain-numpy building blocks for the frozen side -----------------------


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _np_layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _np_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    scores = q @ k.T / np.sqrt(q.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)
    return p @ v


def _frozen_block(h: np.ndarray, w: dict, idx: int) -> np.ndarray:
    x = _np_layer_norm(h)
    attn = _np_attention(x @ w[f"b{idx}.wq"], x @ w[f"b{idx}.wk"], x @ w[f"b{idx}.wv"])
    h = h + attn @ w[f"b{idx}.wo"]
    x = _np_layer_norm(h)
    return h + _np_gelu(x @ w[f"b{idx}.w1"]) @ w[f"b{idx}.w2"]


def _block_weights(rng: np.random.Generator, d: int, blocks: int) -> dict:
    w = {}
    for i in range(blocks):
        for name in ("wq", "wk", "wv", "wo"):
            w[f"b{i}.{name}"] = rng.standard_normal((d, d)) / np.sqrt(d)
        w[f"b{i}.w1"] = rng.standard_normal((d, 2 * d)) / np.sqrt(d)
        w[f"b{i}.w2"] = rng.standard_normal((2 * d, d)) / np.sqrt(2 * d)
    return w


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed transformer position table, [n, d]."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    dim = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _patch_tokens(image: np.ndarray, patch: int) -> np.ndarray:
    """[3, H, W] -> [(H/p)*(W/p), 3*p*p] row-major patch flattening."""
    c, h, w = image.shape
    if h % patch or w % patch:
        raise EncoderError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(c, gh, patch, gw, patch)
    return x.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)


# Monomial exponents (a, b) of u^a v^b, degrees 0..4, in a fixed order; the
# structured columns of the identity projection compute these as exact local
# moments so pooling can rebuild global central moments from the tokens.
_MOMENT_EXPONENTS = tuple((d - b, b) for d in range(5) for b in range(d + 1))
_IDENTITY_STRUCTURED = 3 + len(_MOMENT_EXPONENTS)  # channel masses + moments
# Pooled-descriptor weights: shape terms sized to trade off against the unit
# color direction, plus a constant anchor so featureless shapes (circles,
# both angular moments near 0) still define a stable direction.
_POOL_SHAPE_WEIGHT = 1.8
_POOL_ANCHOR = 0.5


def _identity_basis(patch: int, ref_size: int, d_cond: int, rng: np.random.Generator):
    """Frozen identity projection [3p^2, d_cond] and bias [d_cond].

    The first 18 columns are structured: per-channel mass of
    background-centered pixels, then luminance-weighted monomials
    u^a v^b (degrees 0-4) in patch-local coordinates with half the
    reference image as the unit length. The remaining columns are random.
    The bias subtracts the background's own contribution, so an
    all-background patch maps to the zero token.
    """
    from .synthdata import BACKGROUND

    if d_cond < _IDENTITY_STRUCTURED:
        raise EncoderError(f"d_cond must be at least {_IDENTITY_STRUCTURED}, got {d_cond}")
    w = np.zeros((3, patch, patch, d_cond), dtype=np.float64)
    half = ref_size / 2.0
    coords = (np.arange(patch) + 0.5 - patch / 2.0) / half
    u = coords[None, :]  # x within patch
    v = coords[:, None]  # y within patch
    scale = 1.0 / (patch * patch)
    for c in range(3):
        w[c, :, :, c] = scale
    for j, (a, b) in enumerate(_MOMENT_EXPONENTS):
        w[:, :, :, 3 + j] = (u**a * v**b) * scale
    n_random = d_cond - _IDENTITY_STRUCTURED
    if n_random:
        flat_dim = 3 * patch * patch
        w[..., _IDENTITY_STRUCTURED:] = rng.standard_normal(
            (3, patch, patch, n_random)
        ) / np.sqrt(flat_dim)
    proj = w.reshape(3 * patch * patch, d_cond)
    bg = np.repeat(np.asarray(BACKGROUND, dtype=np.float64), patch * patch)
    bias = -(bg @ proj)
    return proj, bias


class EncoderStack:
    """All frozen encoder weights plus the trainable connector."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        d_m, d_c = config.d_mllm, config.d_cond

        rng = np.random.default_rng(config.seed_mllm)
        patch_dim = 3 * config.mllm_image_patch**2
        self._mllm = {
            "embed": rng.standard_normal((config.vocab_size, d_m)) * 0.5,
            "img_proj": rng.standard_normal((patch_dim, d_m)) / np.sqrt(patch_dim),
        }
        self._mllm.update(_block_weights(rng, d_m, config.mllm_blocks))

        rng = np.random.default_rng(config.seed_text)
        self._text = {"embed": rng.standard_normal((config.vocab_size, d_c)) * 0.5}
        self._text.update(_block_weights(rng, d_c, config.text_blocks))

        rng = np.random.default_rng(config.seed_identity)
        proj, bias = _identity_basis(config.identity_patch, config.ref_size, d_c, rng)
        self._identity = {"proj": proj, "bias": bias}

        rng = np.random.default_rng(config.seed_vae)
        cz = config.latent_channels
        raw = rng.standard_normal((cz, cz))
        q, r = np.linalg.qr(raw)
        self._vae_map = q * np.sign(np.diag(r))[None, :]  # orthogonal, sign-fixed

        rng = np.random.default_rng(config.seed_connector)
        hidden = config.connector_hidden
        self.connector = {
            "connector.w1": ad.parameter(rng.standard_normal((d_m, hidden)) / np.sqrt(d_m)),
            "connector.b1": ad.parameter(np.zeros(hidden)),
            "connector.w2": ad.parameter(rng.standard_normal((hidden, d_c)) / np.sqrt(hidden)),
            "connector.b2": ad.parameter(np.zeros(d_c)),
        }

    # --- frozen hashing ----------------------------------------------------

    def frozen_hash(self) -> str:
        """Stable digest of every frozen weight array."""
        h = hashlib.sha256()
        groups = (("mllm", self._mllm), ("text", self._text), ("identity", self._identity))
        for gname, group in groups:
            for name in sorted(group):
                arr = np.ascontiguousarray(group[name], dtype="<f8")
                h.update(f"{gname}.{name}:{arr.shape}".encode())
                h.update(arr.tobytes())
        arr = np.ascontiguousarray(self._vae_map, dtype="<f8")
        h.update(f"vae:{arr.shape}".encode())
        h.update(arr.tobytes())
        return h.hexdigest()

    # --- text --------------------------------------------------------------

    def text_encode(self, token_ids: Sequence[int]) -> np.ndarray:
        """Frozen text features, [Lt, d_cond]."""
        ids = [int(i) for i in token_ids]
        if not ids:
            raise EncoderError("text_encode requires at least one token")
        v = self.config.vocab_size
        for i in ids:
            if not 0 <= i < v:
                raise VocabError(f"token id {i} outside vocabulary of size {v}")
        h = self._text["embed"][ids] + sinusoidal_positions(len(ids), self.config.d_cond)
        for b in range(self.config.text_blocks):
            h = _frozen_block(h, self._text, b)
        return h

    # --- cross-modal reasoner ------------------------------------------------

    def mllm_encode(self, seq: TokenSequence, images: Sequence[ReferenceImage]) -> np.ndarray:
        """Frozen cross-modal hidden states, [L, d_mllm].

        Placeholder entries expand, in order, to the patch tokens of the
        matching image, so L = n_text + K * patches_per_image. The final
        block's hidden states are returned.
        """
        if seq.placeholder_count != len(images):
            raise EncoderError(
                f"sequence has {seq.placeholder_count} image placeholders but {len(images)} images were given"
            )
        v = self.config.vocab_size
        rows = []
        img_iter = iter(images)
        for tok, kind in zip(seq.ids, seq.kinds):
            if kind == TEXT_KIND:
                if not 0 <= int(tok) < v:
                    raise VocabError(f"token id {tok} outside vocabulary of size {v}")
                rows.append(self._mllm["embed"][int(tok)][None, :])
            else:
                image = next(img_iter)
                patches = _patch_tokens(image.pixels, self.config.mllm_image_patch)
                rows.append(patches @ self._mllm["img_proj"])
        h = np.concatenate(rows, axis=0)
        h = h + sinusoidal_positions(h.shape[0], self.config.d_mllm)
        for b in range(self.config.mllm_blocks):
            h = _frozen_block(h, self._mllm, b)
        return h

    # --- identity ------------------------------------------------------------

    def _identity_block(self, pixels: np.ndarray) -> np.ndarray:
        patches = _patch_tokens(pixels, self.config.identity_patch)
        emb = patches @ self._identity["proj"] + self._identity["bias"]
        return np.concatenate([emb.mean(axis=0, keepdims=True), emb], axis=0)

    def identity_encode(self, images: Sequence[ReferenceImage]) -> np.ndarray:
        """Frozen identity tokens, [K * p, d_cond]; empty [0, d_cond] for K=0.

        Per image: patch embeddings plus one prepended mean token, so
        p = (ref_size / identity_patch)^2 + 1. Identical images produce
        identical token blocks.
        """
        if not images:
            return np.zeros((0, self.config.d_cond), dtype=np.float64)
        return np.concatenate([self._identity_block(im.pixels) for im in images], axis=0)

    def pooled_identity(self, image) -> np.ndarray:
        """Pose-robust identity descriptor, [6], for similarity scoring.

        Rebuilt from the structured token columns: a unit color direction,
        the scaled rotation/scale-invariant angular moment magnitudes
        |c3| and |c4| of the mass distribution (they separate three-fold,
        four-fold, and circular silhouettes), and a constant anchor.
        Accepts a ReferenceImage or a raw [3, H, W] array; an image with
        no mass (all background) maps to the zero vector.
        """
        pixels = image.pixels if isinstance(image, ReferenceImage) else np.asarray(image, dtype=np.float64)
        block = self._identity_block(pixels)
        return self._pooled_from_tokens(block[1:])

    def _pooled_from_tokens(self, patch_tokens: np.ndarray) -> np.ndarray:
        """Descriptor from one image's patch tokens (mean token excluded).

        The structured columns hold patch-local moments; shifting each by
        its patch-center offset (binomial expansion) rebuilds the exact
        global raw moments, from which central complex moments follow.
        """
        cfg = self.config
        patch, g = cfg.identity_patch, cfg.ref_size // cfg.identity_patch
        struct = patch_tokens[:, :_IDENTITY_STRUCTURED] * float(patch * patch)
        color = struct[:, :3].sum(axis=0)
        loc = struct[:, 3:]
        half = cfg.ref_size / 2.0
        centers = [
            (((c + 0.5) * patch) / half - 1.0, ((r + 0.5) * patch) / half - 1.0)
            for r in range(g)
            for c in range(g)
        ]
        idx = {ab: j for j, ab in enumerate(_MOMENT_EXPONENTS)}
        m = {}
        for a, b in _MOMENT_EXPONENTS:
            total = 0.0
            for p_i, (cu, cv) in enumerate(centers):
                for aa in range(a + 1):
                    for bb in range(b + 1):
                        total += (
                            math.comb(a, aa)
                            * math.comb(b, bb)
                            * cu ** (a - aa)
                            * cv ** (b - bb)
                            * loc[p_i, idx[aa, bb]]
                        )
            m[a, b] = total
        mass = m[0, 0]
        if abs(mass) < 1e-8:
            return np.zeros(3 + 2 + 1, dtype=np.float64)
        # raw complex moments sum_j C(k,j) i^j m[k-j, j], then the binomial
        # shift to the centroid; magnitudes are rotation-invariant and the
        # sigma powers cancel scale.
        chat = [
            sum(math.comb(k, j) * 1j**j * m[k - j, j] for j in range(k + 1))
            for k in range(5)
        ]
        mu = chat[1] / mass
        sigma2 = (m[2, 0] + m[0, 2]) / mass - abs(mu) ** 2
        sigma = math.sqrt(max(sigma2, 1e-12))
        c3 = sum(math.comb(3, j) * (-mu) ** (3 - j) * chat[j] for j in range(4))
        c4 = sum(math.comb(4, j) * (-mu) ** (4 - j) * chat[j] for j in range(5))
        n3 = abs(c3) / (abs(mass) * sigma**3)
        n4 = abs(c4) / (abs(mass) * sigma**4)
        cn = np.linalg.norm(color)
        unit = color / cn if cn > 1e-12 else np.zeros(3)
        return np.concatenate(
            [unit, [_POOL_SHAPE_WEIGHT * n3, _POOL_SHAPE_WEIGHT * n4, _POOL_ANCHOR]]
        )

    # --- video latent codec ----------------------------------------------------

    def vae_encode(self, video: np.ndarray) -> np.ndarray:
        """[T, 3, H, W] -> [T, Cz, H/s, W/s] via folding + orthogonal map."""
        video = np.asarray(video, dtype=np.float64)
        if video.ndim != 4 or video.shape[1] != 3:
            raise EncoderError(f"expected video [T, 3, H, W], got {video.shape}")
        s = self.config.vae_stride
        t, c, h, w = video.shape
        if h % s or w % s:
            raise EncoderError(f"spatial dims {h}x{w} not divisible by stride {s}")
        folded = video.reshape(t, c, h // s, s, w // s, s)
        folded = folded.transpose(0, 1, 3, 5, 2, 4).reshape(t, c * s * s, h // s, w // s)
        # channel map y = M^T x per spatial site; decode applies M, and
        # M is orthogonal, so the round trip is exact.
        return np.einsum("cd,tchw->tdhw", self._vae_map, folded)

    def vae_decode(self, latent: np.ndarray) -> np.ndarray:
        """Exact inverse of ``vae_encode``."""
        latent = np.asarray(latent, dtype=np.float64)
        s = self.config.vae_stride
        cz = self.config.latent_channels
        if latent.ndim != 4 or latent.shape[1] != cz:
            raise EncoderError(f"expected latent [T, {cz}, H', W'], got {latent.shape}")
        t, _, hh, ww = latent.shape
        folded = np.einsum("cd,tdhw->tchw", self._vae_map, latent)
        folded = folded.reshape(t, 3, s, s, hh, ww)
        return folded.transpose(0, 1, 4, 2, 5, 3).reshape(t, 3, hh * s, ww * s)

    def encode_reference_latent(self, image: ReferenceImage) -> np.ndarray:
        """Single reference image as a one-frame latent, [Cz, H', W']."""
        return self.vae_encode(image.pixels[None])[0]

    # --- connector (trainable) ---------------------------------------------------

    def connector_project(self, h_mllm) -> ad.Tensor:
        """Two-layer GELU MLP from reasoner width into conditioning width."""
        x = h_mllm if isinstance(h_mllm, ad.Tensor) else ad.Tensor(np.asarray(h_mllm, dtype=np.float64))
        if x.ndim != 2 or x.shape[1] != self.config.d_mllm:
            raise EncoderError(f"connector expects [L, {self.config.d_mllm}], got {x.shape}")
        c = self.connector
        hidden = ad.gelu(ad.linear(x, c["connector.w1"], c["connector.b1"]))
        return ad.linear(hidden, c["connector.w2"], c["connector.b2"])

    def connector_params(self) -> dict:
        return dict(self.connector)

    def load_connector(self, values: dict) -> None:
        for name, tensor in self.connector.items():
            tensor.data[...] = values[name]
