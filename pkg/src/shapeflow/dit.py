"""The velocity backbone: patch embedding, conditioned blocks, output head.

One forward pass takes the padded latent (video slots plus reference
slots), patchifies and embeds it, runs ``depth`` pre-norm residual
blocks, and reads the velocity field back out through a zero-initialized
head. Each block applies:

* spatiotemporal self-attention over all tokens (full, not factorized),
* dual cross-attention with a shared query projection — one attention
  over the joint sequence, one over the identity tokens scaled by gamma,
  their results added residually as a plain sum,
* a GELU feed-forward network.

Time conditioning is adaptive-norm style: a per-block MLP maps the
sinusoidal embedding of t to scale/shift vectors for each pre-norm and
gate vectors for the self-attention and FFN residuals. The gate and the
modulation finals start at zero, so an untrained model is the identity
between patch embedding and head — and the head starts at zero, so the
initial velocity prediction is exactly zero.

Reference-slot outputs are computed but discarded; the model predicts
velocity only over the video slots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Union

import numpy as np

from . import autodiff as ad
from .conditioning import ConditioningBundle, PaddedLatent, pad_and_place
from .encoders import sinusoidal_positions


class DiTError(ValueError):
    """Invalid backbone configuration or input."""


@dataclass(frozen=True)
class DiTConfig:
    depth: int = 2
    d_model: int = 64
    heads: int = 2
    patch_t: int = 1
    patch_h: int = 4
    patch_w: int = 4
    d_cond: int = 32
    gamma: float = 1.0
    cz: int = 48
    max_slots: int = 16  # T + K ceiling for the temporal position table
    max_h: int = 8
    max_w: int = 8
    d_time: int = 32
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise DiTError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.d_time % 2:
            raise DiTError(f"d_time must be even, got {self.d_time}")

    @property
    def patch_in_dim(self) -> int:
        return (2 * self.cz + 1) * self.patch_t * self.patch_h * self.patch_w

    @property
    def patch_out_dim(self) -> int:
        return self.cz * self.patch_t * self.patch_h * self.patch_w


# modulation row layout produced by each block's time MLP
_MOD_ROWS = 8
(
    _SELF_SCALE,
    _SELF_SHIFT,
    _SELF_GATE,
    _CROSS_SCALE,
    _CROSS_SHIFT,
    _FFN_SCALE,
    _FFN_SHIFT,
    _FFN_GATE,
) = range(_MOD_ROWS)


def init_dit_params(config: DiTConfig, rng: np.random.Generator) -> Dict[str, object]:
    """All named weights. Everything is trainable except the frequency table."""
    d, dc, dt = config.d_model, config.d_cond, config.d_time
    p: Dict[str, object] = {}

    def mat(shape):
        return ad.parameter(rng.standard_normal(shape) / np.sqrt(shape[0]))

    def zeros(shape):
        return ad.parameter(np.zeros(shape))

    p["patch.proj"] = mat((config.patch_in_dim, d))
    p["patch.bias"] = zeros((d,))
    for i in range(config.depth):
        p[f"b{i}.self.wq"] = mat((d, d))
        p[f"b{i}.self.wk"] = mat((d, d))
        p[f"b{i}.self.wv"] = mat((d, d))
        p[f"b{i}.self.wo"] = mat((d, d))
        p[f"b{i}.cross.wq"] = mat((d, d))
        p[f"b{i}.joint.wk"] = mat((dc, d))
        p[f"b{i}.joint.wv"] = mat((dc, d))
        p[f"b{i}.clip.wk"] = mat((dc, d))
        p[f"b{i}.clip.wv"] = mat((dc, d))
        for part in ("self", "cross", "ffn"):
            p[f"b{i}.norm.{part}.gain"] = ad.parameter(np.ones(d))
            p[f"b{i}.norm.{part}.bias"] = zeros((d,))
        p[f"b{i}.time.w1"] = mat((dt, d))
        p[f"b{i}.time.b1"] = zeros((d,))
        # zero-init final: modulation starts as the identity
        p[f"b{i}.time.w2"] = zeros((d, _MOD_ROWS * d))
        p[f"b{i}.time.b2"] = zeros((_MOD_ROWS * d,))
        hidden = config.ffn_mult * d
        p[f"b{i}.ffn.w1"] = mat((d, hidden))
        p[f"b{i}.ffn.b1"] = zeros((hidden,))
        p[f"b{i}.ffn.w2"] = mat((hidden, d))
        p[f"b{i}.ffn.b2"] = zeros((d,))
    p["final.norm.gain"] = ad.parameter(np.ones(d))
    p["final.norm.bias"] = zeros((d,))
    # zero-init head: the untrained model predicts zero velocity
    p["head.proj"] = zeros((d, config.patch_out_dim))
    p["head.bias"] = zeros((config.patch_out_dim,))
    # time-gated input passthrough: per-channel gain on z_t. At full scale
    # the residual stream carries the input because d_model exceeds the
    # patch content; here the patch content dwarfs d_model, so without an
    # explicit passthrough the head cannot express the z_t-linear part of
    # the velocity and denoising stalls at the unconditional floor.
    p["head.gate"] = zeros((dt, config.cz))
    p["head.gate_bias"] = zeros((config.cz,))
    p["null.joint"] = zeros((1, dc))
    p["null.clip"] = zeros((1, dc))
    # fixed log-spaced frequency table; stored with the params but frozen
    half = dt // 2
    p["time.freqs"] = np.exp(np.linspace(0.0, np.log(1000.0), half))
    return p


def trainable_params(params: Dict[str, object]) -> Dict[str, ad.Tensor]:
    return {k: v for k, v in params.items() if isinstance(v, ad.Tensor)}


def param_count(params: Dict[str, object]) -> int:
    return sum(int(np.size(v.data)) for v in trainable_params(params).values())


def _positions(n_slots: int, gh: int, gw: int, config: DiTConfig) -> np.ndarray:
    """Factored positions: slot, row, and column tables summed per token."""
    d = config.d_model
    ts = sinusoidal_positions(config.max_slots, d)[:n_slots]
    hs = sinusoidal_positions(config.max_h, d)[:gh]
    ws = sinusoidal_positions(config.max_w, d)[:gw]
    pos = ts[:, None, None, :] + hs[None, :, None, :] + ws[None, None, :, :]
    return pos.reshape(n_slots * gh * gw, d)


def patch_embed(padded: PaddedLatent, params: Dict[str, object], config: DiTConfig) -> ad.Tensor:
    """[T+K, 2Cz+1, H', W'] -> [N, d_model] tokens with positions added."""
    x = padded.x_tilde
    s, c, hh, ww = x.shape
    pt, ph, pw = config.patch_t, config.patch_h, config.patch_w
    if c != 2 * config.cz + 1:
        raise DiTError(f"padded latent has {c} channels, expected {2 * config.cz + 1}")
    if s % pt or hh % ph or ww % pw:
        raise DiTError(f"extents {(s, hh, ww)} not divisible by patches {(pt, ph, pw)}")
    gs, gh, gw = s // pt, hh // ph, ww // pw
    if gs > config.max_slots or gh > config.max_h or gw > config.max_w:
        raise DiTError(f"token grid {(gs, gh, gw)} exceeds the configured position tables")
    tokens = x.reshape(gs, pt, c, gh, ph, gw, pw)
    tokens = tokens.transpose(0, 3, 5, 2, 1, 4, 6).reshape(gs * gh * gw, c * pt * ph * pw)
    h = ad.linear(ad.Tensor(tokens), params["patch.proj"], params["patch.bias"])
    return h + ad.Tensor(_positions(gs, gh, gw, config))


def unpatchify(tokens: ad.Tensor, n_slots: int, hh: int, ww: int, config: DiTConfig) -> ad.Tensor:
    """[N, Cz*pt*ph*pw] -> [T+K, Cz, H', W'], the exact patchify inverse."""
    pt, ph, pw = config.patch_t, config.patch_h, config.patch_w
    gs, gh, gw = n_slots // pt, hh // ph, ww // pw
    if tokens.shape != (gs * gh * gw, config.patch_out_dim):
        raise DiTError(
            f"token block {tokens.shape} does not match grid {(gs, gh, gw)}"
        )
    x = ad.reshape(tokens, (gs, gh, gw, config.cz, pt, ph, pw))
    x = ad.permute_axes(x, (0, 4, 3, 1, 5, 2, 6))
    return ad.reshape(x, (n_slots, config.cz, hh, ww))


def _time_features(t: float, params: Dict[str, object]) -> ad.Tensor:
    """Fixed sin/cos features of the scalar time, [1, d_time]."""
    if not 0.0 <= t <= 1.0:
        raise DiTError(f"t must lie in [0, 1], got {t}")
    freqs = params["time.freqs"]
    emb = np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])
    return ad.Tensor(emb[None, :])


def time_embed(t: float, params: Dict[str, object], config: DiTConfig) -> List[ad.Tensor]:
    """Per-block modulation matrices [8, d_model] from the scalar time."""
    e = _time_features(t, params)
    mods = []
    for i in range(config.depth):
        h = ad.gelu(ad.linear(e, params[f"b{i}.time.w1"], params[f"b{i}.time.b1"]))
        m = ad.linear(h, params[f"b{i}.time.w2"], params[f"b{i}.time.b2"])
        mods.append(ad.reshape(m, (_MOD_ROWS, config.d_model)))
    return mods


def _mod_row(mods: ad.Tensor, row: int) -> ad.Tensor:
    return ad.slice_axis0(mods, row, row + 1)  # [1, d_model], broadcasts over tokens


def _modulated_norm(h, gain, bias, mods, scale_row, shift_row):
    x = ad.layer_norm(h, gain, bias)
    scale = _mod_row(mods, scale_row)
    shift = _mod_row(mods, shift_row)
    return x + x * scale + shift


def dit_block(
    h: ad.Tensor,
    c_joint: Union[ad.Tensor, None],
    c_clip: Union[ad.Tensor, None],
    mods: ad.Tensor,
    params: Dict[str, object],
    idx: int,
    config: DiTConfig,
) -> ad.Tensor:
    """One backbone block.

    ``c_clip`` None omits the identity stream; ``c_joint`` None skips the
    whole cross sub-layer, leaving the bare self-attention + FFN backbone.
    """
    p, i, heads = params, idx, config.heads

    x = _modulated_norm(
        h, p[f"b{i}.norm.self.gain"], p[f"b{i}.norm.self.bias"], mods, _SELF_SCALE, _SELF_SHIFT
    )
    attn = ad.scaled_dot_attention(
        ad.matmul(x, p[f"b{i}.self.wq"]),
        ad.matmul(x, p[f"b{i}.self.wk"]),
        ad.matmul(x, p[f"b{i}.self.wv"]),
        heads=heads,
    )
    h = h + _mod_row(mods, _SELF_GATE) * ad.matmul(attn, p[f"b{i}.self.wo"])

    if c_joint is not None:
        x = _modulated_norm(
            h, p[f"b{i}.norm.cross.gain"], p[f"b{i}.norm.cross.bias"], mods, _CROSS_SCALE, _CROSS_SHIFT
        )
        q = ad.matmul(x, p[f"b{i}.cross.wq"])
        h = h + ad.scaled_dot_attention(
            q,
            ad.matmul(c_joint, p[f"b{i}.joint.wk"]),
            ad.matmul(c_joint, p[f"b{i}.joint.wv"]),
            heads=heads,
        )
        if c_clip is not None and config.gamma != 0.0:
            clip_term = ad.scaled_dot_attention(
                q,
                ad.matmul(c_clip, p[f"b{i}.clip.wk"]),
                ad.matmul(c_clip, p[f"b{i}.clip.wv"]),
                heads=heads,
            )
            h = h + clip_term * config.gamma

    x = _modulated_norm(
        h, p[f"b{i}.norm.ffn.gain"], p[f"b{i}.norm.ffn.bias"], mods, _FFN_SCALE, _FFN_SHIFT
    )
    f = ad.linear(
        ad.gelu(ad.linear(x, p[f"b{i}.ffn.w1"], p[f"b{i}.ffn.b1"])),
        p[f"b{i}.ffn.w2"],
        p[f"b{i}.ffn.b2"],
    )
    return h + _mod_row(mods, _FFN_GATE) * f


def u_theta(
    z_t: np.ndarray,
    t: float,
    bundle: ConditioningBundle,
    params: Dict[str, object],
    config: DiTConfig,
    include_cross: bool = True,
) -> ad.Tensor:
    """Predicted velocity over the video slots, [T, Cz, H', W'].

    ``include_cross=False`` runs the bare backbone (self-attention and
    FFN only); with both conditioning V projections zeroed the full model
    must match it exactly.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    n_video = z_t.shape[0]
    padded = pad_and_place(z_t, bundle.c_vae, bundle.m_ref)
    h = patch_embed(padded, params, config)
    mods = time_embed(t, params, config)

    c_joint = bundle.c_joint
    if not isinstance(c_joint, ad.Tensor):
        c_joint = ad.Tensor(np.asarray(c_joint, dtype=np.float64))
    c_clip = bundle.c_clip
    if c_clip is not None and not isinstance(c_clip, ad.Tensor):
        c_clip = ad.Tensor(np.asarray(c_clip, dtype=np.float64))
    if c_clip is not None and c_clip.shape[0] == 0:
        c_clip = None  # empty identity stream is omitted, never attended

    hh, ww = padded.x_tilde.shape[2], padded.x_tilde.shape[3]
    for i in range(config.depth):
        h = dit_block(
            h,
            c_joint if include_cross else None,
            c_clip if include_cross else None,
            mods[i],
            params,
            i,
            config,
        )

    h = ad.layer_norm(h, params["final.norm.gain"], params["final.norm.bias"])
    out = ad.linear(h, params["head.proj"], params["head.bias"])
    full = unpatchify(out, padded.n_slots, hh, ww, config)
    video = ad.slice_axis0(full, 0, n_video)
    gate = ad.linear(_time_features(t, params), params["head.gate"], params["head.gate_bias"])
    gate = ad.reshape(gate, (1, config.cz, 1, 1))
    return video + gate * ad.Tensor(z_t)
