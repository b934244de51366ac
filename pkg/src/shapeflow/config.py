"""Run configuration: a flat key=value file covering data, model, and training.

One dataclass holds every knob a run needs; the file format is line
oriented (``key = value``, ``#`` comments), unknown keys are rejected,
and a canonical serialization feeds the config hash that checkpoints are
pinned to.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .dit import DiTConfig
from .encoders import EncoderConfig
from .flow import SamplerConfig


class ConfigError(ValueError):
    """Malformed run configuration."""


@dataclass(frozen=True)
class RunConfig:
    # data
    frames: int = 8
    image_size: int = 32
    ref_size: int = 32
    corpus_manifest: str = "corpus.manifest"
    # encoders
    d_cond: int = 32
    d_mllm: int = 48
    vae_stride: int = 4
    # conditioning: "mllm+text" concatenates the connector output with the
    # frozen text features; "text" is the ablation that feeds text alone
    joint_streams: str = "mllm+text"
    # generator
    depth: int = 2
    d_model: int = 64
    heads: int = 2
    patch_t: int = 1
    patch_h: int = 4
    patch_w: int = 4
    gamma: float = 1.0
    d_time: int = 32
    ffn_mult: int = 4
    # sampling
    sample_steps: int = 50
    cfg_scale: float = 5.0
    # training
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 32
    stage1_iters: int = 300
    stage2_iters: int = 1500
    cfg_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.vae_stride or self.ref_size % self.vae_stride:
            raise ConfigError(
                f"image sizes {self.image_size}/{self.ref_size} must divide by stride {self.vae_stride}"
            )
        if self.ref_size != self.image_size:
            # reference latents share the video latent grid (they occupy
            # appended slots of the same spatial extent)
            raise ConfigError(
                f"ref_size {self.ref_size} must equal image_size {self.image_size}"
            )
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ConfigError(f"cfg_dropout must lie in [0, 1), got {self.cfg_dropout}")
        if self.joint_streams not in ("mllm+text", "text"):
            raise ConfigError(f"joint_streams must be 'mllm+text' or 'text', got {self.joint_streams!r}")
        for field in ("frames", "batch_size", "stage1_iters", "stage2_iters"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.vae_stride

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            d_cond=self.d_cond,
            d_mllm=self.d_mllm,
            ref_size=self.ref_size,
            vae_stride=self.vae_stride,
        )

    def dit_config(self) -> DiTConfig:
        cz = 3 * self.vae_stride * self.vae_stride
        return DiTConfig(
            depth=self.depth,
            d_model=self.d_model,
            heads=self.heads,
            patch_t=self.patch_t,
            patch_h=self.patch_h,
            patch_w=self.patch_w,
            d_cond=self.d_cond,
            gamma=self.gamma,
            cz=cz,
            max_slots=self.frames + 8,
            max_h=max(self.latent_size, self.ref_size // self.vae_stride),
            max_w=max(self.latent_size, self.ref_size // self.vae_stride),
            d_time=self.d_time,
            ffn_mult=self.ffn_mult,
        )

    def sampler_config(self, steps: int = None, scale: float = None) -> SamplerConfig:
        return SamplerConfig(
            steps=self.sample_steps if steps is None else steps,
            guidance_scale=self.cfg_scale if scale is None else scale,
        )


# Settings used by the multi-billion-parameter system this package scales
# down; kept for documentation only. At toy size they train far too slowly
# to be useful (lr 5e-6 on a 2-block model barely moves in 6000 steps).
FULL_SCALE_REFERENCE = {
    "lr": 5e-6,
    "batch_size": 512,
    "stage1_iters": 1000,
    "stage2_iters": 5000,
}

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; unknown or repeated keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw.strip())
    return RunConfig(**values)


def serialize_config(config: RunConfig) -> str:
    """Canonical text form: every field, declaration order, ``key = value``."""
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(config))


def config_hash(config: RunConfig) -> str:
    """Digest of the canonical serialization; pins checkpoints to configs."""
    return hashlib.sha256(serialize_config(config).encode("utf-8")).hexdigest()
