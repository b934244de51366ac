"""Training harness: AdamW, the two-stage curriculum loop, and resume.

Determinism is iteration-derived: every random draw in iteration ``i``
comes from a generator seeded with ``(run seed, stream, i)``, so a
resumed run replays the exact byte stream of the unbroken one without
serializing generator state. The checkpoint records the scheme and seed
as its rng state.

Per batch item the frozen encoder outputs are cached; only the connector
and generator run on the tape. Gradients from the per-sample tapes are
summed in slot order and averaged once, so batch results do not depend
on accumulation tricks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, save_checkpoint
from .conditioning import ConditioningBundle, build_sequence, cfg_dropout, make_joint
from .config import RunConfig, config_hash
from .dit import DiTConfig, init_dit_params, trainable_params, u_theta
from .encoders import EncoderStack
from .flow import fm_loss, forward_diffuse, velocity_target
from .synthdata import CORE_TIER, FULL_TIER, Corpus, TrainingSample
from .vocab import IMAGE_PLACEHOLDER, Vocab, build_vocab

TRAIN_STREAM = 1
RNG_SCHEME = "iteration-derived"


class TrainingError(RuntimeError):
    """Aborted training run (non-finite loss, bad resume, empty tier)."""


# --- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(params: Dict[str, ad.Tensor], config: RunConfig) -> OptimizerState:
    state = OptimizerState(
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps_adam,
        weight_decay=config.weight_decay,
    )
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(
    params: Dict[str, ad.Tensor], grads: Dict[str, np.ndarray], state: OptimizerState
) -> OptimizerState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise TrainingError(f"gradient shape {g.shape} mismatches {name} {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= state.lr * (update + state.weight_decay * p.data)
    return state


# --- model assembly ----------------------------------------------------------


@dataclass
class ModelParts:
    """Everything a forward pass needs, built from one RunConfig."""

    run: RunConfig
    vocab: Vocab
    stack: EncoderStack
    params: Dict[str, object]
    dit: DiTConfig

    @property
    def placeholder_id(self) -> int:
        return self.vocab.id_of(IMAGE_PLACEHOLDER)

    def trainables(self) -> Dict[str, ad.Tensor]:
        merged = dict(trainable_params(self.params))
        merged.update(self.stack.connector_params())
        return merged


def build_model(config: RunConfig, vocab: Optional[Vocab] = None) -> ModelParts:
    vocab = vocab or build_vocab()
    stack = EncoderStack(config.encoder_config(len(vocab)))
    dit_cfg = config.dit_config()
    params = init_dit_params(dit_cfg, np.random.default_rng(config.seed))
    return ModelParts(run=config, vocab=vocab, stack=stack, params=params, dit=dit_cfg)


def load_into(parts: ModelParts, ck: Checkpoint) -> None:
    """Copy checkpoint parameter values into the live tensors."""
    live = parts.trainables()
    missing = sorted(set(live) ^ set(ck.params))
    if missing:
        raise TrainingError(f"checkpoint parameters do not match the model: {missing}")
    for name, tensor in live.items():
        if tensor.data.shape != ck.params[name].shape:
            raise TrainingError(
                f"{name}: checkpoint shape {ck.params[name].shape} vs model {tensor.data.shape}"
            )
        tensor.data[...] = ck.params[name]


def snapshot(parts: ModelParts, opt: OptimizerState, iteration: int, stage: str) -> Checkpoint:
    return Checkpoint(
        config_hash=config_hash(parts.run),
        iteration=iteration,
        stage=stage,
        params={k: v.data.copy() for k, v in parts.trainables().items()},
        opt_m={k: v.copy() for k, v in opt.m.items()},
        opt_v={k: v.copy() for k, v in opt.v.items()},
        opt_step=opt.step,
        rng={"scheme": RNG_SCHEME, "seed": parts.run.seed, "stream": TRAIN_STREAM},
    )


# --- frozen-side encoding cache ----------------------------------------------


@dataclass
class EncodedSample:
    """Frozen encoder outputs for one sample; connector runs later.

    ``z0`` is the clean video latent — present for training samples,
    None when the encoding only conditions generation.
    """

    h_mllm: np.ndarray
    c_text: np.ndarray
    c_clip: np.ndarray
    c_vae: list
    m_ref: np.ndarray
    k_refs: int
    z0: Optional[np.ndarray] = None


def encode_conditioning(parts: ModelParts, prompt_tokens, ref_images) -> EncodedSample:
    stack = parts.stack
    seq, imgs = build_sequence(prompt_tokens, ref_images, parts.placeholder_id)
    hh = ww = parts.run.latent_size
    k = len(imgs)
    return EncodedSample(
        h_mllm=stack.mllm_encode(seq, imgs),
        c_text=stack.text_encode(prompt_tokens),
        c_clip=stack.identity_encode(imgs),
        c_vae=[stack.encode_reference_latent(im) for im in imgs],
        m_ref=np.ones((k, 1, hh, ww), dtype=np.float64),
        k_refs=k,
    )


def encode_sample(parts: ModelParts, sample: TrainingSample) -> EncodedSample:
    enc = encode_conditioning(parts, sample.prompt_tokens, sample.ref_images)
    enc.z0 = parts.stack.vae_encode(sample.video)
    return enc


class SampleCache:
    """Lazy per-record cache of frozen encodings, keyed by corpus index."""

    def __init__(self, parts: ModelParts, corpus: Corpus):
        self.parts = parts
        self.corpus = corpus
        self._store: Dict[int, EncodedSample] = {}

    def get(self, index: int) -> EncodedSample:
        enc = self._store.get(index)
        if enc is None:
            enc = encode_sample(self.parts, self.corpus[index])
            self._store[index] = enc
        return enc


# --- the loop ----------------------------------------------------------------


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, TRAIN_STREAM, iteration)))


def assemble_bundle(parts: ModelParts, enc: EncodedSample) -> ConditioningBundle:
    """Conditioning for one encoded sample under the config's joint mode.

    Run inside a tape during training (the connector must be recorded);
    outside one, the forward is plain numpy under the hood.
    """
    if parts.run.joint_streams == "text":
        c_joint = ad.Tensor(enc.c_text)
    else:
        c_joint = make_joint(parts.stack.connector_project(enc.h_mllm), enc.c_text)
    return ConditioningBundle(
        c_joint=c_joint,
        c_clip=enc.c_clip,
        c_vae=enc.c_vae,
        m_ref=enc.m_ref,
        k_refs=enc.k_refs,
    )


def _taped_loss(parts: ModelParts, enc: EncodedSample, t: float, eps: np.ndarray, rng, dropout: float):
    """One sample's forward pass on a fresh tape; returns (loss, tape)."""
    params = parts.params
    with ad.Tape() as tape:
        bundle = assemble_bundle(parts, enc)
        bundle = cfg_dropout(bundle, dropout, rng, params["null.joint"], params["null.clip"])
        z_t = forward_diffuse(enc.z0, eps, t)
        v_pred = u_theta(z_t, t, bundle, params, parts.dit)
        loss = fm_loss(v_pred, velocity_target(enc.z0, eps))
    return loss, tape


def train_iteration(parts: ModelParts, cache: SampleCache, records, iteration: int) -> tuple:
    """One optimizer step over a freshly drawn batch; returns (loss, grads).

    Draw order inside the iteration generator is fixed: batch indices,
    then the batch's t values, then per slot an eps field and the
    dropout coin. Anything else would break bitwise resume.
    """
    run = parts.run
    rng = iteration_rng(run.seed, iteration)
    idx = rng.integers(0, len(records), size=run.batch_size)
    ts = rng.uniform(size=run.batch_size)

    trainables = parts.trainables()
    grads = {name: np.zeros_like(p.data) for name, p in trainables.items()}
    total = 0.0
    for b in range(run.batch_size):
        enc = cache.get(records[idx[b]].index)
        eps = rng.standard_normal(enc.z0.shape)
        ad.zero_grads(trainables.values())
        loss, tape = _taped_loss(parts, enc, float(ts[b]), eps, rng, run.cfg_dropout)
        tape.backward(loss)
        total += float(loss.data)
        for name, p in trainables.items():
            if p.grad is not None:
                grads[name] += p.grad
    scale = 1.0 / run.batch_size
    for name in grads:
        grads[name] *= scale
    return total * scale, grads


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: List[tuple]  # (iteration, stage, loss)


def stage_plan(config: RunConfig) -> List[tuple]:
    """Absolute iteration ranges: [(stage, tier, start, stop), ...]."""
    n1 = config.stage1_iters
    return [
        (CORE_TIER, CORE_TIER, 0, n1),
        (FULL_TIER, FULL_TIER, n1, n1 + config.stage2_iters),
    ]


def train(
    config: RunConfig,
    corpus: Corpus,
    resume: Optional[Checkpoint] = None,
    on_log: Optional[Callable[[int, str, float, float], None]] = None,
    nan_snapshot_path=None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Run the curriculum from scratch or from a checkpoint's iteration.

    ``stop_after`` pauses at an absolute iteration count without touching
    the config (and so the config hash); resuming the returned checkpoint
    replays the unbroken run exactly.
    """
    parts = build_model(config)
    opt = init_optimizer(parts.trainables(), config)
    start = 0
    if resume is not None:
        if resume.config_hash != config_hash(config):
            raise TrainingError("resume checkpoint was written under a different config")
        load_into(parts, resume)
        for name in opt.m:
            opt.m[name][...] = resume.opt_m[name]
            opt.v[name][...] = resume.opt_v[name]
        opt.step = resume.opt_step
        start = resume.iteration

    total_iters = config.stage1_iters + config.stage2_iters
    stop = total_iters if stop_after is None else min(stop_after, total_iters)

    frozen_before = parts.stack.frozen_hash()
    cache = SampleCache(parts, corpus)
    losses: List[tuple] = []
    trainables = parts.trainables()
    stage = CORE_TIER if start < config.stage1_iters else FULL_TIER
    for plan_stage, tier, lo, hi in stage_plan(config):
        if hi <= start or lo >= stop:
            continue
        stage = plan_stage
        records = corpus.manifest.by_tier(tier)
        if not records:
            raise TrainingError(f"corpus has no {tier!r}-tier records")
        for iteration in range(max(lo, start), min(hi, stop)):
            began = time.perf_counter()
            loss, grads = train_iteration(parts, cache, records, iteration)
            if not np.isfinite(loss):
                if nan_snapshot_path is not None:
                    save_checkpoint(snapshot(parts, opt, iteration, stage), nan_snapshot_path)
                raise TrainingError(
                    f"non-finite loss at iteration {iteration} (stage {stage})"
                    + (f"; diagnostic snapshot at {nan_snapshot_path}" if nan_snapshot_path else "")
                )
            adamw_step(trainables, grads, opt)
            losses.append((iteration, stage, loss))
            if on_log is not None:
                on_log(iteration, stage, loss, time.perf_counter() - began)

    if parts.stack.frozen_hash() != frozen_before:
        raise TrainingError("frozen encoder weights changed during training")
    return TrainResult(
        checkpoint=snapshot(parts, opt, max(stop, start), stage), losses=losses
    )
