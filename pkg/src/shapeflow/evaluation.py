"""Detect-then-compare evaluation and report plumbing.

Subjects are localized by nearest-palette-color segmentation, cropped to
a square box, and compared to their reference image in the pooled
identity-descriptor space. Three metrics come out: subject similarity
over verified detections, prompt-following (centroid track vs the
prompt's direction word), and, on conflict prompts, whether the output
obeys the reference color rather than the contradicting prompt color.

Generated pixels may leave [0, 1]; nearest-color classification absorbs
that without clipping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import flow
from .conditioning import null_bundle
from .dit import u_theta
from .encoders import EncoderStack, ReferenceImage
from .synthdata import (
    BACKGROUND,
    COLOR_WORDS,
    MODE_CONFLICT,
    PALETTE,
    Corpus,
    TrainingSample,
    quantize_direction,
)
from .training import EncodedSample, ModelParts, assemble_bundle, encode_conditioning
from .vocab import AND_WORD, SHAPE_WORDS, VERB_WORD, Vocab

MIN_DETECTION_AREA = 4  # pixels; smaller masses count as misses


class EvalError(ValueError):
    """Malformed evaluation input or report."""


# --- segmentation ------------------------------------------------------------

_CLASS_COLORS = np.array([PALETTE[w] for w in COLOR_WORDS] + [BACKGROUND])
BACKGROUND_CLASS = len(COLOR_WORDS)


def classify_pixels(frame: np.ndarray) -> np.ndarray:
    """Per-pixel nearest color class, [H, W]; palette indices then background."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise EvalError(f"expected frame [3, H, W], got {frame.shape}")
    diff = frame[None, :, :, :] - _CLASS_COLORS[:, :, None, None]
    return np.argmin((diff**2).sum(axis=1), axis=0)


def dominant_color_index(pixels: np.ndarray) -> Optional[int]:
    """Most frequent non-background palette class, or None for empty images."""
    labels = classify_pixels(pixels)
    counts = np.bincount(labels.ravel(), minlength=len(_CLASS_COLORS))
    counts[BACKGROUND_CLASS] = 0
    return int(np.argmax(counts)) if counts.sum() else None


def bbox_crop(frame: np.ndarray, mask: np.ndarray, out_size: int) -> np.ndarray:
    """Square crop around the mask, nearest-neighbor resized to out_size.

    The box is the mask's bounding box grown by one pixel of margin and
    squared up (descriptors expect isotropic axes), clamped to the frame.
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EvalError("cannot crop an empty mask")
    h, w = mask.shape
    r0, r1 = max(int(rows.min()) - 1, 0), min(int(rows.max()) + 2, h)
    c0, c1 = max(int(cols.min()) - 1, 0), min(int(cols.max()) + 2, w)
    side = max(r1 - r0, c1 - c0)
    rc, cc = (r0 + r1) / 2.0, (c0 + c1) / 2.0
    r0 = int(np.clip(round(rc - side / 2.0), 0, h - side)) if side <= h else 0
    c0 = int(np.clip(round(cc - side / 2.0), 0, w - side)) if side <= w else 0
    r1, c1 = min(r0 + side, h), min(c0 + side, w)
    crop = frame[:, r0:r1, c0:c1]
    ri = np.clip(np.round((np.arange(out_size) + 0.5) * crop.shape[1] / out_size - 0.5), 0, crop.shape[1] - 1).astype(int)
    ci = np.clip(np.round((np.arange(out_size) + 0.5) * crop.shape[2] / out_size - 0.5), 0, crop.shape[2] - 1).astype(int)
    return crop[:, ri[:, None], ci[None, :]]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b / (na * nb))


# --- metrics ------------------------------------------------------------------


def nexus_lite(
    video: np.ndarray,
    ref_images: Sequence[ReferenceImage],
    stack: EncoderStack,
    area_threshold: int = MIN_DETECTION_AREA,
) -> float:
    """Mean detected-crop vs reference similarity over frames and subjects.

    Each (frame, subject) cell is a verified detection (pooled-descriptor
    cosine, clamped at zero — anticorrelation is no better than a miss)
    or a miss scoring 0. All-background videos therefore score 0.
    """
    if not ref_images:
        raise EvalError("nexus_lite needs at least one reference image")
    refs = []
    for im in ref_images:
        color = dominant_color_index(im.pixels)
        if color is None:
            raise EvalError("reference image contains no subject pixels")
        refs.append((color, stack.pooled_identity(im)))
    scores: List[float] = []
    for frame in np.asarray(video, dtype=np.float64):
        labels = classify_pixels(frame)
        for color, ref_desc in refs:
            mask = labels == color
            if int(mask.sum()) < area_threshold:
                scores.append(0.0)
                continue
            crop = bbox_crop(frame, mask, stack.config.ref_size)
            scores.append(max(0.0, _cosine(stack.pooled_identity(crop), ref_desc)))
    return float(np.mean(scores))


def parse_prompt(tokens: Sequence[int], vocab: Vocab) -> List[dict]:
    """Invert the prompt grammar into per-subject color/shape/direction."""
    words = vocab.decode(tokens).split()
    subjects = []
    i = 0
    while i < len(words):
        if subjects:
            if words[i] != AND_WORD:
                raise EvalError(f"expected {AND_WORD!r} between subjects, got {words[i]!r}")
            i += 1
        if i + 4 > len(words) or words[i + 2] != VERB_WORD:
            raise EvalError(f"malformed prompt {' '.join(words)!r}")
        color, shape, direction = words[i], words[i + 1], words[i + 3]
        if color not in COLOR_WORDS or shape not in SHAPE_WORDS:
            raise EvalError(f"unknown subject words {color!r} {shape!r}")
        subjects.append({"color": color, "shape": shape, "direction": direction})
        i += 4
    if not subjects:
        raise EvalError("empty prompt")
    return subjects


def _mask_centroid(labels: np.ndarray, color: int) -> Optional[tuple]:
    rows, cols = np.nonzero(labels == color)
    if rows.size < MIN_DETECTION_AREA:
        return None
    return float(cols.mean()), float(rows.mean())


def prompt_follow(video: np.ndarray, sample: TrainingSample, vocab: Vocab) -> float:
    """Fraction of subjects whose color-mask track matches the prompt direction.

    Detection uses the reference image's color (the ground truth under
    conflict prompts); the expected direction is always the prompt's.
    Subjects undetected in the first or last frame count as failures.
    """
    prompt = parse_prompt(sample.prompt_tokens, vocab)
    if len(prompt) != len(sample.ref_images):
        raise EvalError("prompt subjects do not match the reference images")
    video = np.asarray(video, dtype=np.float64)
    first = classify_pixels(video[0])
    last = classify_pixels(video[-1])
    hits = 0
    for subject, ref in zip(prompt, sample.ref_images):
        color = dominant_color_index(ref.pixels)
        a = _mask_centroid(first, color)
        b = _mask_centroid(last, color)
        if a is None or b is None:
            continue
        measured = quantize_direction(b[0] - a[0], b[1] - a[1])
        hits += measured == subject["direction"]
    return hits / len(prompt)


def ref_wins_conflict(video: np.ndarray, sample: TrainingSample, vocab: Vocab) -> float:
    """Fraction of conflicted subjects rendered in the reference's color.

    A subject wins when the reference color's pixel mass exceeds the
    prompt color's and clears the detection threshold. Prompts that
    don't contradict their reference contribute nothing.
    """
    prompt = parse_prompt(sample.prompt_tokens, vocab)
    video = np.asarray(video, dtype=np.float64)
    labels = [classify_pixels(frame) for frame in video]
    wins, conflicted = 0, 0
    for subject, ref in zip(prompt, sample.ref_images):
        ref_color = dominant_color_index(ref.pixels)
        prompt_color = COLOR_WORDS.index(subject["color"])
        if ref_color is None or ref_color == prompt_color:
            continue
        conflicted += 1
        ref_mass = float(np.mean([(lab == ref_color).sum() for lab in labels]))
        prompt_mass = float(np.mean([(lab == prompt_color).sum() for lab in labels]))
        if ref_mass >= MIN_DETECTION_AREA and ref_mass > prompt_mass:
            wins += 1
    if conflicted == 0:
        raise EvalError("ref_wins_conflict needs at least one conflicted subject")
    return wins / conflicted


# --- generation ---------------------------------------------------------------


def generate(
    parts: ModelParts,
    prompt_tokens: Sequence[int],
    ref_images: Sequence[ReferenceImage],
    sampler: flow.SamplerConfig,
    rng: np.random.Generator,
    null_conditioning: bool = False,
) -> np.ndarray:
    """Sample one video, [T, 3, H, W], for a prompt and its references.

    ``null_conditioning`` generates from the learned null tokens instead
    of the prompt — the unconditional baseline that a trained model's
    subject binding is measured against.
    """
    params = parts.params
    nb = null_bundle(params["null.joint"], params["null.clip"])
    if null_conditioning:
        cond = nb
    else:
        enc = encode_conditioning(parts, prompt_tokens, ref_images)
        cond = assemble_bundle(parts, enc)

    def velocity(z, t, bundle):
        return u_theta(z, t, bundle, params, parts.dit)

    run = parts.run
    cz = 3 * run.vae_stride**2
    shape = (run.frames, cz, run.latent_size, run.latent_size)
    z = flow.sample(velocity, cond, nb, sampler, rng, shape)
    return parts.stack.vae_decode(z)


def eval_rng(record_index: int, seed: int) -> np.random.Generator:
    """Noise generator for one (prompt, seed) cell.

    Depends only on the cell, never the model config, so different runs
    are compared on identical noise draws (paired seeds).
    """
    return np.random.default_rng(np.random.SeedSequence((seed, record_index)))


# --- reports -------------------------------------------------------------------

_REPORT_MAGIC = "eval-report v1"


@dataclass(frozen=True)
class EvalReport:
    categories: Dict[str, Dict[str, float]]

    def value(self, category: str, metric: str) -> float:
        return self.categories[category][metric]


def serialize_report(report: EvalReport) -> str:
    lines = [_REPORT_MAGIC, ""]
    for category in sorted(report.categories):
        lines.append(f"[{category}]")
        metrics = report.categories[category]
        for metric in sorted(metrics):
            lines.append(f"{metric}: {metrics[metric]!r}")
        lines.append("")
    lines.append("[table]")
    for category in sorted(report.categories):
        for metric in sorted(report.categories[category]):
            lines.append(f"{category},{metric},{report.categories[category][metric]!r}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> EvalReport:
    lines = text.splitlines()
    if not lines or lines[0] != _REPORT_MAGIC:
        raise EvalError("not an eval report")
    categories: Dict[str, Dict[str, float]] = {}
    table: Dict[tuple, float] = {}
    section = None
    for line in lines[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section != "table":
                categories.setdefault(section, {})
            continue
        if section == "table":
            category, metric, raw = line.split(",")
            table[category, metric] = float(raw)
        elif section is not None:
            metric, _, raw = line.partition(":")
            categories[section][metric.strip()] = float(raw.strip())
        else:
            raise EvalError(f"stray line outside any section: {line!r}")
    flat = {(c, m): v for c, metrics in categories.items() for m, v in metrics.items()}
    if table != flat:
        raise EvalError("flat table does not match the category blocks")
    return EvalReport(categories=categories)


def save_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_report(report))


def load_report(path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_report(fh.read())


# --- the protocol ---------------------------------------------------------------


def evaluate(
    parts: ModelParts,
    eval_corpus: Corpus,
    seeds: Sequence[int] = (0, 1, 2),
    sampler: Optional[flow.SamplerConfig] = None,
    null_conditioning: bool = False,
) -> EvalReport:
    """One video per (prompt, seed); metrics aggregated per category.

    Categories are the corpus modes. Every category reports nexus_lite,
    prompt_follow, and its sample count; the conflict category adds
    ref_wins_conflict. An ``overall`` category averages the shared
    metrics over all generated videos.
    """
    if sampler is None:
        sampler = parts.run.sampler_config()
    vocab = parts.vocab
    per_mode: Dict[str, Dict[str, List[float]]] = {}
    for record in eval_corpus.manifest.records:
        sample = eval_corpus[record.index]
        bucket = per_mode.setdefault(
            record.mode, {"nexus_lite": [], "prompt_follow": [], "ref_wins_conflict": []}
        )
        for seed in seeds:
            video = generate(
                parts,
                sample.prompt_tokens,
                sample.ref_images,
                sampler,
                eval_rng(record.index, seed),
                null_conditioning=null_conditioning,
            )
            bucket["nexus_lite"].append(nexus_lite(video, sample.ref_images, parts.stack))
            bucket["prompt_follow"].append(prompt_follow(video, sample, vocab))
            if record.mode == MODE_CONFLICT:
                bucket["ref_wins_conflict"].append(ref_wins_conflict(video, sample, vocab))

    categories: Dict[str, Dict[str, float]] = {}
    shared: Dict[str, List[float]] = {"nexus_lite": [], "prompt_follow": []}
    for mode, bucket in per_mode.items():
        categories[mode] = {
            "samples": float(len(bucket["nexus_lite"])),
            "nexus_lite": float(np.mean(bucket["nexus_lite"])),
            "prompt_follow": float(np.mean(bucket["prompt_follow"])),
        }
        if bucket["ref_wins_conflict"]:
            categories[mode]["ref_wins_conflict"] = float(np.mean(bucket["ref_wins_conflict"]))
        for name in shared:
            shared[name].extend(bucket[name])
    categories["overall"] = {
        "samples": float(len(shared["nexus_lite"])),
        "nexus_lite": float(np.mean(shared["nexus_lite"])),
        "prompt_follow": float(np.mean(shared["prompt_follow"])),
    }
    return EvalReport(categories=categories)
