"""Synthetic moving-shapes corpus: rendering, prompts, references, manifests.

Videos are T frames of [3, H, W] floats in [0, 1]: colored shapes from a
fixed palette translating over a dark background with anti-aliased edges.
Prompts follow the closed grammar ``<color> <shape> moves <direction>``
joined with ``and``. Every sample is regenerable from its manifest record
alone, so corpora are streamed rather than stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .encoders import ReferenceImage
from .vocab import AND_WORD, COLOR_WORDS, SHAPE_WORDS, VERB_WORD, Vocab, build_vocab

# The eight RGB cube corners over a mid-gray background. With this
# geometry an anti-aliased blend of any color toward the background stays
# closest to that color exactly down to 50% coverage, so nearest-color
# segmentation recovers footprints cleanly. Min pairwise distance is 1.0.
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
BACKGROUND = (0.25, 0.25, 0.25)
DITHER_AMPLITUDE = 0.01
# Anti-aliasing grid per pixel axis. Odd on purpose: one subsample sits at
# the pixel center, so straight-edge coverage crosses 1/2 exactly when the
# center enters the shape and nearest-color segmentation never ties.
SUBSAMPLES = 5

# Direction word -> unit motion (dx, dy), image convention: y grows downward.
_DIAG = 1.0 / math.sqrt(2.0)
DIRECTION_VECTORS = {
    "right": (1.0, 0.0),
    "left": (-1.0, 0.0),
    "up": (0.0, -1.0),
    "down": (0.0, 1.0),
    "upright": (_DIAG, -_DIAG),
    "upleft": (-_DIAG, -_DIAG),
    "downright": (_DIAG, _DIAG),
    "downleft": (-_DIAG, _DIAG),
}

# Shape size multipliers chosen so all three shapes cover the same area
# for a given nominal size (the circle radius).
_SQUARE_HALF_SIDE = math.sqrt(math.pi) / 2.0  # ~0.886
_TRIANGLE_CIRCUMRADIUS = math.sqrt(4.0 * math.pi / (3.0 * math.sqrt(3.0)))  # ~1.555


class CorpusError(ValueError):
    """Invalid corpus request or subject specification."""


@dataclass(frozen=True)
class SubjectSpec:
    """One subject: what it looks like and how it moves."""

    shape: str
    color: str
    size: float  # nominal radius in pixels
    motion: tuple  # (dx, dy) pixels per frame
    start: tuple  # (x, y) center at frame 0, pixel units

    def __post_init__(self):
        if self.shape not in SHAPE_WORDS:
            raise CorpusError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise CorpusError(f"unknown color {self.color!r}")
        if self.size <= 0:
            raise CorpusError(f"size must be positive, got {self.size}")

    @property
    def extent(self) -> float:
        """Circumradius of the rendered footprint in pixels."""
        if self.shape == "circle":
            return self.size
        if self.shape == "square":
            return self.size * _SQUARE_HALF_SIDE * math.sqrt(2.0)
        return self.size * _TRIANGLE_CIRCUMRADIUS

    def center_at(self, frame: int) -> tuple:
        return (self.start[0] + frame * self.motion[0], self.start[1] + frame * self.motion[1])

    @property
    def subject_id(self) -> str:
        return f"{self.color}-{self.shape}"


def quantize_direction(dx: float, dy: float, min_displacement: float = 1.0) -> str:
    """Map a displacement to the nearest compass word, or ``nowhere``."""
    if math.hypot(dx, dy) < min_displacement:
        return "nowhere"
    best, best_dot = None, -math.inf
    norm = math.hypot(dx, dy)
    for word, (ux, uy) in DIRECTION_VECTORS.items():
        dot = (dx * ux + dy * uy) / norm
        if dot > best_dot:
            best, best_dot = word, dot
    return best


def _inside(shape: str, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, size: float, rotation: float) -> np.ndarray:
    """Vectorized point-in-shape predicate in canonical (rotated) coordinates."""
    u = xs - cx
    v = ys - cy
    if rotation != 0.0:
        c, s = math.cos(-rotation), math.sin(-rotation)
        u, v = c * u - s * v, s * u + c * v
    if shape == "circle":
        return u * u + v * v <= size * size
    if shape == "square":
        half = size * _SQUARE_HALF_SIDE
        return np.maximum(np.abs(u), np.abs(v)) <= half
    # Equilateral triangle, apex pointing up (negative v), circumradius R.
    r = size * _TRIANGLE_CIRCUMRADIUS
    inside = v <= r / 2.0
    h = math.sqrt(3.0)
    inside &= h * u - v <= r
    inside &= -h * u - v <= r
    return inside


def _coverage(shape: str, H: int, W: int, cx: float, cy: float, size: float, rotation: float) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] per pixel via a fixed subsample grid."""
    ss = SUBSAMPLES
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(W)[:, None] + offs[None, :]).reshape(-1)  # W*ss
    ys = (np.arange(H)[:, None] + offs[None, :]).reshape(-1)  # H*ss
    grid_x = np.broadcast_to(xs[None, :], (H * ss, W * ss))
    grid_y = np.broadcast_to(ys[:, None], (H * ss, W * ss))
    hit = _inside(shape, grid_x, grid_y, cx, cy, size, rotation)
    return hit.reshape(H, ss, W, ss).mean(axis=(1, 3))


def footprint(spec: SubjectSpec, frame: int, H: int, W: int) -> np.ndarray:
    """Analytic boolean footprint: pixel centers inside the shape."""
    cx, cy = spec.center_at(frame)
    xs = np.broadcast_to(np.arange(W)[None, :] + 0.5, (H, W))
    ys = np.broadcast_to(np.arange(H)[:, None] + 0.5, (H, W))
    return _inside(spec.shape, xs, ys, cx, cy, spec.size, 0.0)


def validate_specs(specs: Sequence[SubjectSpec], frames: int, H: int, W: int) -> None:
    """Reject subjects that would exit the frame at any point in the clip."""
    for spec in specs:
        margin = spec.extent + 1.0
        for f in (0, frames - 1):
            cx, cy = spec.center_at(f)
            if not (margin <= cx <= W - margin and margin <= cy <= H - margin):
                raise CorpusError(
                    f"subject {spec.subject_id} exits the {W}x{H} frame at frame {f} "
                    f"(center {cx:.1f},{cy:.1f}, extent {spec.extent:.1f})"
                )


def render_frame(
    specs: Sequence[SubjectSpec],
    frame: int,
    H: int,
    W: int,
    dither: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Compose one [3, H, W] frame: background, then subjects in list order."""
    img = np.empty((3, H, W), dtype=np.float64)
    for c in range(3):
        img[c].fill(BACKGROUND[c])
    if dither is not None:
        img += dither[None, :, :]
    for spec in specs:
        cx, cy = spec.center_at(frame)
        cov = _coverage(spec.shape, H, W, cx, cy, spec.size, 0.0)
        color = PALETTE[spec.color]
        for c in range(3):
            img[c] = img[c] * (1.0 - cov) + color[c] * cov
    return np.clip(img, 0.0, 1.0)


def render_clip(
    specs: Sequence[SubjectSpec],
    frames: int,
    H: int,
    W: int,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Render [T, 3, H, W]. ``rng`` adds a static per-clip background dither."""
    validate_specs(specs, frames, H, W)
    dither = None
    if rng is not None:
        dither = (rng.random((H, W)) - 0.5) * 2.0 * DITHER_AMPLITUDE
    video = np.empty((frames, 3, H, W), dtype=np.float64)
    for f in range(frames):
        video[f] = render_frame(specs, f, H, W, dither)
    return video


def render_reference_image(
    spec: SubjectSpec,
    size_px: int,
    rotation: float = 0.0,
    scale: float = 1.0,
) -> np.ndarray:
    """Render the subject alone, centered, at the given pose. No dither."""
    img = np.empty((3, size_px, size_px), dtype=np.float64)
    for c in range(3):
        img[c].fill(BACKGROUND[c])
    center = size_px / 2.0
    cov = _coverage(spec.shape, size_px, size_px, center, center, spec.size * scale, rotation)
    color = PALETTE[spec.color]
    for c in range(3):
        img[c] = img[c] * (1.0 - cov) + color[c] * cov
    return img


ROTATION_RANGE = math.radians(30.0)
SCALE_RANGE = (0.7, 1.3)


def make_references(
    specs: Sequence[SubjectSpec],
    ref_size: int,
    rng: Optional[np.random.Generator] = None,
    augment: bool = True,
) -> list:
    """One augmented reference image per subject, in subject order."""
    refs = []
    for spec in specs:
        rotation, scale = 0.0, 1.0
        if augment:
            if rng is None:
                raise CorpusError("augmentation requires an rng")
            rotation = rng.uniform(-ROTATION_RANGE, ROTATION_RANGE)
            lo, hi = SCALE_RANGE
            # Keep the scaled footprint inside the reference frame.
            hi = min(hi, (ref_size / 2.0 - 1.5) / spec.extent)
            scale = rng.uniform(lo, max(lo, hi))
        pixels = render_reference_image(spec, ref_size, rotation, scale)
        refs.append(ReferenceImage(pixels=pixels, subject_id=spec.subject_id))
    return refs


def make_prompt(
    specs: Sequence[SubjectSpec],
    frames: int,
    vocab: Optional[Vocab] = None,
    lie_colors: Optional[dict] = None,
) -> list:
    """Token ids for ``<color> <shape> moves <direction>`` per subject.

    ``lie_colors`` maps subject index -> color word for conflict samples,
    where the prompt names a different color than the rendered subject.
    """
    vocab = vocab or build_vocab()
    words = []
    for i, spec in enumerate(specs):
        if i > 0:
            words.append(AND_WORD)
        color = lie_colors.get(i, spec.color) if lie_colors else spec.color
        total_dx = spec.motion[0] * (frames - 1)
        total_dy = spec.motion[1] * (frames - 1)
        words += [color, spec.shape, VERB_WORD, quantize_direction(total_dx, total_dy)]
    return [vocab.id_of(w) for w in words]


# ---------------------------------------------------------------------------
# Corpus sampling and manifests
# ---------------------------------------------------------------------------

CORE_TIER = "core"
FULL_TIER = "full"
MODE_SINGLE = "single"
MODE_MULTI = "multi"
MODE_CONFLICT = "conflict"


@dataclass(frozen=True)
class ManifestRecord:
    index: int
    tier: str
    seed: int
    k: int
    mode: str


@dataclass(frozen=True)
class CorpusManifest:
    frames: int
    image_size: int
    ref_size: int
    records: tuple

    def by_tier(self, tier: str) -> list:
        return [r for r in self.records if r.tier == tier]


@dataclass
class TrainingSample:
    video: np.ndarray  # [T, 3, H, W]
    prompt_tokens: list
    ref_images: list
    subjects: list
    quality_tier: str
    mode: str


def save_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sfmanifest v1\n")
        fh.write(f"frames={manifest.frames}\n")
        fh.write(f"image_size={manifest.image_size}\n")
        fh.write(f"ref_size={manifest.ref_size}\n")
        fh.write("\n")
        for r in manifest.records:
            fh.write(f"{r.index}\t{r.tier}\t{r.seed}\t{r.k}\t{r.mode}\n")


def load_manifest(path) -> CorpusManifest:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "sfmanifest v1":
        raise CorpusError(f"{path} is not a corpus manifest")
    header = {}
    i = 1
    while i < len(lines) and lines[i].strip():
        key, _, value = lines[i].partition("=")
        header[key] = int(value)
        i += 1
    records = []
    for line in lines[i + 1 :]:
        if not line.strip():
            continue
        idx, tier, seed, k, mode = line.split("\t")
        records.append(ManifestRecord(int(idx), tier, int(seed), int(k), mode))
    return CorpusManifest(
        frames=header["frames"],
        image_size=header["image_size"],
        ref_size=header["ref_size"],
        records=tuple(records),
    )


def _sample_subjects(rng: np.random.Generator, mode: str, tier: str, frames: int, H: int, W: int) -> list:
    """Draw subject specs with guaranteed containment and disjoint paths."""
    if mode == MODE_MULTI:
        n = int(rng.integers(2, 4))
        size_lo, size_hi = 3.5, 4.5
    else:
        n = 1
        size_lo, size_hi = (4.0, 5.5) if tier == CORE_TIER else (3.5, 5.5)
    speed_hi = 1.0 if tier == CORE_TIER else 2.0
    colors = list(rng.choice(len(COLOR_WORDS), size=n, replace=False))

    specs = []
    for i in range(n):
        shape = SHAPE_WORDS[int(rng.integers(len(SHAPE_WORDS)))]
        color = COLOR_WORDS[int(colors[i])]
        size = float(rng.uniform(size_lo, size_hi))
        proto = SubjectSpec(shape, color, size, (0.0, 0.0), (H / 2.0, W / 2.0))
        margin = proto.extent + 1.5
        if rng.random() < 0.08:
            motion = (0.0, 0.0)
        else:
            word = list(DIRECTION_VECTORS)[int(rng.integers(8))]
            ux, uy = DIRECTION_VECTORS[word]
            cap_x = (W - 2.0 * margin - 0.5) / ((frames - 1) * abs(ux)) if ux else math.inf
            cap_y = (H - 2.0 * margin - 0.5) / ((frames - 1) * abs(uy)) if uy else math.inf
            speed = min(float(rng.uniform(0.5, speed_hi)), 0.95 * min(cap_x, cap_y))
            motion = (ux * speed, uy * speed)
        total = ((frames - 1) * motion[0], (frames - 1) * motion[1])
        for _ in range(400):
            x0 = float(rng.uniform(margin + max(0.0, -total[0]), W - margin - max(0.0, total[0])))
            y0 = float(rng.uniform(margin + max(0.0, -total[1]), H - margin - max(0.0, total[1])))
            cand = replace(proto, motion=motion, start=(x0, y0))
            if _paths_disjoint(cand, specs, frames):
                specs.append(cand)
                break
        else:
            # Placement failed (crowded frame): fall back to what we have.
            break
    if not specs:
        raise CorpusError("could not place any subject; frame too small for requested sizes")
    return specs


def _paths_disjoint(cand: SubjectSpec, placed: Sequence[SubjectSpec], frames: int) -> bool:
    for other in placed:
        min_gap = cand.extent + other.extent + 1.5
        for f in range(frames):
            ax, ay = cand.center_at(f)
            bx, by = other.center_at(f)
            if math.hypot(ax - bx, ay - by) < min_gap:
                return False
    return True


def materialize_sample(manifest: CorpusManifest, record: ManifestRecord, vocab: Optional[Vocab] = None) -> TrainingSample:
    """Regenerate one sample deterministically from its manifest record."""
    vocab = vocab or build_vocab()
    rng = np.random.default_rng(record.seed)
    H = W = manifest.image_size
    specs = _sample_subjects(rng, record.mode, record.tier, manifest.frames, H, W)
    lie_colors = None
    if record.mode == MODE_CONFLICT:
        lie_colors = {}
        for i, spec in enumerate(specs):
            others = [c for c in COLOR_WORDS if c != spec.color]
            lie_colors[i] = others[int(rng.integers(len(others)))]
    video = render_clip(specs, manifest.frames, H, W, rng)
    refs = make_references(specs, manifest.ref_size, rng, augment=True)
    prompt = make_prompt(specs, manifest.frames, vocab, lie_colors)
    return TrainingSample(
        video=video,
        prompt_tokens=prompt,
        ref_images=refs,
        subjects=specs,
        quality_tier=record.tier,
        mode=record.mode,
    )


class Corpus:
    """Lazy view over a manifest: samples regenerate on access."""

    def __init__(self, manifest: CorpusManifest, vocab: Optional[Vocab] = None):
        self.manifest = manifest
        self.vocab = vocab or build_vocab()

    def __len__(self) -> int:
        return len(self.manifest.records)

    def __getitem__(self, index: int) -> TrainingSample:
        return materialize_sample(self.manifest, self.manifest.records[index], self.vocab)

    def __iter__(self) -> Iterator[TrainingSample]:
        for record in self.manifest.records:
            yield materialize_sample(self.manifest, record, self.vocab)


def _record_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((master_seed, index)).generate_state(1, np.uint64)[0])


def _record_k(manifest_frames: int, seed: int, mode: str, tier: str, image_size: int) -> int:
    rng = np.random.default_rng(seed)
    specs = _sample_subjects(rng, mode, tier, manifest_frames, image_size, image_size)
    return len(specs)


def build_corpus(
    n_core: int,
    n_full: int,
    modes: Sequence[str] = (MODE_SINGLE, MODE_MULTI),
    seed: int = 0,
    frames: int = 8,
    image_size: int = 32,
    ref_size: int = 32,
    multi_fraction: float = 0.4,
) -> Corpus:
    """Training corpus: ``n_core`` simple samples plus ``n_full`` varied ones.

    Core-tier samples are always single-subject and slow; the full tier
    mixes the requested modes. Conflict samples are refused here; they
    exist only in evaluation sets.
    """
    if n_core > n_full:
        raise CorpusError(f"core tier ({n_core}) cannot be larger than the full tier ({n_full})")
    if MODE_CONFLICT in modes:
        raise CorpusError("conflict samples are evaluation-only; build them with build_eval_set")
    for mode in modes:
        if mode not in (MODE_SINGLE, MODE_MULTI):
            raise CorpusError(f"unknown corpus mode {mode!r}")

    records = []
    index = 0
    for _ in range(n_core):
        s = _record_seed(seed, index)
        records.append(ManifestRecord(index, CORE_TIER, s, 1, MODE_SINGLE))
        index += 1
    mode_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    for _ in range(n_full):
        s = _record_seed(seed, index)
        if MODE_MULTI in modes and MODE_SINGLE in modes:
            mode = MODE_MULTI if mode_rng.random() < multi_fraction else MODE_SINGLE
        else:
            mode = modes[0]
        k = 1 if mode == MODE_SINGLE else _record_k(frames, s, mode, FULL_TIER, image_size)
        records.append(ManifestRecord(index, FULL_TIER, s, k, mode))
        index += 1
    manifest = CorpusManifest(frames, image_size, ref_size, tuple(records))
    return Corpus(manifest)


def build_eval_set(
    n_per_category: int = 10,
    seed: int = 1000,
    frames: int = 8,
    image_size: int = 32,
    ref_size: int = 32,
) -> Corpus:
    """Held-out evaluation set with single, multi, and conflict categories."""
    records = []
    index = 0
    for mode in (MODE_SINGLE, MODE_MULTI, MODE_CONFLICT):
        for _ in range(n_per_category):
            s = _record_seed(seed, index)
            tier = FULL_TIER
            k = 1 if mode != MODE_MULTI else _record_k(frames, s, mode, tier, image_size)
            records.append(ManifestRecord(index, tier, s, k, mode))
            index += 1
    manifest = CorpusManifest(frames, image_size, ref_size, tuple(records))
    return Corpus(manifest)
