"""Command-line front end: data generation, training, sampling, evaluation, checks.

Every subcommand exits 0 on success and 2 on a usage or data error; ``check``
exits 1 when any invariant fails. Checkpoints written by ``train`` carry a
sibling ``<path>.cfg`` run-config file so ``sample`` and ``eval`` can rebuild
the exact model without repeating flags.
"""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import checks, evaluation, flow, synthdata, tensorio, training
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_hash, parse_config, serialize_config
from .encoders import EncoderError, ReferenceImage
from .evaluation import EvalError
from .synthdata import CorpusError
from .vocab import VocabError


class CliError(ValueError):
    """User-facing failure: bad arguments, missing files, malformed inputs."""


# --- shared loading helpers ----------------------------------------------------


def _load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")


def _load_model(checkpoint_path: str, config_path: Optional[str]):
    """Rebuild ModelParts from a checkpoint plus its run config."""
    if config_path is None:
        config_path = checkpoint_path + ".cfg"
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            config = parse_config(fh.read())
    except FileNotFoundError:
        raise CliError(
            f"no run config at {config_path}; pass --config pointing at the file "
            "saved alongside the checkpoint"
        )
    ck = load_checkpoint(checkpoint_path, expected_hash=config_hash(config))
    parts = training.build_model(config)
    training.load_into(parts, ck)
    return parts, ck


def _load_reference(path: str, ref_size: int) -> ReferenceImage:
    if path.endswith(".ppm"):
        pixels = tensorio.read_ppm(path)
    else:
        pixels = tensorio.read_tensor(path)
    if pixels.shape != (3, ref_size, ref_size):
        raise CliError(
            f"reference {path} has shape {pixels.shape}, expected (3, {ref_size}, {ref_size})"
        )
    return ReferenceImage(pixels=np.clip(pixels, 0.0, 1.0), subject_id=path)


def _auto_references(parts, prompt_tokens: Sequence[int]) -> List[ReferenceImage]:
    """Render one clean reference per prompt subject when none are supplied."""
    subjects = evaluation.parse_prompt(prompt_tokens, parts.vocab)
    ref_size = parts.run.ref_size
    refs = []
    for subject in subjects:
        spec = synthdata.SubjectSpec(
            shape=subject["shape"],
            color=subject["color"],
            size=ref_size * 0.15,
            motion=(0.0, 0.0),
            start=(ref_size / 2.0, ref_size / 2.0),
        )
        pixels = synthdata.render_reference_image(spec, ref_size)
        refs.append(ReferenceImage(pixels=pixels, subject_id=spec.subject_id))
    return refs


def _write_video(prefix: str, video: np.ndarray) -> List[str]:
    written = [prefix + ".video"]
    tensorio.write_tensor(written[0], video)
    for k, frame in enumerate(video):
        path = f"{prefix}_f{k}.ppm"
        tensorio.write_ppm(path, frame)
        written.append(path)
    return written


# --- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.eval_per_category is not None:
        corpus = synthdata.build_eval_set(
            n_per_category=args.eval_per_category,
            seed=args.seed,
            frames=args.frames,
            image_size=args.image_size,
            ref_size=args.ref_size,
        )
    else:
        corpus = synthdata.build_corpus(
            args.core,
            args.full,
            seed=args.seed,
            frames=args.frames,
            image_size=args.image_size,
            ref_size=args.ref_size,
        )
    synthdata.save_manifest(corpus.manifest, args.out)
    kinds = {}
    for record in corpus.manifest.records:
        kinds[record.mode] = kinds.get(record.mode, 0) + 1
    counts = ", ".join(f"{n} {mode}" for mode, n in sorted(kinds.items()))
    print(f"wrote {args.out}: {len(corpus)} records ({counts})")

    for index in range(min(args.dump, len(corpus))):
        sample = corpus[index]
        prefix = f"{args.out}.preview{index}"
        written = _write_video(prefix, sample.video)
        for j, ref in enumerate(sample.ref_images):
            path = f"{prefix}_ref{j}.ppm"
            tensorio.write_ppm(path, ref.pixels)
            written.append(path)
        prompt = corpus.vocab.decode(sample.prompt_tokens)
        print(f"preview {index} ({sample.mode}): \"{prompt}\" -> {len(written)} files")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    manifest_path = args.corpus or config.corpus_manifest
    try:
        manifest = synthdata.load_manifest(manifest_path)
    except FileNotFoundError:
        raise CliError(
            f"corpus manifest not found: {manifest_path}; generate one with gen-data "
            "or point --corpus at an existing manifest"
        )
    corpus = synthdata.Corpus(manifest)

    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, expected_hash=config_hash(config))
        print(f"resuming from {args.resume} at iteration {resume.iteration}")

    def on_log(iteration, stage, loss, seconds):
        if iteration % args.log_every == 0:
            print(f"iter {iteration} stage {stage} loss {loss:.6f} ({seconds:.2f}s)")

    result = training.train(
        config,
        corpus,
        resume=resume,
        on_log=on_log,
        nan_snapshot_path=args.out + ".diverged",
        stop_after=args.stop_after,
    )
    save_checkpoint(result.checkpoint, args.out)
    with open(args.out + ".cfg", "w", encoding="utf-8") as fh:
        fh.write(serialize_config(config))
    last = result.losses[-1] if result.losses else None
    tail = f", last loss {last[2]:.6f}" if last else ""
    print(
        f"saved {args.out} (+.cfg) at iteration {result.checkpoint.iteration}"
        f" stage {result.checkpoint.stage}{tail}"
    )
    return 0


def cmd_sample(args) -> int:
    parts, _ = _load_model(args.checkpoint, args.config)
    try:
        prompt_tokens = parts.vocab.encode(args.prompt)
    except VocabError:
        known = " ".join(parts.vocab.words)
        raise CliError(f"prompt uses words outside the vocabulary: {known}")

    if args.refs:
        refs = [_load_reference(p, parts.run.ref_size) for p in args.refs]
    else:
        refs = _auto_references(parts, prompt_tokens)
        print(f"rendered {len(refs)} reference image(s) from the prompt")

    sampler = parts.run.sampler_config(steps=args.steps, scale=args.cfg_scale)
    rng = np.random.default_rng(args.seed)
    video = evaluation.generate(
        parts, prompt_tokens, refs, sampler, rng, null_conditioning=args.unconditional
    )
    written = _write_video(args.out, video)
    print(f"wrote {written[0]} and {len(written) - 1} frame(s): {written[1]} ...")
    return 0


def cmd_eval(args) -> int:
    parts, _ = _load_model(args.checkpoint, args.config)
    try:
        manifest = synthdata.load_manifest(args.eval_set)
    except FileNotFoundError:
        raise CliError(f"eval manifest not found: {args.eval_set}")
    corpus = synthdata.Corpus(manifest, vocab=parts.vocab)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    sampler = parts.run.sampler_config(steps=args.steps, scale=args.cfg_scale)
    report = evaluation.evaluate(
        parts, corpus, seeds=seeds, sampler=sampler, null_conditioning=args.unconditional
    )
    text = evaluation.serialize_report(report)
    sys.stdout.write(text)
    if args.report:
        evaluation.save_report(report, args.report)
        print(f"wrote {args.report}")
    return 0


def cmd_check(args) -> int:
    del args
    return checks.main()


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapeflow",
        description="Subject-conditioned video generation on a synthetic moving-shapes corpus.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a corpus manifest (and optional previews)")
    p.add_argument("--out", default="corpus.manifest", help="manifest path to write")
    p.add_argument("--core", type=int, default=256, help="core-tier sample count")
    p.add_argument("--full", type=int, default=768, help="full-tier sample count")
    p.add_argument(
        "--eval-per-category",
        type=int,
        default=None,
        metavar="N",
        help="build a held-out eval set with N samples per category instead",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--ref-size", type=int, default=32)
    p.add_argument("--dump", type=int, default=0, metavar="N", help="write previews for the first N records")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the two-stage curriculum and save a checkpoint")
    p.add_argument("--config", default=None, help="run-config file (defaults to built-in settings)")
    p.add_argument("--corpus", default=None, help="manifest path (defaults to the config's corpus_manifest)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", default="run.ckpt", help="checkpoint path to write")
    p.add_argument("--stop-after", type=int, default=None, metavar="N", help="halt after iteration N")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate one video from a prompt and references")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None, help="run-config file (defaults to <checkpoint>.cfg)")
    p.add_argument("--prompt", required=True, help='e.g. "red circle moves right"')
    p.add_argument(
        "--refs",
        nargs="*",
        default=None,
        metavar="IMG",
        help="reference images (.ppm or tensor files); rendered from the prompt when omitted",
    )
    p.add_argument("--steps", type=int, default=None, help="sampler steps (default from config)")
    p.add_argument("--cfg-scale", type=float, default=None, help="guidance scale (default from config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="sample", help="output prefix for .video and frame files")
    p.add_argument("--unconditional", action="store_true", help="sample from the null conditioning")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint on an eval manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None, help="run-config file (defaults to <checkpoint>.cfg)")
    p.add_argument("--eval-set", required=True, help="manifest from gen-data --eval-per-category")
    p.add_argument("--report", default=None, help="write the report here as well as stdout")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated noise seeds")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--unconditional", action="store_true", help="score null-conditioned generation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run the invariant and gradient suite")
    p.set_defaults(func=cmd_check)

    return parser


_USER_ERRORS = (
    CliError,
    ConfigError,
    CheckpointError,
    CorpusError,
    EncoderError,
    EvalError,
    VocabError,
    flow.FlowError,
    training.TrainingError,
    tensorio.ContainerError,
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
