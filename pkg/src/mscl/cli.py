"""Command-line entry points: synth, segment, train, generate, evaluate, gradcheck.

Every command exits 0 on success. Failures print a single line of the form
``error[ClassName]: message`` to stderr and exit nonzero, so callers can
dispatch on the error class without parsing prose.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as datamod
from . import gradcheck as gc
from . import metrics as metricsmod
from . import training
from .config import RunConfig, parse_config
from .data import SynthSpec, detokenize, tokenize
from .errors import CompatibilityError, ConfigError, MsclError
from .segmenter import (
    SegmenterConfig,
    load_gray_png,
    save_gray_png,
    segment_with_proposals,
    write_proposal_manifest,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--count", type=int, default=200)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--rate", type=float, default=0.35, help="abnormality rate")
    p_synth.add_argument("--image-size", type=int, default=64)
    p_synth.add_argument("--distractors", type=int, default=0)
    p_synth.add_argument("--noise", type=float, default=0.02)

    p_seg = sub.add_parser("segment", help="preprocess a directory of PNGs")
    p_seg.add_argument("--images", required=True)
    p_seg.add_argument("--out", required=True)
    p_seg.add_argument("--config", default=None, help="TOML config for the segmenter section")
    p_seg.add_argument("--backend", choices=("builtin", "proposals-dir"), default=None)
    p_seg.add_argument("--proposals", default=None, help="manifest directory for proposals-dir")

    p_train = sub.add_parser("train", help="train on a dataset manifest")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--resume", default=None, help="resume from a last.ckpt")
    p_train.add_argument("--single-view", action="store_true", help="use only the first view")
    p_train.add_argument("--no-cl", action="store_true", help="drop the contrastive term (lambda=1)")
    p_train.add_argument("--no-sam", action="store_true", help="feed raw images, skip segmentation")

    p_gen = sub.add_parser("generate", help="decode reports for a split")
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--config", default=None, help="must match the checkpoint when given")
    p_gen.add_argument("--strategy", choices=("greedy", "beam"), default="greedy")
    p_gen.add_argument("--beam-width", type=int, default=1)

    p_eval = sub.add_parser("evaluate", help="score a generations JSONL file")
    p_eval.add_argument("--generations", required=True)
    p_eval.add_argument("--out", required=True)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook

    return parser


def cmd_synth(args) -> int:
    spec = SynthSpec(
        count=args.count,
        abnormality_rate=args.rate,
        image_size=args.image_size,
        pixel_noise=args.noise,
        distractor_count=args.distractors,
        seed=args.seed,
    )
    studies = datamod.synth_corpus(spec)
    manifest = datamod.save_corpus(studies, args.out)
    print(f"wrote {len(studies)} studies to {manifest}")
    return 0


def cmd_segment(args) -> int:
    if args.config is not None:
        seg_config = parse_config(args.config).segmenter
    else:
        seg_config = SegmenterConfig()
    backend_name = args.backend or "builtin"
    if backend_name == "proposals-dir":
        if not args.proposals:
            raise ConfigError("--backend proposals-dir needs --proposals DIR")
        from .segmenter import ProposalsDirBackend

        backend = ProposalsDirBackend(args.proposals)
    else:
        from .segmenter import ThresholdBackend

        backend = ThresholdBackend()

    image_dir = Path(args.images)
    if not image_dir.is_dir():
        raise ConfigError(f"--images {image_dir} is not a directory")
    out_dir = Path(args.out)
    manifest_dir = out_dir / "proposals"
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_dir.mkdir(parents=True, exist_ok=True)

    failures = 0
    processed = 0
    for path in sorted(image_dir.glob("*.png")):
        try:
            image = load_gray_png(path)
            result, kept = segment_with_proposals(image, backend, seg_config, image_id=path.stem)
            save_gray_png(result, out_dir / path.name)
            write_proposal_manifest(
                manifest_dir / f"{path.stem}.json", path.stem, image.width, image.height, kept
            )
            processed += 1
        except (MsclError, OSError) as exc:
            failures += 1
            print(f"error[{type(exc).__name__}]: {path.name}: {exc}", file=sys.stderr)
    print(f"segmented {processed} images into {out_dir} ({failures} failures)")
    return 1 if failures else 0


def _apply_train_overrides(config: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        config = RunConfig(
            seed=args.seed,
            model=config.model,
            segmenter=config.segmenter,
            training=config.training,
            data=config.data,
        )
    overrides = {}
    if args.single_view:
        overrides["single_view"] = True
    if args.no_cl:
        overrides["no_cl"] = True
    if args.no_sam:
        overrides["no_sam"] = True
    if overrides:
        config = config.replace_training(**overrides)
    return config


def cmd_train(args) -> int:
    config = _apply_train_overrides(parse_config(args.config), args)
    result, _, _, _ = training.train_model(config, resume=args.resume)
    print(
        f"trained {result.epochs_run} epochs; best val BLEU-4 {result.best_val_bleu4:.4f} "
        f"at epoch {result.best_epoch}; checkpoints in {result.last_checkpoint.parent}"
    )
    return 0


def cmd_generate(args) -> int:
    model, vocab, config = training.load_model_for_inference(args.checkpoint)
    if args.config is not None:
        supplied = parse_config(args.config)
        if supplied.as_dict() != config.as_dict():
            raise CompatibilityError(
                "--config does not match the configuration embedded in the checkpoint"
            )
    prepared = training.prepare_data(config)
    studies = prepared.split(args.split)
    records = []
    for ps_id, pair in training.generation_pairs(
        model, vocab, studies, strategy=args.strategy, beam_width=args.beam_width
    ):
        records.append(
            {
                "id": ps_id,
                "candidate": detokenize(list(pair.candidate)),
                "reference": detokenize(list(pair.reference)),
            }
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")
    print(f"wrote {len(records)} generations to {out}")
    return 0


def cmd_evaluate(args) -> int:
    records = metricsmod.read_generations(args.generations)
    pairs = [
        metricsmod.EvalPair.of(tokenize(r["candidate"]), tokenize(r["reference"]))
        for r in records
    ]
    report = metricsmod.evaluate_corpus(pairs)
    metricsmod.write_metric_report(report, args.out)
    for name, value in report.as_dict().items():
        print(f"{name}: {value:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    checks = gc.run_op_suite(seed=args.seed, corrupt_op=args.corrupt)
    checks.append(gc.run_end_to_end_check(seed=args.seed))
    failed = [c for c in checks if not c.passed]
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"{status} {check.name}: max relative error {check.max_rel_err:.3e} (tolerance {check.tolerance:g})")
    print(f"{len(checks) - len(failed)}/{len(checks)} gradient checks passed")
    return 1 if failed else 0


_COMMANDS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (MsclError, OSError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
