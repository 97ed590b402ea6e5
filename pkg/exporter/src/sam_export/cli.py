"""Command line for the proposal exporter: export and verify."""

from __future__ import annotations

import argparse
import sys

from .export import SamPredictor, SyntheticPredictor, export_proposals
from .manifest import SetupError, verify_manifest


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sam-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="export proposal manifests for a directory of PNGs")
    p_export.add_argument("--images", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--grid", type=int, default=8, help="prompt points per side")
    p_export.add_argument("--predictor", choices=("sam", "synthetic"), default="sam")
    p_export.add_argument("--checkpoint", default=None, help="model weights (sam predictor)")
    p_export.add_argument("--model-type", default="vit_b")

    p_verify = sub.add_parser("verify", help="validate manifest files")
    p_verify.add_argument("paths", nargs="+")
    return parser


def cmd_export(args) -> int:
    if args.predictor == "sam":
        if not args.checkpoint:
            raise SetupError("the sam predictor needs --checkpoint WEIGHTS")
        predictor = SamPredictor(args.checkpoint, model_type=args.model_type)
    else:
        predictor = SyntheticPredictor()
    summary = export_proposals(args.images, args.out, predictor, grid_size=args.grid)
    for path, reason in summary.failures:
        print(f"warning: skipped {path.name}: {reason}", file=sys.stderr)
    print(f"exported {len(summary.manifests)} manifests to {args.out}")
    return 1 if summary.failures else 0


def cmd_verify(args) -> int:
    bad = 0
    for path in args.paths:
        problems = verify_manifest(path)
        if problems:
            bad += 1
            for problem in problems:
                print(f"{path}: {problem}", file=sys.stderr)
        else:
            print(f"{path}: ok")
    return 1 if bad else 0


def run(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "export":
            return cmd_export(args)
        return cmd_verify(args)
    except (SetupError, OSError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
