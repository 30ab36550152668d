"""Command line entry point: ``pose-extract annotate <frame_dir>``."""

import argparse
import sys
from pathlib import Path

from .annotate import annotate_directory


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pose-extract",
        description="Annotate frame directories with face and head-pose data")
    sub = parser.add_subparsers(dest="command", required=True)

    annotate = sub.add_parser(
        "annotate", help="write a poses.json for a directory of frames")
    annotate.add_argument("frame_dir", type=Path)
    annotate.add_argument("--out", type=Path, default=None,
                          help="output file (default: <frame_dir>/poses.json)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out_path = annotate_directory(args.frame_dir, args.out)
    except NotADirectoryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out_path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
