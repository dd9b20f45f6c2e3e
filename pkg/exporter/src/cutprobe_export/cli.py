"""Command line entry point for the checkpoint exporter."""

import argparse
import sys

from .maps import ARCHITECTURES, ExportError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cutprobe-export",
        description="Export a torchvision checkpoint to a cutprobe weight "
        "container plus a reference-activation fixture.",
    )
    parser.add_argument("--arch", required=True, choices=ARCHITECTURES)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--random-seed",
        type=int,
        default=None,
        help="use torch-side random weights with this seed instead of the "
        "pretrained checkpoint (hermetic test path)",
    )
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1

    from .export import export_weights

    try:
        container, fixture = export_weights(
            args.arch,
            args.out,
            pretrained=args.random_seed is None,
            seed=args.random_seed if args.random_seed is not None else 0,
        )
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"weights: {container}")
    print(f"fixture: {fixture}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
