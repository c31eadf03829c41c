"""Command line entry point: featexport export --manifest manifest.json"""

from __future__ import annotations

import argparse
import sys

from .export import ManifestError, export, load_manifest


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="featexport")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("export", help="export a dataset described by a manifest")
    run.add_argument("--manifest", required=True, help="path to the manifest JSON")
    args = parser.parse_args(argv)

    if args.command == "export":
        try:
            manifest = load_manifest(args.manifest)
            summary = export(manifest)
        except ManifestError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"exported {summary.exported} images, skipped {len(summary.skipped)}")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
