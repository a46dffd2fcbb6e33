"""The ``extract`` command."""

from __future__ import annotations

import argparse
import sys

from .extract import extract
from .spec import ExtractionSpec, ExtractorError


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extract",
        description="Record a .kvtr attention trace from a decoder-only model "
                    "during greedy decoding.",
    )
    parser.add_argument("--model", required=True,
                        help="model identifier or local checkpoint directory")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--prompt", help="prompt text")
    source.add_argument("--prompt-file", help="file containing the prompt text")
    parser.add_argument("--steps", type=int, default=64,
                        help="decode steps to record (default 64)")
    parser.add_argument("--max-context", type=int, default=None,
                        help="keep at most this many leading prompt tokens")
    parser.add_argument("--layers", type=_int_list, default=None,
                        help="comma-separated layer subset (default: all)")
    parser.add_argument("--heads", type=_int_list, default=None,
                        help="comma-separated query-head subset (default: all)")
    parser.add_argument("--values", action="store_true",
                        help="also record value vectors")
    parser.add_argument("--out", "-o", required=True, help="output .kvtr path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ExtractionSpec(
            model=args.model,
            prompt=args.prompt,
            prompt_file=args.prompt_file,
            steps=args.steps,
            max_context=args.max_context,
            layers=args.layers,
            heads=args.heads,
            include_values=args.values,
            out=args.out,
        )
        path = extract(spec)
    except (ExtractorError, ValueError, OSError) as exc:
        print(f"extract: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
