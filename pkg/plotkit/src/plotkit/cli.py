"""plotkit <figure-kind> --csv <path> --out <path> [--x-scale ...] [--y-scale ...]"""

from __future__ import annotations

import argparse
import sys

from .render import FIGURE_KINDS, FigureSpec, NoDataError, SchemaError, render


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plotkit", description="Render experiment CSVs into comparison figures."
    )
    parser.add_argument("kind", choices=sorted(FIGURE_KINDS), help="figure kind")
    parser.add_argument("--csv", required=True, help="input CSV in the experiment schema")
    parser.add_argument("--out", required=True, help="output image path (.svg recommended)")
    parser.add_argument("--x-scale", default="linear", choices=("linear", "log"))
    parser.add_argument("--y-scale", default="linear", choices=("linear", "log"))
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    spec = FigureSpec(csv_path=args.csv, kind=args.kind, out_path=args.out,
                      x_scale=args.x_scale, y_scale=args.y_scale)
    try:
        result = render(spec)
    except (SchemaError, NoDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {result.out_path}: {result.n_series} series, "
          f"{result.n_asymptotes} reference lines")
    return 0


if __name__ == "__main__":
    sys.exit(main())
