"""fdcr-plot --kind <k> --in <csv> [--in <csv> ...] --out <img>"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, FigureSpec, RenderError, render


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="fdcr-plot", description=__doc__)
    ap.add_argument("--kind", required=True, choices=KINDS)
    ap.add_argument("--in", dest="inputs", action="append", required=True,
                    help="input CSV (repeatable)")
    ap.add_argument("--out", required=True, help="output image (.svg or .pdf)")
    ap.add_argument("--x", default="", help="x-axis column override")
    ap.add_argument("--title", default="")
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        spec = FigureSpec(inputs=args.inputs, kind=args.kind, out_path=args.out,
                          x_key=args.x, title=args.title)
        path = render(spec)
    except RenderError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
