"""Command-line wrappers around the three renderers.

Exit codes: 0 success, 1 usage, 2 bad input data.
"""

from __future__ import annotations

import argparse
import sys

from .formats import FormatError, load_importance
from .render import render_allocation, render_budget_curve, render_heatmap


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _cmd_heatmap(args) -> int:
    if args.layers is None:
        layers = load_importance(args.scores).layers
    else:
        try:
            layers = [int(x) for x in args.layers.split(",") if x.strip()]
        except ValueError as exc:
            raise _UsageError(f"--layers must be comma-separated integers: {exc}")
    out = render_heatmap(args.scores, layers, args.out, global_norm=args.global_norm)
    print(f"wrote {out}")
    return 0


def _cmd_allocation(args) -> int:
    print(f"wrote {render_allocation(args.allocation, args.out)}")
    return 0


def _cmd_budget_curve(args) -> int:
    print(f"wrote {render_budget_curve(args.sweep, args.out, metric=args.metric)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lorashap-plots",
                     description="Render pipeline artifacts as figures.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("heatmap", help="per-layer rank-score heatmap panels")
    p.set_defaults(func=_cmd_heatmap)
    p.add_argument("--scores", required=True, help="importance CSV")
    p.add_argument("--layers", help="comma-separated layer list (default: all)")
    p.add_argument("--global-norm", action="store_true",
                   help="normalize by the global max instead of per module")
    p.add_argument("--out", required=True, help="output image path")

    p = sub.add_parser("allocation", help="grouped kept-ranks bar chart")
    p.set_defaults(func=_cmd_allocation)
    p.add_argument("--allocation", required=True, help="allocation document")
    p.add_argument("--out", required=True)

    p = sub.add_parser("budget-curve", help="loss vs kept-rank budget, per method")
    p.set_defaults(func=_cmd_budget_curve)
    p.add_argument("--sweep", required=True, help="sweep summary CSV")
    p.add_argument("--metric", default="dev_loss",
                   choices=["dev_loss", "test_loss"])
    p.add_argument("--out", required=True)
    return parser


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
