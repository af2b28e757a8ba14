"""Command-line entry point: ``ucf <stage> [--config FILE] [--seed N] ...``.

Exit codes: 0 success, 2 validation error, 3 numeric failure,
4 missing prerequisite stage, 1 any other package error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .errors import UCFError

STAGE_HELP = {
    "synth": "generate synthetic training anomalies",
    "encode": "extract feature stacks for templates, synthetic and test images",
    "volume": "build cost volumes and initial maps",
    "train": "train the filtering network",
    "infer": "produce filtered, baseline, fused and smoothed maps",
    "eval": "compute metrics (JSON and CSV)",
    "report": "render figures, heatmaps and KDE curves",
    "sweep-lambda": "evaluate the fusion weight over a grid",
    "all": "run every stage in order",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (see config.resolved.json of any run for the schema)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--jobs", type=int, help="worker thread cap")
    common.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    common.add_argument("--out", help="output directory")
    common.add_argument("--scenario", choices=pipeline.SCENARIOS, help="pipeline scenario")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="ucf", description="Cost-volume filtering for anomaly detection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in STAGE_HELP.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    ab = sub.add_parser("ablate", parents=[common], help="run an ablation and tabulate its variants")
    ab.add_argument("kind", choices=sorted(pipeline.ABLATIONS))
    return parser


def _overrides(args):
    out = {}
    for key in ("seed", "jobs", "out", "scenario"):
        value = getattr(args, key)
        if value is not None:
            out[key] = value
    if args.deterministic:
        out["deterministic"] = True
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = pipeline.resolve_config(args.config, _overrides(args))
        if args.command == "ablate":
            for path in pipeline.run_ablation(cfg, args.kind):
                print(path)
        else:
            pipeline.Pipeline(cfg).run(args.command)
    except UCFError as exc:
        logging.getLogger("ucf").error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
