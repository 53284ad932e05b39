"""Command-line entry point: one subcommand per pipeline stage, plus `synth` and `all`.

Exit codes: 0 success, 1 numeric failure, 2 input/schema failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import AnnotationError, InputError
from .pipeline import STAGES, PipelineConfig, run_all, run_stage

log = logging.getLogger("hoannot")


def _int_env(name, default):
    raw = os.environ.get(name)
    return int(raw) if raw not in (None, "") else default


def build_parser():
    p = argparse.ArgumentParser(prog="hoannot", description="Hand-object pose annotation pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=_int_env("HOANNOT_SEED", 0), help="global random seed")
    p.add_argument("--jobs", type=int, default=_int_env("HOANNOT_JOBS", 1), help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage in order")
        s.add_argument("config", help="pipeline config JSON (paths relative to its directory)")
        s.add_argument("--output", help="override paths.output")
    s = sub.add_parser("synth", help="generate a synthetic capture with ground truth")
    s.add_argument("out", help="output directory")
    s.add_argument("--spec", help="scene spec JSON (defaults are used for missing fields)")
    s.add_argument("--clean", action="store_true", help="write noise-free observations")
    return p


def _config(args):
    cfg = PipelineConfig.load(args.config)
    if args.output:
        cfg.data["paths"]["output"] = args.output
    return cfg


def _synth(args):
    import json

    from .synth import SceneSpec, generate, write_inputs

    data = {}
    if args.spec:
        path = Path(args.spec)
        if not path.exists():
            from .errors import MissingInput
            raise MissingInput(f"scene spec not found: {path}")
        data = json.loads(path.read_text())
    data.setdefault("seed", args.seed)
    bundle = generate(SceneSpec(data))
    write_inputs(bundle, args.out, clean=args.clean)
    print(Path(args.out) / "config.json")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.command == "synth":
            _synth(args)
        elif args.command == "all":
            for m in run_all(_config(args), args.seed, args.jobs):
                log.info("wrote %s", m)
        else:
            for m in run_stage(args.command, _config(args), args.seed, args.jobs):
                log.info("wrote %s", m)
    except AnnotationError as exc:
        kind = "input error" if isinstance(exc, InputError) else "numeric error"
        print(f"{kind}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
