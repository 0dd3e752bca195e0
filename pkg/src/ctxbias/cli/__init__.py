"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..core import LoadError, SchemaError
from ..detector import ConfigError as DetectorConfigError, HookError, TrainingError
from ..interventions import ConfigError as InterventionConfigError
from . import commands
from .config import ConfigError, PrerequisiteError, load_config, parse_bins
from .report import build_report

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = {
    "synth": commands.cmd_synth,
    "train": commands.cmd_train,
    "eval": commands.cmd_eval,
    "q1-image": commands.cmd_q1_image,
    "q1-feature": commands.cmd_q1_feature,
    "q2-cam": commands.cmd_q2_cam,
    "q3-gradient": commands.cmd_q3_gradient,
    "q3-crossdomain": commands.cmd_q3_crossdomain,
    "report": None,
}

log = logging.getLogger("ctxbias")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxbias", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--output-dir", help="override output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--layer", help="feature-space ablation layer (q1-feature)")
    p.add_argument("--bins", help="CAM bins, e.g. 1,3,5 or 1-9 (q2-cam)")
    p.add_argument("--select-by-domain", help="domain whose eval set picks the checkpoint")
    p.add_argument("--force-test", choices=("wilcoxon", "ttest"),
                   help="skip the normality gate in Q3 case labelling")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def overrides_from(args) -> dict:
    o: dict = {}
    if args.output_dir:
        o["output_dir"] = args.output_dir
    for key in ("seed", "jobs", "alpha"):
        if getattr(args, key) is not None:
            o[key] = getattr(args, key)
    if args.layer:
        o.setdefault("q1_feature", {})["layer"] = args.layer
    if args.bins:
        o.setdefault("q2_cam", {})["bins"] = parse_bins(args.bins)
    if args.select_by_domain:
        o.setdefault("train", {})["select_by_domain"] = args.select_by_domain
    if args.force_test:
        o.setdefault("q3", {})["force_test"] = args.force_test
    return o


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, overrides_from(args))
        if args.command == "report":
            build_report(cfg.out)
        else:
            COMMANDS[args.command](cfg)
    except (ConfigError, DetectorConfigError, InterventionConfigError, SchemaError,
            HookError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (PrerequisiteError, LoadError) as exc:
        log.error("missing prerequisite: %s", exc)
        return EXIT_PREREQ
    except (commands.NumericError, TrainingError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    log.info("%s finished; outputs in %s", args.command, cfg.out)
    return EXIT_OK


def main() -> None:
    sys.exit(run())
