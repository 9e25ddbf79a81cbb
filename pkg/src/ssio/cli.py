"""Command-line entry point: ``ssio <subcommand> --config CFG --out DIR``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bundle import export_bundle
from .config import ConfigError, load_config
from .pipeline import STAGES, MissingArtifactError, NoGroundTruthError, load_or_simulate, run_pipeline, save_config
from .sim import simulate

log = logging.getLogger("ssio")

COMMANDS = ("simulate",) + STAGES + ("pipeline",)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssio", description="Self-supervised inertial odometry with LiDAR pseudo-labels")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="working directory for artifacts")
        p.add_argument("--seed", type=int, help="override the configured seed")
        if name != "simulate":
            p.add_argument("--bundle", help="sequence bundle directory (default: OUT/bundle, simulated if absent)")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("SSIO_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.reseed(args.seed)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            export_bundle(simulate(cfg.sim), out / "bundle")
            save_config(cfg, out / "config.json")
            return 0
        bundle = load_or_simulate(cfg, out, args.bundle)
        stages = STAGES if args.command == "pipeline" else (args.command,)
        report = run_pipeline(bundle, cfg, stages, out)
        save_config(cfg, out / "config.json")
        if report is not None:
            print(json.dumps(report, indent=1, sort_keys=True))
        return 0
    except NoGroundTruthError as exc:
        print(json.dumps({"result": str(exc)}))
        return 3
    except (ConfigError, MissingArtifactError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
