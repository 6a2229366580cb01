"""Command-line entry point: ``kneurons <command> [--config C] [--seed S] ...``.

Each command recomputes the stages it depends on in-process (every stage is
deterministic given the config and seed), writes its own artifacts under
``--out`` and refreshes the run manifest.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .pipeline import METHODS, ConfigError, Run, RunConfig, StageError, caption_accuracy
from .perturb import read_results_csv

log = logging.getLogger("kneurons")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="smoke", help="JSON run config (or a bundled config name)")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--jobs", type=int, default=None, help="worker threads for perturbation")
    p.add_argument("--method", action="append", choices=METHODS, default=None,
                   help="restrict to this method (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kneurons", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="knowledge corpus")
    csub = corpus.add_subparsers(dest="action", required=True)
    _common(csub.add_parser("build", help="render candidate scenes and their inpainted twins"))

    model = sub.add_parser("model", help="reference model")
    msub = model.add_subparsers(dest="action", required=True)
    train = msub.add_parser("train", help="train with the config's recipe and save a checkpoint")
    _common(train)
    train.add_argument("--checkpoint", default=None, help="where to save (default OUT/model.npz)")
    _common(msub.add_parser("load", help="load the configured checkpoint and report accuracy"))

    for name, text in [("validate", "caption candidates and apply the admissibility rules"),
                       ("identify", "find knowledge neurons and baseline sets"),
                       ("perturb", "run the noise-perturbation captioning experiment"),
                       ("report", "score tables and caption metrics"),
                       ("run", "all stages end to end")]:
        _common(sub.add_parser(name, help=text))
    return ap


def _run_command(args) -> int:
    cfg = RunConfig.load(args.config).with_overrides(args.seed, args.out, args.jobs, args.method)
    run = Run(cfg)
    cmd = args.command if not hasattr(args, "action") else f"{args.command} {args.action}"
    if args.command == "corpus":
        run.write_candidates()
    elif args.command == "model":
        if args.action == "train":
            path = Path(args.checkpoint) if args.checkpoint else run.out / "model.npz"
            run.train_model(path)
            log.info("saved checkpoint to %s", path)
        acc = caption_accuracy(run.model)
        log.info("held-out caption accuracy %.3f", acc)
        print(f"caption_accuracy {acc:.4f}")
    elif args.command == "validate":
        run.write_corpus()
    elif args.command == "identify":
        run.write_identification()
    elif args.command == "perturb":
        run.write_results()
    elif args.command == "report":
        existing = run.out / "perturb" / "results.csv"
        if existing.exists():
            run._results = read_results_csv(existing)
        run.write_reports()
    else:
        run.write_candidates()
        run.write_corpus()
        run.write_identification()
        run.write_results()
        run.write_reports()
    path = run.write_manifest(cmd)
    log.info("manifest written to %s", path)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NP_LOG", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _run_command(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StageError, ValueError, OSError) as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
