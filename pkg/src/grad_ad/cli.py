"""Command line entry point: ``grad-ad <subcommand> [flags]``.

Failures exit non-zero and print one JSON line to stderr:
``{"error": "<code>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config, pipeline
from .data import DatasetError

SUBCOMMANDS = ("synth-data", "train-generator", "sample", "train-detector", "detect", "evaluate",
               "reweight-dump", "probe-rf")


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code, self.status = code, status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", status=2)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run config (overrides the profile defaults)")
    p.add_argument("--category", help="dataset category name")
    p.add_argument("--profile", choices=config.PROFILES, help="budget profile")
    p.add_argument("--out", type=Path, default=Path("out"), help="output root")
    p.add_argument("--data-root", type=Path, default=None,
                   help="dataset root (default: $GRAD_DATA_ROOT)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--device", default="auto", choices=("auto", "cpu", "cuda"))
    p.add_argument("--force", action="store_true", help="ignore config-hash mismatches")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grad-ad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name in ("train-generator", "sample", "probe-rf"):
            p.add_argument("--level", type=int, action="append",
                           help="PatchDiff level (repeatable; default: all configured)")
        if name in ("train-detector", "reweight-dump", "probe-rf"):
            p.add_argument("--detector-level", type=int, action="append", choices=(34, 68, 136),
                           help="detector level (repeatable)")
        if name == "train-detector":
            p.add_argument("--dump-weights", action="store_true",
                           help="write per-step reweighting factors as CSV")
        if name == "detect":
            p.add_argument("--heatmaps", action="store_true", help="also export heatmap PNGs")
        if name == "reweight-dump":
            p.add_argument("--steps", type=int, default=8)
    return parser


def _resolve(args) -> config.RunConfig:
    try:
        return config.load(args.config, category=args.category, profile=args.profile, seed=args.seed)
    except (OSError, config.ConfigError) as exc:
        raise CliError("bad_config", str(exc)) from exc


def _data_root(args, required: bool = True) -> Path | None:
    root = args.data_root or os.environ.get("GRAD_DATA_ROOT")
    if root is None and required:
        raise CliError("missing_data_root", "no dataset root: pass --data-root or set GRAD_DATA_ROOT")
    return Path(root) if root else None


def _probe_rf(args, cfg) -> int:
    import torch

    from . import detector, patchdiff
    from .receptive import ReceptiveFieldError

    torch.manual_seed(cfg.seed)
    ok = True
    if not args.detector_level or args.level:
        for level in args.level or cfg.generator.levels:
            rep = patchdiff.receptive_field_probe(patchdiff.Denoiser(level, cfg.generator.width), strict=False)
            print(f"patchdiff level-{level}: measured RF {rep.measured} ({'ok' if rep.passed else 'FAIL'})")
            ok &= rep.passed
    if args.detector_level:
        rep = detector.receptive_field_probe(detector.PatchDetector(), strict=False)
        print(f"detector: measured RF {rep.measured} at stride 4 ({'ok' if rep.passed else 'FAIL'})")
        ok &= rep.passed
    if not ok:
        raise ReceptiveFieldError("measured receptive field differs from the configured level")
    return 0


def run(args) -> int:
    cfg = _resolve(args)
    device = pipeline.resolve_device(args.device)
    cmd = args.command
    if cmd == "probe-rf":
        return _probe_rf(args, cfg)
    if cmd == "synth-data":
        from .synth import synth_generate

        root = _data_root(args, required=False) or args.out
        path = synth_generate(cfg.synth, root, cfg.category, rng=config.numpy_stream(cfg.seed, "synth-data"))
        print(path)
        return 0
    pipeline.write_config(cfg, args.out)
    if cmd == "train-generator":
        for p in pipeline.train_generators(cfg, _data_root(args), args.out, args.level, device):
            print(p)
    elif cmd == "sample":
        for p in pipeline.sample_generators(cfg, args.out, args.level, device, args.force).values():
            print(p)
    elif cmd == "train-detector":
        for p in pipeline.train_detectors(cfg, _data_root(args), args.out, args.detector_level, device,
                                          args.dump_weights):
            print(p)
    elif cmd == "detect":
        print(pipeline.detect(cfg, _data_root(args), args.out, device, args.force, args.heatmaps))
    elif cmd == "evaluate":
        print(json.dumps(pipeline.evaluate(cfg, args.out, args.force), indent=2))
    elif cmd == "reweight-dump":
        for level in args.detector_level or cfg.detector.levels:
            print(pipeline.reweight_dump(cfg, _data_root(args), args.out, level, args.steps, device,
                                         args.force))
    return 0


def cli_dispatch(argv: list[str] | None = None) -> int:
    from .receptive import ReceptiveFieldError

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return run(args)
    except CliError as exc:
        code, msg, status = exc.code, str(exc), exc.status
    except pipeline.StageError as exc:
        code, msg, status = exc.code, str(exc), 1
    except DatasetError as exc:
        code, msg, status = "missing_dataset", str(exc), 1
    except ReceptiveFieldError as exc:
        code, msg, status = "receptive_field", str(exc), 1
    except FloatingPointError as exc:
        code, msg, status = "divergence", str(exc), 1
    print(json.dumps({"error": code, "message": msg}), file=sys.stderr)
    return status


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
