"""Command-line entry point.

Subcommands either run a prefix of the experiment pipeline (train-ae through
train-classifier), the whole thing (experiment), metrics over two image
directories, or report emission from saved manifests. Failures print one
machine-readable JSON line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, reseed
from .report import REPORT_KINDS, emit_report

# subcommand -> pipeline phases it enables (None = respect the config)
_PHASE_PREFIX = {
    "train-ae": ("autoencoder",),
    "train-diffusion": ("autoencoder", "denoiser"),
    "invert": ("autoencoder", "denoiser", "inversion"),
    "generate": ("autoencoder", "denoiser", "inversion", "generation"),
    "metrics": ("autoencoder", "denoiser", "inversion", "generation", "metrics"),
    "train-classifier": ("autoencoder", "denoiser", "inversion", "generation", "classifier"),
    "experiment": None,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentaug",
        description="augment small image datasets via diffusion-embedding inversion",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--seed", type=int, help="master seed overriding every section seed")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--resume", action="store_true",
                        help="reuse partial per-image progress inside phases")
    common.add_argument("--jobs", type=int, help="torch CPU thread count")

    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train-ae", "train the autoencoder"),
        ("train-diffusion", "pretrain the conditional denoiser"),
        ("invert", "optimize per-image conditioning vectors"),
        ("generate", "sample synthetic variants from inverted embeddings"),
        ("metrics", "distribution metrics (use metrics.real_dir/generated_dir "
                    "in the config for metrics-only mode)"),
        ("train-classifier", "train downstream classifiers on real/synthetic data"),
        ("experiment", "run every phase enabled in the config"),
    ]:
        sub.add_parser(name, parents=[common], help=help_text)

    rep = sub.add_parser("report", parents=[common], help="emit CSV/plots from manifests")
    rep.add_argument("--kind", choices=REPORT_KINDS, required=True)
    rep.add_argument("--plot", action="store_true", help="also write a PNG")
    rep.add_argument("manifests", nargs="+", type=Path, help="run manifest JSON paths")
    return parser


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = reseed(config, args.seed)
    return config


def _run_pipeline(args) -> int:
    from .pipeline import run_experiment  # deferred: keeps --help/report fast

    config = _load_config(args)
    phases = _PHASE_PREFIX[args.command]
    if phases is not None:
        if args.command == "metrics" and config.metrics.real_dir is not None:
            phases = ("metrics",)
        config = config.replace(phases=phases)
    result = run_experiment(config, args.out, jobs=args.jobs)
    manifest = result.manifest
    for p in manifest.phases:
        if p.status in ("complete", "cached"):
            print(f"{p.name}: {p.status} ({p.wall_time_s:.1f}s)")
    print(f"run {manifest.run_id}: {manifest.status} "
          f"({manifest.total_wall_time_s:.1f}s) -> {args.out}/manifests/{manifest.run_id}.json")
    if manifest.status != "complete":
        failed = [p for p in manifest.phases if p.status == "failed"]
        raise RuntimeError(
            f"phase {failed[0].name} failed: {failed[0].error}" if failed else manifest.status
        )
    return 0


def _run_report(args) -> int:
    written = emit_report(args.manifests, args.kind, args.out, plot=args.plot)
    for path in written:
        print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return _run_report(args)
        return _run_pipeline(args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 — CLI boundary
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
