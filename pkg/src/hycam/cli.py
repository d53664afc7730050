"""``hycam`` command line: pretrain, adapt, eval, gradcheck and analytics exports.

Every subcommand takes ``--config run.json`` plus any number of dotted
``section.key=value`` overrides, e.g.::

    hycam adapt --config run.json adapter.variant=shared-only adapter.tau=0.5

Exit codes: 0 success, 1 validation error (config, checkpoint, data),
2 numerical failure (non-finite loss, gradcheck failure).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .adapters import HyCamAdapters
from .autodiff import DimensionError, EmptyLossError
from .backbone import Backbone, ConfigError
from .checkpoint import CheckpointError, config_hash, load_adapters, load_backbone, save_adapters, save_backbone
from .config import ResolvedPaths, RunConfig, load_config
from .evaluation import (RoutingStats, export_heatmap, modulation_snapshots, perplexity,
                         routing_stats)
from .gradcheck import tiny_gradcheck
from .runs import adapt, dataset, pretrain
from .taskgen import GenerationError, Sample, dump
from .training import NumericalError

log = logging.getLogger("hycam")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
SPLITS = ("train", "validation", "test")


class GradcheckFailure(RuntimeError):
    pass


def _paths(config: RunConfig) -> ResolvedPaths:
    paths = config.paths.resolve()
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    return paths


def _load_backbone(config: RunConfig, paths: ResolvedPaths, precision: str) -> Backbone:
    if not paths.backbone.exists():
        raise CheckpointError(f"backbone checkpoint {paths.backbone} not found")
    model, _ = load_backbone(paths.backbone, precision=precision)
    if config_hash(model.config) != config_hash(config.backbone):
        raise CheckpointError(f"{paths.backbone}: backbone config hash {config_hash(model.config)} does not "
                              f"match the run config ({config_hash(config.backbone)})")
    return model


def _load_adapters(model: Backbone, paths: ResolvedPaths) -> tuple[HyCamAdapters, dict]:
    if not paths.adapters.exists():
        raise CheckpointError(f"adapter checkpoint {paths.adapters} not found")
    return load_adapters(paths.adapters, model.config, precision=model.precision)


def _sample(samples: list[Sample], index: int, split: str) -> Sample:
    if not 0 <= index < len(samples):
        raise ConfigError(f"--sample {index} out of range for split {split} ({len(samples)} samples)")
    return samples[index]


# --------------------------------------------------------------------------- #
# commands


def cmd_pretrain(config: RunConfig, args) -> int:
    paths = _paths(config)
    data = dataset(config)
    for name in SPLITS:
        dump(data.split(name), paths.file(f"{name}.jsonl"))
    model, result = pretrain(config, data, log_path=paths.file("pretrain_loss.csv"))
    save_backbone(paths.backbone, model, {"seed": config.pretrain.seed, "steps": len(result.history)})
    print(f"backbone {paths.backbone} hash={config_hash(model.config)} steps={len(result.history)} "
          f"val_loss={result.val_history[-1][1]!r}")
    return EXIT_OK


def cmd_adapt(config: RunConfig, args) -> int:
    paths = _paths(config)
    model = _load_backbone(config, paths, config.train.precision)
    adapters, result = adapt(config, model, log_path=paths.file("adapt_loss.csv"))
    record = {"best_step": result.best_step, "best_val": result.best_val,
              "steps": len(result.history), "stopped_early": result.stopped_early}
    save_adapters(paths.adapters, adapters, model.config,
                  {"lambda_balance": config.adapter.lambda_balance, "seed": config.train.seed, **record})
    paths.file("best_step.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
    print(f"adapters {paths.adapters} variant={config.adapter.variant} best_step={result.best_step} "
          f"best_val={result.best_val!r}")
    return EXIT_OK


def cmd_eval(config: RunConfig, args) -> int:
    paths = _paths(config)
    model = _load_backbone(config, paths, "fp64")
    adapters, meta = (None, {}) if args.no_adapters else _load_adapters(model, paths)
    samples = dataset(config).split(args.split)
    report = perplexity(model, adapters, samples, step=meta.get("best_step"))
    out = Path(args.out) if args.out else paths.file("eval_report.txt")
    out.write_text(report.to_text())
    if adapters is not None and adapters.config.routed:
        export_heatmap(routing_stats(model, adapters, samples), paths.file("routing_stats.csv"))
    if args.sample is not None and adapters is not None:
        snaps = modulation_snapshots(model, adapters, _sample(samples, args.sample, args.split), args.sample)
        export_heatmap(snaps, paths.file("modulation_heatmap.csv"))
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _print_stats(stats: RoutingStats) -> None:
    for layer in range(stats.n_layers):
        for task, arr in stats.per_task.items():
            print(f"layer={layer} task={task} " + " ".join(f"{x:.4f}" for x in arr[layer]))
        print(f"layer={layer} task=all " + " ".join(f"{x:.4f}" for x in stats.overall[layer])
              + f" entropy={stats.entropy[layer]:.4f}")
    print(f"collapse={stats.collapse!r}")


def cmd_inspect_routing(config: RunConfig, args) -> int:
    paths = _paths(config)
    model = _load_backbone(config, paths, "fp64")
    adapters, _ = _load_adapters(model, paths)
    if not adapters.config.routed:
        raise ConfigError(f"adapter.variant {adapters.config.variant!r} has no router to inspect")
    stats = routing_stats(model, adapters, dataset(config).split(args.split))
    export_heatmap(stats, Path(args.out) if args.out else paths.file("routing_stats.csv"))
    _print_stats(stats)
    return EXIT_OK


def cmd_export_modulation(config: RunConfig, args) -> int:
    paths = _paths(config)
    model = _load_backbone(config, paths, "fp64")
    adapters, _ = _load_adapters(model, paths)
    samples = dataset(config).split(args.split)
    snaps = modulation_snapshots(model, adapters, _sample(samples, args.sample, args.split), args.sample)
    out = export_heatmap(snaps, Path(args.out) if args.out else paths.file("modulation_heatmap.csv"))
    print(f"{len(snaps)} rows -> {out}")
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, args) -> int:
    a = config.adapter
    report = tiny_gradcheck(a.variant, rank=min(a.rank, 4), n_specialists=min(a.n_specialists, 3), tau=a.tau,
                            lambda_balance=a.lambda_balance, seed=config.train.seed)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if not report.passed:
        raise GradcheckFailure("gradcheck failed for " + ", ".join(report.failures))
    return EXIT_OK


COMMANDS = {
    "pretrain": (cmd_pretrain, "train the backbone on the pooled synthetic corpus"),
    "adapt": (cmd_adapt, "freeze the backbone and train adapters with early stopping"),
    "eval": (cmd_eval, "perplexity/accuracy report plus routing and modulation exports"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of adapter gradients on a tiny fp64 model"),
    "inspect-routing": (cmd_inspect_routing, "per-layer, per-task mean routing weights"),
    "export-modulation": (cmd_export_modulation, "fused modulation vectors of one sample as CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hycam", description="Hybrid contextual attention modulation on a "
                                     "small frozen transformer.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("overrides", nargs="*", metavar="section.key=value", help="config overrides")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name in ("eval", "inspect-routing", "export-modulation"):
            p.add_argument("--split", choices=SPLITS, default="validation")
        if name in ("eval", "inspect-routing", "export-modulation", "gradcheck"):
            p.add_argument("--out", help="output file (default: inside paths.out_dir)")
        if name == "eval":
            p.add_argument("--no-adapters", action="store_true", help="evaluate the frozen backbone alone")
            p.add_argument("--sample", type=int, help="also export the modulation heatmap of this sample")
        if name == "export-modulation":
            p.add_argument("--sample", type=int, default=0, help="index into the split")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    handler = COMMANDS[args.command][0]
    try:
        config = load_config(args.config, args.overrides)
        return handler(config, args)
    except (NumericalError, GradcheckFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CheckpointError, GenerationError, DimensionError, EmptyLossError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
