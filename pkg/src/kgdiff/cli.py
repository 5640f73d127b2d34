"""Command-line entry point.

Every command takes ``--config``, repeated ``--set key=value``, ``--seed``
and ``--out``.  Commands share one output directory:

    <out>/data/              gen-synthetic
    <out>/encoder.ckpt       train-encoder  (+ stage1_log.tsv)
    <out>/denoiser.ckpt      train-denoiser (+ stage2_log.tsv)
    <out>/metrics.tsv        evaluate
    <out>/trajectory.csv     dump-trajectory
    <out>/ablation.tsv       ablate
    <out>/<command>.config.yaml   effective config of the last run of each command

Exit status: 0 on success, 2 for usage errors and missing inputs, 1 for
runtime failures.  Failures print one line ``error: <category>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ablation, checkpoint, evaluator, trainer
from .autodiff import NonFiniteError
from .config import ConfigError, build_config, dump_config
from .diffusion import GenerationError
from .kg import TripleFormatError, generate_synthetic, load_dataset, save_dataset

log = logging.getLogger("kgdiff")


class UsageError(Exception):
    """Bad invocation or a missing input artifact (exit status 2)."""


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. stage1.lr=0.01 (repeatable)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory (default: run)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="kgdiff", description="Generative knowledge-graph completion.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("gen-synthetic", parents=[common], help="write a rule-generated graph to <out>/data")
    sub.add_parser("train-encoder", parents=[common], help="stage 1: fit the structure encoder")
    sp = sub.add_parser("train-denoiser", parents=[common], help="stage 2: fit the denoiser on the frozen encoder")
    sp.add_argument("--encoder", type=Path, help="encoder checkpoint (default: <out>/encoder.ckpt)")
    sp = sub.add_parser("evaluate", parents=[common], help="rank held-out triples and write metrics.tsv")
    sp.add_argument("--encoder", type=Path)
    sp.add_argument("--denoiser", type=Path)
    sp = sub.add_parser("dump-trajectory", parents=[common], help="export the running x0 estimate per step")
    sp.add_argument("--encoder", type=Path)
    sp.add_argument("--denoiser", type=Path)
    sp.add_argument("--queries", type=int, default=8, help="number of split triples to trace (default 8)")
    sp = sub.add_parser("ablate", parents=[common], help="train and evaluate named variants into ablation.tsv")
    sp.add_argument("--suite", choices=("denoiser", "encoder"), default="denoiser",
                    help="denoiser: stage-2 variants on one shared encoder; encoder: with and without MGAT")
    sp.add_argument("--encoder", type=Path, help="reuse this encoder for the denoiser suite")
    sp = sub.add_parser("inspect-checkpoint", parents=[common], help="print a checkpoint's header and arrays")
    sp.add_argument("path", type=Path)
    return p


# ------------------------------------------------------------------ helpers

def _data_dir(cfg, out):
    return Path(cfg["data"]["dir"]) if cfg["data"]["dir"] else out / "data"


def _write_synthetic(cfg, directory):
    d = cfg["data"]
    graph = generate_synthetic(d["n_entities"], d["rules"], cfg["seed"], d["d_feat"])
    save_dataset(graph, directory)
    return graph


def _graph(cfg, out):
    """Load the dataset, generating the synthetic one first if nothing is there yet."""
    directory = _data_dir(cfg, out)
    if not (directory / "train.txt").exists():
        if cfg["data"]["dir"]:
            raise UsageError(f"dataset directory {directory} has no train.txt")
        log.info("no dataset in %s; generating the synthetic graph", directory)
        _write_synthetic(cfg, directory)
    cfg["data"]["dir"] = str(directory.resolve())
    return load_dataset(directory)


def _require(path, what):
    if not Path(path).exists():
        raise UsageError(f"missing {what}: {path}")
    return Path(path)


def _encoder(args, graph):
    return trainer.load_encoder(_require(args.encoder or args.out / "encoder.ckpt", "encoder checkpoint"), graph)[0]


def _denoiser(args):
    path = _require(args.denoiser or args.out / "denoiser.ckpt", "denoiser checkpoint (needed for generated scores)")
    den, schedule, _ = trainer.load_denoiser(path)
    return den, schedule


# ----------------------------------------------------------------- commands

def cmd_gen_synthetic(args, cfg):
    directory = _data_dir(cfg, args.out)
    graph = _write_synthetic(cfg, directory)
    print(f"wrote {directory}: " + " ".join(f"{k}={v}" for k, v in graph.stats().items()))


def cmd_train_encoder(args, cfg):
    graph = _graph(cfg, args.out)
    _, result = trainer.stage1_train(graph, cfg, args.out)
    print(f"best dev epoch {result.best_epoch}: " + _fmt_metrics(result.best_dev))
    print(f"wrote {args.out / 'encoder.ckpt'}")


def cmd_train_denoiser(args, cfg):
    graph = _graph(cfg, args.out)
    encoder = _encoder(args, graph)
    _, _, result = trainer.stage2_train(graph, encoder, cfg, args.out)
    print(f"best dev epoch {result.best_epoch}: " + _fmt_metrics(result.best_dev))
    print(f"wrote {args.out / 'denoiser.ckpt'}")


def cmd_evaluate(args, cfg):
    e = cfg["eval"]
    graph = _graph(cfg, args.out)
    encoder = _encoder(args, graph)
    den, schedule = _denoiser(args) if e["source"] != "encoder" else (None, None)
    rows = evaluator.evaluate(graph, encoder, trainer.build_cache(cfg, graph), e["split"], e["source"], den,
                              schedule, chains=cfg["diffusion"]["chains"], seed=cfg["seed"],
                              filtered=e["filtered"], blend=e["blend"], ties=e["ties"])
    evaluator.write_report(rows, args.out / "metrics.tsv")
    print(evaluator.format_rows(rows))


def cmd_dump_trajectory(args, cfg):
    if args.queries < 1:
        raise UsageError("--queries must be positive")
    graph = _graph(cfg, args.out)
    encoder = _encoder(args, graph)
    den, schedule = _denoiser(args)
    triples = graph.eval_triples(cfg["eval"]["split"])[:args.queries]
    path = args.out / "trajectory.csv"
    trace = evaluator.dump_trajectory(graph, encoder, trainer.build_cache(cfg, graph), den, schedule, triples,
                                      cfg["seed"], path, cfg["eval"]["top_m"])
    frac, start, end = evaluator.refinement_fraction(graph, trace, triples, cfg["eval"]["filtered"])
    print(f"wrote {path}: {len(triples)} queries x {len(trace)} steps")
    print(f"gold rank improved or held for {frac:.1%} of queries "
          f"(mean rank {start.mean():.1f} at step {trace[0][0]} -> {end.mean():.1f} at step 0)")


def cmd_ablate(args, cfg):
    graph = _graph(cfg, args.out)
    if args.suite == "encoder":
        variants, source, encoder = ablation.ENCODER_VARIANTS, "encoder", None
    else:
        variants, source = ablation.STAGE2_VARIANTS, "both"
        encoder = _encoder(args, graph) if args.encoder else None
    rows = ablation.run_variants(graph, cfg, variants, cfg["eval"]["split"], source, encoder)
    evaluator.write_report(rows, args.out / "ablation.tsv", extra_columns=("variant",))
    print(evaluator.format_rows(rows, extra_columns=("variant",)))


def cmd_inspect_checkpoint(args, cfg):
    ckpt = checkpoint.read(_require(args.path, "checkpoint"))
    print(f"owner={ckpt.owner}")
    print(f"version={ckpt.version}")
    print(f"config_hash={ckpt.config_hash}")
    for key in sorted(ckpt.meta):
        print(f"meta.{key}={json.dumps(ckpt.meta[key], sort_keys=True)}")
    print(f"arrays={len(ckpt.arrays)}")
    for name, arr in ckpt.arrays.items():
        print(f"  {name}\t{'x'.join(map(str, arr.shape)) or 'scalar'}\tfloat{arr.dtype.itemsize * 8}")


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-encoder": cmd_train_encoder,
    "train-denoiser": cmd_train_denoiser,
    "evaluate": cmd_evaluate,
    "dump-trajectory": cmd_dump_trajectory,
    "ablate": cmd_ablate,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}

# runtime failures by category; anything else propagates as a bug
_CATEGORIES = (
    (checkpoint.CheckpointError, "checkpoint"),
    (trainer.TrainingDiverged, "divergence"),
    (NonFiniteError, "divergence"),
    (GenerationError, "generation"),
    (trainer.EncoderMutated, "frozen-encoder"),
    (TripleFormatError, "data"),
    (OSError, "io"),
    (ValueError, "value"),
)


def _fmt_metrics(m):
    return " ".join(f"{k}={v:.4f}" for k, v in m.items())


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.config, args.overrides, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        try:
            COMMANDS[args.command](args, cfg)
        finally:
            dump_config(cfg, args.out / f"{args.command}.config.yaml")
    except (ConfigError, UsageError) as err:
        print(f"error: usage: {err}", file=sys.stderr)
        return 2
    except tuple(cls for cls, _ in _CATEGORIES) as err:
        category = next(name for cls, name in _CATEGORIES if isinstance(err, cls))
        print(f"error: {category}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
