"""Command-line entry point: ``byola <subcommand> ...``.

Configuration precedence is command-line flags, then ``BYOLA_SEED`` (seed
only), then ``--config FILE``, then built-in defaults. Exit codes: 0 ok,
2 usage or contract error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import augment as aug
from . import byol, data, evaluation, plotting, tnsr
from .config import RunConfig, load_config
from .encoder import FEATURE_PATHS, POOLING_MODES, readout_variant
from .errors import ByolaError, ContractViolation, DataError, NumericError

log = logging.getLogger("byola")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# Flag name -> RunConfig key, for the handful of flags exposed directly.
FLAG_KEYS = {
    "seed": "seed", "epochs": "epochs", "max_steps": "max_steps", "batch_size": "batch_size",
    "lr": "lr", "tau": "tau", "runs": "probe_runs", "probe_lr": "probe_lr",
    "task": "probe_task", "duration": "duration", "deterministic": "deterministic",
    "figures": "figures",
}


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ContractViolation(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def resolve_config(args) -> RunConfig:
    overrides = _parse_set(getattr(args, "set", None))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


@contextlib.contextmanager
def _determinism(cfg: RunConfig):
    """Single-threaded BLAS in determinism mode."""
    if not cfg.deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(header: list, *rows) -> None:
    """Delimited summary on stdout."""
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)


def _figure(cfg: RunConfig, fn, *args) -> None:
    if cfg.figures:
        path = fn(*args)
        log.info("wrote %s", path)


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = data.SYNTH_PRESETS[args.preset]
    spec = data.replace_spec(spec, seed=cfg.seed, clips_per_class=args.clips_per_class,
                             folds=args.folds, duration=args.clip_seconds)
    manifest = data.synth_dataset(spec, args.out)
    _emit(["manifest", "rows"], [Path(args.out) / "manifest.csv", len(manifest)])
    return EXIT_OK


def cmd_stats(args, cfg: RunConfig) -> int:
    manifest = data.read_manifest(args.manifest)
    specs = data.load_spectrograms(manifest, cfg.frontend())
    stats = data.corpus_stats_from_arrays(specs)
    if args.dump_dir:
        for row, spec in zip(manifest.rows, specs):
            dump = Path(args.dump_dir) / (row.path + ".tnsr")
            dump.parent.mkdir(parents=True, exist_ok=True)
            tnsr.save(dump, {"logmel": spec})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {"mu": stats.mu, "sigma": stats.sigma, "cell_count": stats.cell_count,
                      "n_clips": len(specs)})
    _emit(["mu", "sigma", "cell_count"], [repr(stats.mu), repr(stats.sigma), stats.cell_count])
    _figure(cfg, plotting.value_histogram, np.concatenate([s.ravel() for s in specs]),
            stats.mu, stats.sigma, out.with_suffix(".png"))
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    manifest = data.read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_text())
    result = byol.pretrain_manifest(manifest, cfg.encoder(), cfg.train(), cfg.augment(),
                                    cfg.frontend(), out_dir=out)
    final = result.losses[-1] if result.losses else float("nan")
    _emit(["checkpoint", "steps", "epochs", "final_loss"],
          [out / "checkpoint.tnsr", result.state.step, result.state.epoch, repr(final)])
    if result.losses:
        _figure(cfg, plotting.loss_curve, result.losses, out / "loss.png")
    return EXIT_OK


def cmd_extract(args, cfg: RunConfig) -> int:
    state, meta = byol.load_checkpoint(args.checkpoint)
    if "norm" not in meta:
        raise DataError(f"{args.checkpoint}: checkpoint carries no normalization statistics")
    norm = aug.NormStats(meta["norm"]["mu"], meta["norm"]["sigma"])
    manifest = data.read_manifest(args.manifest)
    encoder = readout_variant(state.online.encoder, args.pooling, args.features)
    table = evaluation.extract(encoder, manifest, norm, duration=cfg.duration, seed=cfg.seed,
                               frontend_cfg=cfg.frontend())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.save_table(table, out)
    _write_json(out.with_name(out.name + ".json"),
                {"rows": len(table), "dim": table.dim, "rejects": table.rejects,
                 "encoder": {k: v for k, v in vars(encoder.cfg).items()}})
    _emit(["embeddings", "rows", "dim", "rejects"], [out, len(table), table.dim, len(table.rejects)])
    return EXIT_OK


def cmd_probe(args, cfg: RunConfig) -> int:
    table = evaluation.load_table(args.embeddings)
    report = evaluation.train_probe(table, cfg.probe())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    rows = ([("fold" + k, i, v) for k, r in report["folds"].items() for i, v in enumerate(r["runs"])]
            if "folds" in report else [("test", i, v) for i, v in enumerate(report["runs"])])
    with out.with_suffix(".csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group", "run", report["metric"]])
        writer.writerows(rows)
    _emit(["metric", "mean", "ci95"],
          [report["metric"], repr(report["mean"]), repr(report.get("ci95", 0.0))])
    _figure(cfg, plotting.probe_report, report, out.with_suffix(".png"))
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    tensors = tnsr.load(args.input)
    name = args.tensor or next(iter(tensors), None)
    if name not in tensors:
        raise DataError(f"{args.input}: no tensor named {name!r}")
    x = tensors[name].astype(np.float64)
    batch = x[None] if x.ndim == 2 else x
    if args.mu is not None and args.sigma is not None:
        stats = aug.NormStats(args.mu, args.sigma)
    else:
        stats = data.corpus_stats_from_arrays(list(batch)).norm_stats()
    pair = aug.augment_chain(batch, args.chain, cfg.seed, stats, cfg.augment())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tnsr.save(out, {"v": pair.v, "v_prime": pair.v_prime})
    _emit(["output", "chain", "seed", "shape"],
          [out, args.chain, cfg.seed, "x".join(map(str, pair.v.shape))])
    _figure(cfg, plotting.view_pair, aug.pre_norm(batch[0], stats), pair.v[0], pair.v_prime[0],
            out.with_suffix(".png"))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "stats": cmd_stats, "pretrain": cmd_pretrain,
            "extract": cmd_extract, "probe": cmd_probe, "augment": cmd_augment}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="single-threaded, bit-reproducible execution (default on)")
    common.add_argument("--figures", action=argparse.BooleanOptionalAction, default=None,
                        help="render PNG figures next to the outputs (default on)")
    common.add_argument("--print-config", action="store_true",
                        help="print the fully resolved configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="byola", description="Self-supervised audio pretraining, embedding extraction "
        "and linear evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic labelled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(data.SYNTH_PRESETS), default="tones")
    p.add_argument("--clips-per-class", type=int)
    p.add_argument("--clip-seconds", type=float)
    p.add_argument("--folds", type=int, help="assign K folds instead of train/valid/test")

    p = sub.add_parser("stats", parents=[common], help="corpus log-mel mean/std")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="JSON output path")
    p.add_argument("--dump-dir", help='also write each log-mel [F, T] as TNSR tensor "logmel"')

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)

    p = sub.add_parser("extract", parents=[common], help="embed a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="TNSR output path (CSV sidecar alongside)")
    p.add_argument("--pooling", choices=POOLING_MODES, help="temporal pooling ablation")
    p.add_argument("--features", choices=FEATURE_PATHS, help="pooled feature path ablation")
    p.add_argument("--duration", type=float, help="crop/pad length in seconds")

    p = sub.add_parser("probe", parents=[common], help="linear evaluation of embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--runs", type=int)
    p.add_argument("--probe-lr", type=float, help="fixed learning rate (default: grid search)")
    p.add_argument("--task", choices=("multiclass", "multilabel"))

    p = sub.add_parser("augment", parents=[common], help="apply an augmentation chain to a TNSR file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chain", default="mixup,rrc,rlf", help='comma list of blocks, or "none"')
    p.add_argument("--tensor", help="tensor name inside the input (default: first)")
    p.add_argument("--mu", type=float, help="Pre-Norm mean (default: from the input)")
    p.add_argument("--sigma", type=float, help="Pre-Norm std (default: from the input)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        with _determinism(cfg):
            return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"byola: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"byola: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractViolation, ByolaError) as exc:
        print(f"byola: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
