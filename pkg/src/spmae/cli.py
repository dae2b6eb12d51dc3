"""Command-line entry point: ``spmae <subcommand> ...``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime or data error.
Results go to stdout, logs to stderr. Every subcommand writes ``run.json``
into its output directory; ``spmae replay run.json`` re-runs it.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__, _accel
from . import audiofront as af
from . import imgstats
from . import mae
from . import patterngen as pg
from . import tensorcore as tc
from . import transfer as tr
from .imageio import ImageFormatError

log = logging.getLogger("spmae")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_param(text):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _existing(path, what):
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _write_run_json(out_dir, args, argv):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"subcommand": args.command, "argv": list(argv), "args": resolved,
           "version": __version__, "backend": _accel.backend_name()}
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


@contextlib.contextmanager
def _thread_limit(n):
    from threadpoolctl import threadpool_limits

    if n < 1:
        raise UsageError("--threads must be >= 1")
    # the compiled kernels are serial, so only the BLAS pools need a cap
    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args):
    spec = pg.GeneratorSpec(args.family, width=args.width or args.size, height=args.height or args.size,
                            channels=args.channels, seed=args.seed, params=dict(args.param))
    manifest = pg.generate_dataset(spec, args.count, args.out, name=args.name, workers=args.workers)
    print(os.path.join(args.out, "manifest.json"))
    log.info("wrote %d %s images", manifest.count, spec.family.value)
    return EXIT_OK


def _read_scores(path):
    scores = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                scores[row["dataset"]] = float(row["score"])
            except (KeyError, TypeError, ValueError):
                raise UsageError(f"{path}: expected columns dataset,score") from None
    return scores


def cmd_stats(args):
    manifests = [pg.load_manifest(_existing(p, "manifest")) for p in args.manifest]
    names = [m.name for m in manifests]
    if len(set(names)) != len(names):
        raise UsageError(f"dataset names must be unique, got {names}")
    os.makedirs(args.out, exist_ok=True)
    canny = imgstats.CannyParams(low=args.canny_low, high=args.canny_high)
    stats = []
    for m in manifests:
        s = imgstats.dataset_stats(m, bins=args.bins, canny_params=canny)
        log.info("%s: %d images", m.name, s.sample_count)
        stats.append((m.name, s))
    stats_path = os.path.join(args.out, "stats.csv")
    with open(stats_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(imgstats.stats_csv(stats))
    print(stats_path)
    if args.scores:
        scores = _read_scores(_existing(args.scores, "scores file"))
        report_path = os.path.join(args.out, "correlation.csv")
        report = imgstats.correlation_report(stats, scores, csv_path=report_path)
        print(report_path)
        for prop in report.properties:
            print(f"r_{prop}={report.r[prop]:.6f}")
    return EXIT_OK


def _model_config(args, manifest):
    return mae.MaeConfig(channels=manifest.channels, height=args.size or manifest.height,
                         width=args.size or manifest.width, patch=args.patch, dim=args.dim, depth=args.depth,
                         heads=args.heads, decoder_dim=args.decoder_dim, decoder_depth=args.decoder_depth,
                         decoder_heads=args.decoder_heads, mask_ratio=args.mask_ratio, seed=args.seed)


def cmd_pretrain(args):
    manifest = pg.load_manifest(_existing(args.manifest, "manifest"))
    config = _model_config(args, manifest)
    schedule = mae.Schedule(steps=args.steps, batch_size=args.batch_size, base_lr=args.lr,
                            warmup_frac=args.warmup_frac, weight_decay=args.weight_decay)
    every = max(1, args.steps // 10)

    def progress(step, loss):
        if step % every == 0 or step == args.steps - 1:
            log.info("step %d loss %.6f", step, loss)

    result = mae.pretrain(config, manifest, schedule, log=progress)
    ckpt_path = os.path.join(args.out, "checkpoint.spma")
    result.checkpoint.extra = {"dataset": manifest.name}
    mae.save_checkpoint(ckpt_path, result.checkpoint)
    mae.write_loss_csv(os.path.join(args.out, "loss.csv"), result.losses)
    print(ckpt_path)
    return EXIT_OK


def _train(args, mode):
    ckpt = mae.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    task = tr.load_task(_existing(args.task, "task file"))
    model = tr.build_classifier(ckpt, task, mode=mode, seed=args.seed, random_init=args.random_init)
    schedule = tr.DownstreamSchedule(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                                     weight_decay=args.weight_decay, warmup_epochs=args.warmup_epochs,
                                     seed=args.seed)
    metric_name = "accuracy" if task.label_kind == "single" else "mAP"

    def progress(row):
        log.info("epoch %d loss %.6f %s %.4f", row["epoch"], row["train_loss"], metric_name, row["metric"])

    history = tr.train_downstream(model, task, schedule, log=progress)
    out_ckpt = os.path.join(args.out, "classifier.spma")
    mae.save_checkpoint(out_ckpt, model.to_checkpoint())
    tr.write_metric_csv(os.path.join(args.out, "metrics.csv"), history, metric_name)
    print(out_ckpt)
    print(f"{metric_name}={history[-1]['metric']:.4f}")
    return EXIT_OK


def cmd_probe(args):
    return _train(args, tr.LINEAR_PROBE)


def cmd_finetune(args):
    return _train(args, tr.FINE_TUNE)


def _read_predictions(path):
    try:
        scores = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise UsageError(f"{path}: unreadable prediction matrix ({exc})") from None
    return scores


def cmd_eval(args):
    task = tr.load_task(_existing(args.task, "task file"))
    x, labels = task.load(args.split)
    if args.predictions:
        scores = _read_predictions(_existing(args.predictions, "predictions file"))
    else:
        ckpt = mae.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
        if ckpt.kind != "classifier":
            raise UsageError(f"{args.checkpoint} is a {ckpt.kind!r} checkpoint, eval needs a classifier")
        model = tr.classifier_from_checkpoint(ckpt)
        if x.shape[1:] != (model.config.channels, model.config.height, model.config.width):
            raise tc.ShapeError(f"task samples {x.shape[1:]} do not match the classifier input")
        scores = tr.predict(model, x)
    if task.label_kind == "single":
        print(f"accuracy={tr.accuracy(scores, labels):.4f}")
    else:
        print(f"mAP={tr.mean_average_precision(scores, labels):.4f}")
    return EXIT_OK


def cmd_make_tones(args):
    params = af.MelParams(n_mels=args.mels)
    path = af.make_tone_task(args.out, args.seed, args.train, args.test, params, frames=args.frames)
    print(path)
    return EXIT_OK


def cmd_adapt(args):
    ckpt = mae.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    config, enc, report = tr.adapt_encoder(ckpt, args.channels, args.height, args.width)
    out = os.path.join(args.out, "encoder.spma")
    extra = {"source_grid": list(report.source_grid), "source_channels": report.source_channels}
    mae.save_checkpoint(out, mae.Checkpoint(config, enc, ckpt.step, "encoder", extra))
    print(out)
    print(f"grid={report.source_grid[0]}x{report.source_grid[1]}->{report.target_grid[0]}x{report.target_grid[1]} "
          f"channels={report.source_channels}->{report.target_channels}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p, out_required=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="bound on BLAS threads")
    p.add_argument("--out", required=out_required, help="output directory")


def _downstream_flags(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, help="task.json")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--warmup-epochs", type=int, default=2)
    p.add_argument("--random-init", action="store_true", help="discard the checkpoint weights")


def build_parser():
    parser = _Parser(prog="spmae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic image dataset")
    p.add_argument("--family", required=True, help=", ".join(f.value for f in pg.Family))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--name")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--param", type=_parse_param, action="append", default=[], metavar="KEY=VALUE",
                   help="generator parameter, value parsed as JSON when possible")
    _common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", help="dataset statistics and optional correlation report")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--scores", help="CSV with columns dataset,score")
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--canny-low", type=float, default=0.1)
    p.add_argument("--canny-high", type=float, default=0.2)
    _common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="masked-autoencoder pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", type=int, help="input side; must match the dataset")
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--decoder-dim", type=int, default=32)
    p.add_argument("--decoder-depth", type=int, default=1)
    p.add_argument("--decoder-heads", type=int, default=2)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-frac", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.05)
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    for name, func, text in (("probe", cmd_probe, "linear probe on a frozen encoder"),
                             ("finetune", cmd_finetune, "fine-tune encoder and head")):
        p = sub.add_parser(name, help=text)
        _downstream_flags(p)
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a classifier (or a prediction matrix) on a task split")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="CSV of per-sample class scores, one row per sample")
    p.add_argument("--task", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    _common(p, out_required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-tones", help="synthetic tone/chirp/noise audio task")
    p.add_argument("--train", type=int, default=300)
    p.add_argument("--test", type=int, default=120)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--mels", type=int, default=64)
    _common(p)
    p.set_defaults(func=cmd_make_tones)

    p = sub.add_parser("adapt", help="adapt an encoder to a new channel count and input size")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    _common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("replay", help="re-run a subcommand from its run.json")
    p.add_argument("run_json")
    p.set_defaults(func=None)
    return parser


# errors that mean the inputs themselves are wrong
_USAGE_ERRORS = (UsageError, pg.ParameterError, tc.ShapeError, tr.TransferError, imgstats.JoinError)
# errors that arise while processing otherwise valid inputs
_RUNTIME_ERRORS = (imgstats.CorrelationError, pg.GenerationError, tc.FormatError, tc.ContractError,
                   af.WavParseError, ImageFormatError, OSError)


def _replay_argv(path):
    with open(_existing(path, "run.json"), encoding="utf-8") as fh:
        argv = json.load(fh)["argv"]
    if argv and argv[0] == "replay":
        raise UsageError("run.json records another replay")
    return argv


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(message)s")
        if args.command == "replay":
            return main(_replay_argv(args.run_json))
        with _thread_limit(args.threads):
            if args.out:
                _write_run_json(args.out, args, argv)
            return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
