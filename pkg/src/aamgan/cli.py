"""Command-line entry point: ``aamgan {train, synthesize, eval, generate-toy}``.

Every command writes into a fresh timestamped run directory under the
output root (``--out``, else ``[run] out`` from the config, else the
``AAMGAN_OUT`` environment variable, else ``./runs``)::

    config.snapshot  checkpoints/  synthetic/  reports/  plots/  log.txt

Exit codes: 0 success, 2 configuration error, 3 runtime or numerical
error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from . import plots
from .checkpoint import load_checkpoint
from .classifier import ClassifierConfig, train_classifier
from .datasets import ToySpec, dataset_from_config, generate_toy_dataset, load_dataset, save_dataset
from .errors import AAMGanError, ConfigError, CorruptCheckpoint, IOFailure, VersionMismatch
from .heads import AAM, SOFTMAX
from .metrics import (
    augmentation_study,
    confidence_report,
    fid,
    format_table,
    gan_test,
    gan_train,
    label_noise_curve,
    per_class_accuracy,
    write_json,
    write_text,
)
from .study import build_context, run_study, sweep_lambda, sweep_table, with_head
from .synthesis import ALL_CLASSES, FIXED_CLASS, POLICIES, reconstruction_error, synthesize
from .trainer import build_state, run_training

log = logging.getLogger("aamgan")

OUT_ENV = "AAMGAN_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
EVAL_COMMANDS = ("gan-train", "gan-test", "fid", "confidence", "noise-curve", "augment", "sweep", "compare-heads")


# ---------------------------------------------------------------------------
# configuration


def _float_list(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(parser):
    g = parser.add_argument_group("configuration")
    g.add_argument("--config", help="INI configuration file")
    g.add_argument("--seed", type=int, help="overrides train.seed and metrics.seed")
    g.add_argument("--out", help="output root for the run directory")
    g.add_argument("--head", choices=(SOFTMAX, AAM))
    g.add_argument("--scale-s", type=float, dest="scale_s")
    g.add_argument("--margin-m", type=float, dest="margin_m")
    g.add_argument("--lambda-rec", type=float, dest="lambda_rec")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration value (repeatable)")


def resolve_config(args) -> config_mod.RunConfig:
    """Config file, then ``--set`` assignments, then the dedicated flags."""
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig().validate()
    overrides = dict(config_mod.parse_override(a) for a in args.set)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if args.head is not None:
        cfg = with_head(cfg, args.head)
    flags = {
        "train.seed": args.seed,
        "metrics.seed": args.seed,
        "head.scale": args.scale_s,
        "head.margin": args.margin_m,
        "train.lambda_rec": args.lambda_rec,
    }
    lam = getattr(args, "lambda_cls", None)
    if lam is not None and not isinstance(lam, tuple):
        flags["train.lambda_cls"] = lam
    flags = {k: v for k, v in flags.items() if v is not None}
    return cfg.with_overrides(flags) if flags else cfg


def output_root(args, cfg):
    return Path(args.out or cfg.run.out or os.environ.get(OUT_ENV) or "runs")


def make_run_dir(root: Path, name: str, command: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{name}-{command}-{stamp}"
    path, n = base, 1
    while True:
        try:
            path.mkdir(parents=True)
            break
        except FileExistsError:
            n += 1
            path = base.with_name(f"{base.name}-{n}")
        except OSError as exc:
            raise IOFailure(f"cannot create run directory {path}: {exc}") from exc
    for sub in ("checkpoints", "synthetic", "reports", "plots"):
        (path / sub).mkdir()
    return path


class Run:
    """A run directory with its config snapshot and a log handler attached."""

    def __init__(self, args, cfg, command):
        self.cfg = cfg
        self.dir = make_run_dir(output_root(args, cfg), cfg.run.name, command)
        write_text(cfg.to_text(), self.dir / "config.snapshot")
        self.handler = logging.FileHandler(self.dir / "log.txt", encoding="utf-8")
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(self.handler)

    def close(self):
        log.removeHandler(self.handler)
        self.handler.close()

    def report(self, name, obj, text):
        write_json(obj, self.dir / "reports" / f"{name}.json")
        write_text(text, self.dir / "reports" / f"{name}.txt")
        print(text, end="")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg):
    run = Run(args, cfg, "train")
    try:
        train, _ = dataset_from_config(cfg.data, cfg.model.image_size)
        state = load_checkpoint(args.checkpoint) if args.checkpoint else build_state(cfg.model, cfg.head, cfg.train)
        if args.checkpoint:
            state.train_cfg = cfg.train
        log.info("training %s head for %d iterations", cfg.head.kind, cfg.train.total_iterations)

        def progress(row):
            if row["iteration"] % max(cfg.train.log_every * 10, 1) == 0:
                log.info("iter %d rec=%.4f cls_real=%.4f cls_fake=%.4f", row["iteration"], row["rec"],
                         row["cls_real"], row["cls_fake"])

        result = run_training(state, train, run.dir, progress)
        summary = {"final_checkpoint": str(result.final_checkpoint), "iterations": state.iteration,
                   "parameter_digest": state.parameter_digest()}
        run.report("train_summary", summary, "".join(f"{k}: {v}\n" for k, v in summary.items()))
    finally:
        run.close()
    return run.dir


def _source_dataset(args, cfg):
    if getattr(args, "source", None):
        return load_dataset(args.source)
    return dataset_from_config(cfg.data, cfg.model.image_size)[1]


def cmd_synthesize(args, cfg):
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "required for synthesize")
    run = Run(args, cfg, "synthesize")
    try:
        state = load_checkpoint(args.checkpoint)
        source = _source_dataset(args, cfg)
        syn = synthesize(state.gen, source, args.policy, args.target_class, cfg.metrics.seed,
                         cfg.metrics.max_sources)
        manifest = save_dataset(syn.dataset, run.dir / "synthetic", prefix="syn")
        summary = {"policy": args.policy, "sources": len(set(syn.source_index.tolist())),
                   "outputs": len(syn.dataset), "manifest": str(manifest)}
        if args.reconstruct:
            summary["reconstruction_l1"] = reconstruction_error(state.gen, source, cfg.metrics.max_sources)
        run.report("synthesis", summary, "".join(f"{k}: {v}\n" for k, v in summary.items()))
    finally:
        run.close()
    return run.dir


def _synthetic_input(args, cfg, source):
    """The evaluated set: a manifest (``--synthetic``) or a checkpoint fan-out."""
    if args.synthetic:
        return load_dataset(args.synthetic)
    if args.checkpoint:
        gen = load_checkpoint(args.checkpoint).gen
        return synthesize(gen, source, ALL_CLASSES, max_sources=cfg.metrics.max_sources).dataset
    raise ConfigError("--synthetic", "give --synthetic MANIFEST or --checkpoint CKPT")


def _metric_text(rows):
    return "".join(f"{k}: {v}\n" for k, v in rows.items())


def cmd_eval(args, cfg):
    sub = args.metric
    run = Run(args, cfg, f"eval-{sub}")
    try:
        _dispatch_eval(sub, args, cfg, run)
    finally:
        run.close()
    return run.dir


def _dispatch_eval(sub, args, cfg, run):
    clf_cfg = ClassifierConfig.from_metrics(cfg.metrics)
    if sub == "sweep":
        values = args.lambda_cls or cfg.metrics.sweep_lambdas
        ctx = build_context(cfg)
        rows = sweep_lambda(cfg, values, ctx, cache=None, head=cfg.head.kind)
        header, body = sweep_table(rows)
        run.report("lambda_sweep", [r.__dict__ for r in rows], format_table(header, body, "{:.2f}"))
        plots.table_figure(header, body, run.dir / "plots" / "lambda_sweep.png", "lambda_cls sweep")
        return
    if sub == "compare-heads":
        study = run_study(cfg, args.seeds, run.dir, cache_dir=args.cache, sweep_values=())
        header, body = study.comparison.table()
        print(format_table(header, body, "{:.3f}"), end="")
        return
    if sub == "fid":
        if not (args.real and args.fake):
            raise ConfigError("--real/--fake", "fid needs --real and --fake manifests")
        train, _ = dataset_from_config(cfg.data, cfg.model.image_size)
        extractor = train_classifier(train, clf_cfg)
        res = fid(load_dataset(args.real).images, load_dataset(args.fake).images, extractor)
        run.report("fid", res.__dict__, _metric_text(res.__dict__))
        return

    train, test = dataset_from_config(cfg.data, cfg.model.image_size)
    synthetic = _synthetic_input(args, cfg, train if sub == "gan-train" else test)
    if sub == "gan-train":
        acc = gan_train(synthetic, test, clf_cfg)
        out = {"gan_train": acc, "synthetic_size": len(synthetic), "test_size": len(test)}
        run.report("gan_train", out, _metric_text(out))
        return
    if sub == "noise-curve":
        curve = label_noise_curve(train, cfg.metrics.noise_levels, synthetic, clf_cfg, cfg.metrics.seed)
        run.report("noise_curve", [list(p) for p in curve],
                   format_table(("labels distorted", "GAN-test"), [(p, a) for p, a in curve]))
        plots.noise_curve({cfg.head.kind: curve}, run.dir / "plots" / "noise_curve.png")
        return
    if sub == "augment":
        rows = augmentation_study(train, cfg.metrics.augment_sizes, synthetic, test, clf_cfg, cfg.metrics.seed)
        body = [(r.size, 100 * r.real_only, 100 * r.real_plus_synthetic, 100 * r.delta) for r in rows]
        run.report("augment", [dict(r.__dict__, delta=r.delta) for r in rows],
                   format_table(("real images", "real only", "real + synthetic", "delta"), body, "{:.2f}"))
        return

    clf = train_classifier(train, clf_cfg)
    if sub == "gan-test":
        out = {"gan_test": gan_test(clf, synthetic), "classifier_test_accuracy": clf.accuracy(test),
               "per_class": per_class_accuracy(clf, synthetic), "synthetic_size": len(synthetic)}
        run.report("gan_test", out, _metric_text(out))
        return
    if sub == "confidence":
        rep = confidence_report(clf, synthetic)
        run.report("confidence", rep.__dict__, _metric_text(rep.__dict__))
        plots.confidence_histogram({cfg.head.kind: rep}, run.dir / "plots" / "confidence_histogram.png")
        return
    raise ConfigError("eval", f"unknown metric {sub!r}")


def cmd_generate_toy(args, cfg):
    run = Run(args, cfg, "toy")
    try:
        spec = ToySpec(cfg.data.toy_classes, cfg.data.toy_samples_per_class, cfg.model.image_size, cfg.data.toy_seed)
        manifest = generate_toy_dataset(spec, run.dir / "synthetic")
        out = {"manifest": str(manifest), "classes": spec.num_classes,
               "images": spec.num_classes * spec.samples_per_class}
        run.report("toy", out, _metric_text(out))
    finally:
        run.close()
    return run.dir


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="aamgan", description="Conditional GAN with an angular-margin auxiliary classifier.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a GAN")
    _common(t)
    t.add_argument("--lambda-cls", type=float, dest="lambda_cls")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="translate a source set with a trained generator")
    _common(s)
    s.add_argument("--lambda-cls", type=float, dest="lambda_cls")
    s.add_argument("--checkpoint", help="generator checkpoint")
    s.add_argument("--source", help="source manifest (default: test split of the configured data)")
    s.add_argument("--policy", choices=POLICIES, default=ALL_CLASSES)
    s.add_argument("--class", type=int, dest="target_class", help="target for the fixed-class policy")
    s.add_argument("--reconstruct", action="store_true", help="also report the round-trip L1 error")
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("eval", help="evaluation metrics")
    e.add_argument("metric", choices=EVAL_COMMANDS)
    _common(e)
    e.add_argument("--lambda-cls", type=_float_list, dest="lambda_cls",
                   help="sweep values (comma-separated) for 'sweep'")
    e.add_argument("--checkpoint", help="synthesize the evaluated set from this checkpoint")
    e.add_argument("--synthetic", help="manifest of the evaluated (synthetic) set")
    e.add_argument("--real", help="real-image manifest for 'fid'")
    e.add_argument("--fake", help="generated-image manifest for 'fid'")
    e.add_argument("--seeds", type=_int_list, default=(0, 1, 2), help="seeds for 'compare-heads'")
    e.add_argument("--cache", help="run cache directory for 'compare-heads'")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate-toy", help="write the toy benchmark as PNGs plus a manifest")
    _common(g)
    g.set_defaults(func=cmd_generate_toy)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        cfg = resolve_config(args)
        if args.command == "eval" and args.metric == "sweep" and args.lambda_cls:
            if any(v <= 0 for v in args.lambda_cls):
                raise ConfigError("--lambda-cls", "sweep values must be positive")
        if args.command == "synthesize" and args.policy == FIXED_CLASS and args.target_class is None:
            raise ConfigError("--class", "required by the fixed-class policy")
        args.func(args, cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (IOFailure, CorruptCheckpoint, VersionMismatch, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (AAMGanError, ValueError, ArithmeticError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


__all__ = ["main", "build_parser", "resolve_config"]

if __name__ == "__main__":
    sys.exit(main())
