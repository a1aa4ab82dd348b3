"""Desk-scale experiment drivers.

A *run* trains one GAN from a :class:`RunConfig` and scores its generator
with the metric battery. The study helpers chain runs into the head
comparison, the ``lambda_cls`` sweep, the label-noise curves and the
confidence histograms. Finished runs can be cached on disk keyed by the
configuration and a fingerprint of the package source; everything is
deterministic, so a cache hit returns exactly what a rerun would.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import plots
from .checkpoint import encode, load_checkpoint
from .classifier import ClassifierConfig, EvalClassifier, train_classifier
from .config import RunConfig
from .datasets import LabeledDataset, dataset_from_config
from .errors import NonFiniteLoss
from .heads import AAM, DEFAULT_MARGIN, SOFTMAX
from .metrics import (
    MetricReport,
    SweepRow,
    confidence_report,
    fid,
    format_table,
    gan_test,
    gan_train,
    label_noise_curve,
    lambda_sweep,
    per_class_accuracy,
    write_json,
    write_text,
)
from .synthesis import ALL_CLASSES, SyntheticSet, synthesize
from .trainer import build_state, run_training

log = logging.getLogger(__name__)

HEADS = (SOFTMAX, AAM)
_REC_WINDOW = 100


# modules whose code can change what a run trains or measures
_FINGERPRINTED = ("checkpoint", "classifier", "config", "datasets", "errors", "heads", "losses", "metrics",
                  "nets", "study", "synthesis", "trainer")


def package_fingerprint():
    """sha256 over the source of the modules that determine run outcomes."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in _FINGERPRINTED:
        h.update(name.encode())
        h.update((root / f"{name}.py").read_bytes())
    return h.hexdigest()


@dataclass
class EvalContext:
    """Data plus the real-trained classifier shared by every run."""

    train: LabeledDataset
    test: LabeledDataset
    classifier: EvalClassifier
    classifier_config: ClassifierConfig
    max_sources: int = 0

    @property
    def real_accuracy(self):
        return self.classifier.accuracy(self.test)


def build_context(cfg: RunConfig, workdir=None) -> EvalContext:
    train, test = dataset_from_config(cfg.data, cfg.model.image_size, workdir)
    clf_cfg = ClassifierConfig.from_metrics(cfg.metrics)
    return EvalContext(train, test, train_classifier(train, clf_cfg), clf_cfg, cfg.metrics.max_sources)


def evaluate_generator(gen, ctx: EvalContext, metadata=None):
    """Score a generator; returns ``(MetricReport, synthetic test set)``.

    Both synthetic sets use the all-classes fan-out: the training-split
    sources feed GAN-train, the test-split sources feed GAN-test, FID and
    the confidence histogram.
    """
    syn_train = synthesize(gen, ctx.train, ALL_CLASSES, max_sources=ctx.max_sources)
    syn_test = synthesize(gen, ctx.test, ALL_CLASSES, max_sources=ctx.max_sources)
    g_train = gan_train(syn_train.dataset, ctx.test, ctx.classifier_config)
    g_test = gan_test(ctx.classifier, syn_test.dataset)
    f = fid(ctx.test.images, syn_test.dataset.images, ctx.classifier)
    meta = {
        "fid_extractor": f.extractor,
        "real_test_accuracy": ctx.real_accuracy,
        "synthetic_train_size": len(syn_train.dataset),
        "synthetic_test_size": len(syn_test.dataset),
    }
    meta.update(metadata or {})
    report = MetricReport(g_train, g_test, f.value, confidence_report(ctx.classifier, syn_test.dataset),
                          per_class_accuracy(ctx.classifier, syn_test.dataset), meta)
    return report.validate(), syn_test


@dataclass
class RunOutcome:
    head: str
    seed: int
    lambda_cls: float
    iterations: int
    rec_first: float
    rec_last: float
    checkpoint_digest: str
    seconds: float
    report: Optional[MetricReport] = None
    error: Optional[str] = None

    @property
    def rec_decreased(self):
        return self.rec_last < self.rec_first

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("report") is not None:
            d["report"] = MetricReport.from_dict(d["report"])
        return cls(**d)


def _rec_trend(history):
    rec = [row["rec"] for row in history]
    if not rec:
        return float("nan"), float("nan")
    w = min(_REC_WINDOW, len(rec))
    return float(np.mean(rec[:w])), float(np.mean(rec[-w:]))


def run_key(cfg: RunConfig):
    text = cfg.to_text(("model", "head", "train", "data", "metrics"))
    return hashlib.sha256((text + package_fingerprint()).encode()).hexdigest()[:20]


def train_and_evaluate(cfg: RunConfig, ctx: EvalContext, run_dir=None):
    """Train from scratch and evaluate; returns ``(RunOutcome, synthetic test set)``.

    A :class:`NonFiniteLoss` is recorded in ``RunOutcome.error`` rather than
    raised, so a study keeps going past a diverged run.
    """
    t0 = time.time()
    state = build_state(cfg.model, cfg.head, cfg.train)
    try:
        result = run_training(state, ctx.train, run_dir)
    except NonFiniteLoss as exc:
        return RunOutcome(cfg.head.kind, cfg.train.seed, cfg.train.lambda_cls, state.iteration,
                          float("nan"), float("nan"), "", time.time() - t0, None, str(exc)), None
    first, last = _rec_trend(result.history)
    digest = hashlib.sha256(encode(state)).hexdigest()
    report, syn_test = evaluate_generator(state.gen, ctx, {
        "head": cfg.head.kind, "seed": cfg.train.seed, "lambda_cls": cfg.train.lambda_cls,
        "iterations": state.iteration, "checkpoint_digest": digest,
    })
    outcome = RunOutcome(cfg.head.kind, cfg.train.seed, cfg.train.lambda_cls, state.iteration,
                         first, last, digest, time.time() - t0, report)
    return outcome, syn_test


class RunCache:
    """Directory of finished runs: ``<key>/outcome.json`` and ``<key>/checkpoints/final.ckpt``."""

    def __init__(self, root):
        self.root = Path(root)

    def run_dir(self, cfg):
        return self.root / run_key(cfg)

    def get(self, cfg):
        path = self.run_dir(cfg) / "outcome.json"
        if not path.exists():
            return None
        return RunOutcome.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def put(self, cfg, outcome):
        d = self.run_dir(cfg)
        write_text(cfg.to_text(), d / "config.snapshot")
        write_json(outcome.to_dict(), d / "outcome.json")


def cached_run(cfg: RunConfig, ctx: EvalContext, cache: Optional[RunCache]):
    """:func:`train_and_evaluate` through ``cache``; returns ``(outcome, synthetic test set)``."""
    if cache is None:
        return train_and_evaluate(cfg, ctx)
    hit = cache.get(cfg)
    if hit is not None:
        log.info("cache hit for %s seed=%s lambda_cls=%s", hit.head, hit.seed, hit.lambda_cls)
        syn = None
        ckpt = cache.run_dir(cfg) / "checkpoints" / "final.ckpt"
        if hit.error is None and ckpt.exists():
            syn = synthesize(load_checkpoint(ckpt).gen, ctx.test, ALL_CLASSES, max_sources=ctx.max_sources)
        return hit, syn
    outcome, syn = train_and_evaluate(cfg, ctx, cache.run_dir(cfg))
    cache.put(cfg, outcome)
    return outcome, syn


# ---------------------------------------------------------------------------
# studies


@dataclass
class HeadComparison:
    outcomes: List[RunOutcome]
    synthetic: Dict[str, SyntheticSet] = field(default_factory=dict)

    def by_head(self, head):
        return [o for o in self.outcomes if o.head == head]

    def table(self):
        header = ("head", "seed", "GAN-train", "GAN-test", "FID", "conf>0.9", "mean conf", "rec first", "rec last")
        rows = []
        for o in self.outcomes:
            r = o.report
            if r is None:
                rows.append((o.head, o.seed, "-", "-", "-", "-", "-", "-", o.error))
                continue
            rows.append((o.head, o.seed, 100 * r.gan_train, 100 * r.gan_test, r.fid,
                         r.confidence.mass_above_09, r.confidence.mean, o.rec_first, o.rec_last))
        for head in HEADS:
            done = [o.report for o in self.by_head(head) if o.report is not None]
            if done:
                rows.append((head, "mean", 100 * np.mean([r.gan_train for r in done]),
                             100 * np.mean([r.gan_test for r in done]), float(np.mean([r.fid for r in done])),
                             float(np.mean([r.confidence.mass_above_09 for r in done])),
                             float(np.mean([r.confidence.mean for r in done])), "", ""))
        return header, rows

    def directional(self):
        """Per seed: does AAM match or beat soft-max on GAN-test and right mass?"""
        soft = {o.seed: o for o in self.by_head(SOFTMAX)}
        out = []
        for a in self.by_head(AAM):
            s = soft.get(a.seed)
            if s is None or a.report is None or s.report is None:
                continue
            out.append({
                "seed": a.seed,
                "gan_test_aam": a.report.gan_test, "gan_test_softmax": s.report.gan_test,
                "mass_aam": a.report.confidence.mass_above_09,
                "mass_softmax": s.report.confidence.mass_above_09,
                "holds": a.report.gan_test >= s.report.gan_test
                and a.report.confidence.mass_above_09 >= s.report.confidence.mass_above_09,
            })
        return out


def compare_heads(cfg: RunConfig, seeds: Sequence[int], ctx: EvalContext, cache=None,
                  heads=HEADS) -> HeadComparison:
    outcomes, synthetic = [], {}
    for head in heads:
        for seed in seeds:
            run_cfg = with_head(cfg, head).with_overrides({"train.seed": seed})
            outcome, syn = cached_run(run_cfg, ctx, cache)
            outcomes.append(outcome)
            if head not in synthetic and syn is not None:
                synthetic[head] = syn
    return HeadComparison(outcomes, synthetic)


def sweep_lambda(cfg: RunConfig, values: Sequence[float], ctx: EvalContext, cache=None, head=SOFTMAX):
    """Table of ``lambda_cls -> (GAN-train, GAN-test, FID)``; partial rows survive a failure."""
    rows: List[SweepRow] = []
    base = with_head(cfg, head)

    def run_one(value):
        outcome, _ = cached_run(base.with_overrides({"train.lambda_cls": value}), ctx, cache)
        if outcome.report is None:
            raise NonFiniteLoss(outcome.error or "unknown", outcome.iterations)
        return outcome.report

    try:
        lambda_sweep(values, run_one, rows)
    except NonFiniteLoss as exc:
        log.warning("sweep stopped after %d rows: %s", len(rows), exc)
    return rows


def sweep_table(rows: Sequence[SweepRow]):
    """Metrics as rows and ``lambda_cls`` values as columns."""
    header = ["metric \\ lambda_cls"] + [f"{r.lambda_cls:g}" for r in rows]
    body = [
        ["GAN-train"] + [100 * r.gan_train for r in rows],
        ["GAN-test"] + [100 * r.gan_test for r in rows],
        ["FID"] + [r.fid for r in rows],
    ]
    return header, body


def noise_curves(ctx: EvalContext, synthetic: Dict[str, SyntheticSet], levels, seed=0):
    return {head: label_noise_curve(ctx.train, levels, syn.dataset, ctx.classifier_config, seed)
            for head, syn in synthetic.items()}


@dataclass
class StudyResult:
    comparison: HeadComparison
    sweep: List[SweepRow]
    curves: Dict[str, list]
    artifacts: Dict[str, Path]


def run_study(cfg: RunConfig, seeds: Sequence[int], out_dir, cache_dir=None, ctx=None,
              sweep_values=None) -> StudyResult:
    """Head comparison over ``seeds``, ``lambda_cls`` sweep, noise curves and histograms.

    Reports land in ``out_dir/reports`` and figures in ``out_dir/plots``.
    """
    out_dir = Path(out_dir)
    ctx = ctx or build_context(cfg)
    cache = RunCache(cache_dir) if cache_dir is not None else None
    comparison = compare_heads(cfg, seeds, ctx, cache)
    values = cfg.metrics.sweep_lambdas if sweep_values is None else sweep_values
    sweep_cfg = cfg.with_overrides({"train.seed": seeds[0]})
    rows = sweep_lambda(sweep_cfg, values, ctx, cache) if values else []
    curves = noise_curves(ctx, comparison.synthetic, cfg.metrics.noise_levels, cfg.metrics.seed)

    reports, figs = out_dir / "reports", out_dir / "plots"
    art = {}
    header, body = comparison.table()
    art["head_comparison"] = write_text(format_table(header, body, "{:.3f}"), reports / "head_comparison.txt")
    write_json({"runs": [o.to_dict() for o in comparison.outcomes],
                "directional": comparison.directional()}, reports / "head_comparison.json")
    header, body = sweep_table(rows)
    art["sweep"] = write_text(format_table(header, body, "{:.2f}"), reports / "lambda_sweep.txt")
    write_json([asdict(r) for r in rows], reports / "lambda_sweep.json")
    art["sweep_plot"] = plots.table_figure(header, body, figs / "lambda_sweep.png", "lambda_cls sweep")
    write_json({h: [list(p) for p in c] for h, c in curves.items()}, reports / "noise_curve.json")
    art["noise_curve"] = plots.noise_curve(curves, figs / "noise_curve.png")
    confs = {o.head: o.report.confidence for o in reversed(comparison.outcomes)
             if o.report is not None and o.seed == seeds[0]}
    write_json(confs, reports / "confidence.json")
    art["confidence"] = plots.confidence_histogram(confs, figs / "confidence_histogram.png")
    return StudyResult(comparison, rows, curves, art)


def with_head(cfg: RunConfig, head: str) -> RunConfig:
    """Switch heads, clearing margin settings a soft-max head cannot take.

    Switching a soft-max configuration to AAM restores the default margin.
    """
    if head == cfg.head.kind:
        return cfg
    if head == SOFTMAX:
        return cfg.with_overrides({"head.kind": SOFTMAX, "head.margin": 0.0, "head.fake_margin": None})
    return cfg.with_overrides({"head.kind": head, "head.margin": DEFAULT_MARGIN})


__all__ = [
    "EvalContext", "RunOutcome", "RunCache", "HeadComparison", "StudyResult",
    "build_context", "evaluate_generator", "train_and_evaluate", "cached_run",
    "compare_heads", "sweep_lambda", "sweep_table", "noise_curves", "run_study",
    "package_fingerprint", "run_key", "with_head",
]
