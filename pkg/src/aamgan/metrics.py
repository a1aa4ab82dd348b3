"""Evaluation battery: GAN-train, GAN-test, FID, confidence, noise and augmentation studies."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .classifier import (
    TRAINED_ON_NOISY,
    TRAINED_ON_REAL,
    TRAINED_ON_SYNTHETIC,
    ClassifierConfig,
    EvalClassifier,
    train_classifier,
)
from .datasets import LabeledDataset, check_compatible, inject_label_noise
from .errors import ClassMismatch, DimensionMismatch, EmptySet, IOFailure, NumericalFailure, ProvenanceError

CONFIDENCE_BINS = 20
SQRT_RESIDUAL_TOL = 1e-3
_NEG_EIG_TOL = 1e-6


def _require_nonempty(ds, what):
    if ds is None or len(ds) == 0:
        raise EmptySet(f"{what} is empty")


def _require_same_classes(a, b):
    if not check_compatible(a, b):
        raise ClassMismatch(f"class vocabularies differ: {a.class_names} vs {b.class_names}")


def _require_provenance(clf: EvalClassifier, allowed):
    if clf.provenance not in allowed:
        raise ProvenanceError(f"classifier is {clf.provenance}; expected one of {allowed}")


# ---------------------------------------------------------------------------
# classifier-based scores


def gan_train(synthetic: LabeledDataset, real_test: LabeledDataset, config: ClassifierConfig) -> float:
    """Accuracy on real test data of a classifier trained on ``synthetic``."""
    _require_nonempty(synthetic, "synthetic set")
    _require_nonempty(real_test, "real test set")
    _require_same_classes(synthetic, real_test)
    clf = train_classifier(synthetic, config, TRAINED_ON_SYNTHETIC)
    return clf.accuracy(real_test)


def gan_test(classifier: EvalClassifier, synthetic: LabeledDataset) -> float:
    """Accuracy of a real-trained classifier against generation targets.

    Classifiers trained on label-noised real data are accepted too; the
    noise curve relies on that.
    """
    _require_provenance(classifier, (TRAINED_ON_REAL, TRAINED_ON_NOISY))
    _require_nonempty(synthetic, "synthetic set")
    if tuple(synthetic.class_names) != classifier.class_names:
        raise ClassMismatch("classifier and synthetic set use different classes")
    return classifier.accuracy(synthetic)


def per_class_accuracy(classifier: EvalClassifier, dataset: LabeledDataset) -> List[float]:
    pred = classifier.predict(dataset.images)
    out = []
    for k in range(dataset.num_classes):
        mask = dataset.labels == k
        out.append(float((pred[mask] == k).mean()) if mask.any() else float("nan"))
    return out


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64).reshape(mean.size, mean.size)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self):
        return self.mean.size

    @classmethod
    def from_features(cls, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise EmptySet("need at least two feature vectors")
        n, f = feats.shape
        if n <= f:
            warnings.warn(f"{n} samples for {f}-dimensional features; covariance is rank-deficient",
                          RuntimeWarning, stacklevel=2)
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False).reshape(f, f), n)


def _psd_sqrt(mat, name):
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    if w.size and w.min() < -_NEG_EIG_TOL * max(1.0, abs(w).max()):
        warnings.warn(f"{name} has a negative eigenvalue {w.min():.3g}; clamped", RuntimeWarning, stacklevel=3)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussian fits.

    The trace of ``(Sa Sb)^(1/2)`` is taken from the symmetric matrix
    ``M = Sa^(1/2) Sb Sa^(1/2)``, which is similar to ``Sa Sb``; its
    square root comes from an eigendecomposition with negative eigenvalues
    clamped to zero.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"feature dimensions differ: {a.dim} vs {b.dim}")
    try:
        root_a = _psd_sqrt(a.cov, "covariance a")
        m = root_a @ b.cov @ root_a
        m = 0.5 * (m + m.T)
        root_m = _psd_sqrt(m, "covariance product")
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigendecomposition failed: {exc}") from exc
    scale = np.linalg.norm(m)
    if not np.all(np.isfinite(root_m)):
        raise NumericalFailure("non-finite matrix square root")
    if scale > 0:
        residual = np.linalg.norm(root_m @ root_m - m) / scale
        if residual > SQRT_RESIDUAL_TOL:
            raise NumericalFailure(f"matrix square root residual {residual:.3g} exceeds {SQRT_RESIDUAL_TOL}")
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(root_m)
    return float(max(value, 0.0))


@dataclass(frozen=True)
class FidResult:
    value: float
    extractor: str
    real_count: int
    fake_count: int


def fid(real_images, fake_images, extractor: EvalClassifier) -> FidResult:
    """FID in the penultimate feature space of ``extractor``."""
    a = FeatureStats.from_features(extractor.features(real_images))
    b = FeatureStats.from_features(extractor.features(fake_images))
    return FidResult(frechet_distance(a, b), extractor.identity(), a.count, b.count)


# ---------------------------------------------------------------------------
# confidence


@dataclass(frozen=True)
class ConfidenceReport:
    counts: List[int]
    edges: List[float]
    mean: float
    mass_above_09: float
    count: int


def confidence_histogram(scores, bins=CONFIDENCE_BINS):
    scores = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(scores, bins=edges)
    return counts, edges


def confidence_report(classifier: EvalClassifier, synthetic: LabeledDataset) -> ConfidenceReport:
    """Distribution of the probability assigned to each image's target class."""
    _require_provenance(classifier, (TRAINED_ON_REAL,))
    _require_nonempty(synthetic, "synthetic set")
    probs = classifier.predict_proba(synthetic.images)
    scores = probs[np.arange(len(synthetic)), synthetic.labels]
    counts, edges = confidence_histogram(scores)
    return ConfidenceReport([int(c) for c in counts], [float(e) for e in edges], float(scores.mean()),
                            float((scores > 0.9).mean()), len(scores))


# ---------------------------------------------------------------------------
# studies


def label_noise_curve(dataset: LabeledDataset, levels: Sequence[float], synthetic: LabeledDataset,
                      config: ClassifierConfig, seed=0):
    """``[(p, gan_test accuracy)]`` for classifiers trained on noised labels."""
    levels = [float(p) for p in levels]
    if any(not 0.0 <= p <= 1.0 for p in levels) or levels != sorted(levels):
        raise ValueError("noise levels must be sorted and lie in [0, 1]")
    curve = []
    for p in levels:
        noisy, _ = inject_label_noise(dataset, p, seed)
        clf = train_classifier(noisy, config, TRAINED_ON_REAL if p == 0 else TRAINED_ON_NOISY)
        curve.append((p, gan_test(clf, synthetic)))
    return curve


@dataclass(frozen=True)
class AugmentRow:
    size: int
    real_only: float
    real_plus_synthetic: float

    @property
    def delta(self):
        return self.real_plus_synthetic - self.real_only


def augmentation_study(real_train: LabeledDataset, sizes: Sequence[int], synthetic: Optional[LabeledDataset],
                       real_test: LabeledDataset, config: ClassifierConfig, seed=0) -> List[AugmentRow]:
    """Accuracy with a real subset alone and with the synthetic set added."""
    _require_nonempty(real_test, "real test set")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(real_train))
    rows = []
    for size in sizes:
        if not 0 < size <= len(real_train):
            raise ValueError(f"subset size {size} outside (0, {len(real_train)}]")
        subset = real_train.subset(np.sort(order[:size]))
        base = train_classifier(subset, config, TRAINED_ON_REAL).accuracy(real_test)
        if synthetic is None or len(synthetic) == 0:
            aug = base
        else:
            _require_same_classes(subset, synthetic)
            aug = train_classifier(subset.concat(synthetic), config, TRAINED_ON_SYNTHETIC).accuracy(real_test)
        rows.append(AugmentRow(int(size), base, aug))
    return rows


@dataclass(frozen=True)
class SweepRow:
    lambda_cls: float
    gan_train: float
    gan_test: float
    fid: float


def lambda_sweep(values: Sequence[float], run_one: Callable[[float], "MetricReport"],
                 rows: Optional[List[SweepRow]] = None) -> List[SweepRow]:
    """One full train+eval run per ``lambda_cls`` value.

    ``rows`` (if given) is appended to in place, so completed rows survive
    an exception raised by a later run.
    """
    if any(v <= 0 for v in values):
        raise ValueError("lambda_cls values must be positive")
    rows = [] if rows is None else rows
    for v in values:
        rep = run_one(float(v))
        rows.append(SweepRow(float(v), rep.gan_train, rep.gan_test, rep.fid))
    return rows


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    gan_train: float
    gan_test: float
    fid: float
    confidence: ConfidenceReport
    per_class_gan_test: List[float]
    metadata: Dict[str, object] = field(default_factory=dict)

    def validate(self):
        for name in ("gan_train", "gan_test"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.fid < 0:
            raise ValueError("fid must be non-negative")
        if sum(self.confidence.counts) != self.confidence.count:
            raise ValueError("confidence histogram mass does not match sample count")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["confidence"] = ConfidenceReport(**d["confidence"])
        return cls(**d)

    def to_text(self):
        lines = [
            f"{'metric':<22}{'value':>12}",
            f"{'GAN-train':<22}{100 * self.gan_train:>12.2f}",
            f"{'GAN-test':<22}{100 * self.gan_test:>12.2f}",
            f"{'FID':<22}{self.fid:>12.4f}",
            f"{'mean confidence':<22}{self.confidence.mean:>12.4f}",
            f"{'confidence > 0.9':<22}{self.confidence.mass_above_09:>12.4f}",
        ]
        for k, acc in enumerate(self.per_class_gan_test):
            lines.append(f"{'GAN-test class ' + str(k):<22}{100 * acc:>12.2f}")
        for key in sorted(self.metadata):
            lines.append(f"{key}: {self.metadata[key]}")
        return "\n".join(lines) + "\n"


def write_json(obj, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def write_text(text, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def format_table(header, rows, fmt=None):
    """Fixed-width text table; floats printed with ``fmt`` (default 4 decimals)."""
    fmt = fmt or "{:.4f}"
    cells = [[fmt.format(c) if isinstance(c, float) and math.isfinite(c) else str(c) for c in r] for r in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in cells)) for i, h in enumerate(header)] if cells else \
        [len(str(h)) for h in header]
    out = ["  ".join(str(h).rjust(w) for h, w in zip(header, widths))]
    out += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(out) + "\n"
