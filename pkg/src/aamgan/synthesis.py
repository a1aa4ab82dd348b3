"""Translate real images into labeled synthetic sets with a trained generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import LabeledDataset
from .losses import reconstruction_loss

ALL_CLASSES = "all-classes"
FIXED_CLASS = "fixed-class"
PERMUTED = "permuted"
POLICIES = (ALL_CLASSES, FIXED_CLASS, PERMUTED)


@dataclass(frozen=True)
class SyntheticSet:
    """Generated images labeled by their generation targets."""

    dataset: LabeledDataset
    source_index: np.ndarray
    source_label: np.ndarray


@torch.no_grad()
def translate(gen, images, targets, num_classes, batch_size=256):
    """Run ``G(x, one_hot(target))`` over (N, H, W, 3) images in batches."""
    dtype = next(gen.parameters()).dtype
    out = np.empty(np.shape(images), dtype=np.float32)
    targets = torch.tensor(np.asarray(targets), dtype=torch.long)
    was_training = gen.training
    gen.eval()
    try:
        for start in range(0, len(images), batch_size):
            x = torch.tensor(np.asarray(images[start:start + batch_size])).permute(0, 3, 1, 2)
            c = F.one_hot(targets[start:start + batch_size], num_classes).to(dtype)
            y = gen(x.to(dtype), c)
            out[start:start + len(x)] = y.permute(0, 2, 3, 1).float().numpy()
    finally:
        gen.train(was_training)
    return out


def _sources(dataset, max_sources):
    if max_sources and max_sources < len(dataset):
        return dataset.subset(np.arange(max_sources))
    return dataset


def synthesize(gen, dataset: LabeledDataset, policy=ALL_CLASSES, fixed_class=None, seed=0,
               max_sources=0, batch_size=256) -> SyntheticSet:
    """Build a synthetic set from ``dataset``'s images.

    ``all-classes`` emits one translation per (source, class) pair in
    source-major order; ``fixed-class`` sends every source to
    ``fixed_class``; ``permuted`` uses a seeded permutation of the source
    labels as targets.
    """
    src = _sources(dataset, max_sources)
    n, c = len(src), src.num_classes
    if policy == ALL_CLASSES:
        index = np.repeat(np.arange(n), c)
        targets = np.tile(np.arange(c), n)
    elif policy == FIXED_CLASS:
        if fixed_class is None or not 0 <= fixed_class < c:
            raise ValueError(f"fixed-class policy needs a class in [0, {c})")
        index = np.arange(n)
        targets = np.full(n, fixed_class)
    elif policy == PERMUTED:
        index = np.arange(n)
        targets = np.random.default_rng(seed).permutation(src.labels)
    else:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    images = translate(gen, src.images[index], targets, c, batch_size)
    return SyntheticSet(LabeledDataset(images, targets, src.class_names), index, src.labels[index])


@torch.no_grad()
def reconstruction_error(gen, dataset: LabeledDataset, max_sources=0, batch_size=256):
    """Mean L1 between ``x`` and ``G(G(x, y), y)`` with ``y`` the source label."""
    src = _sources(dataset, max_sources)
    once = translate(gen, src.images, src.labels, src.num_classes, batch_size)
    back = translate(gen, once, src.labels, src.num_classes, batch_size)
    return float(reconstruction_loss(torch.from_numpy(np.array(src.images)), torch.from_numpy(back)))
