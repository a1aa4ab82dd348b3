"""Small residual CNN used as the evaluation classifier and FID feature extractor."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

TRAINED_ON_REAL = "trained-on-real"
TRAINED_ON_SYNTHETIC = "trained-on-synthetic"
TRAINED_ON_NOISY = "trained-on-noisy"
PROVENANCES = (TRAINED_ON_REAL, TRAINED_ON_SYNTHETIC, TRAINED_ON_NOISY)


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 2e-3
    width: int = 16
    seed: int = 0

    @classmethod
    def from_metrics(cls, m):
        return cls(m.classifier_epochs, m.classifier_batch_size, m.classifier_lr, m.classifier_width, m.seed)


class _Block(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + (x if self.skip is None else self.skip(x)))


class SmallResNet(nn.Module):
    def __init__(self, num_classes, width=16):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.stages = nn.Sequential(
            _Block(width, width, 1),
            _Block(width, 2 * width, 2),
            _Block(2 * width, 4 * width, 2),
        )
        self.fc = nn.Linear(4 * width, num_classes)

    def features(self, x):
        return self.stages(self.stem(x)).mean(dim=(2, 3))

    def forward(self, x):
        return self.fc(self.features(x))


def _nchw(images):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


class EvalClassifier:
    """Trained classifier plus where its training data came from."""

    def __init__(self, net: SmallResNet, class_names, provenance, config: ClassifierConfig):
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        self.net = net.eval()
        self.class_names = tuple(class_names)
        self.provenance = provenance
        self.config = config

    @property
    def num_classes(self):
        return len(self.class_names)

    @torch.no_grad()
    def _run(self, images, fn, batch_size=500):
        outs = [fn(_nchw(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
        return torch.cat(outs).double().numpy() if outs else np.zeros((0, self.num_classes))

    def logits(self, images):
        return self._run(images, self.net)

    def predict_proba(self, images):
        z = self.logits(images)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, images):
        return self.logits(images).argmax(axis=1)

    def features(self, images):
        return self._run(images, self.net.features)

    def accuracy(self, dataset):
        if len(dataset) == 0:
            return float("nan")
        return float((self.predict(dataset.images) == dataset.labels).mean())

    def identity(self):
        """Digest of architecture and weights (pins the FID extractor)."""
        h = hashlib.sha256(f"SmallResNet(w={self.config.width},C={self.num_classes})".encode())
        for name, t in self.net.state_dict().items():
            h.update(name.encode())
            h.update(t.cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


def train_classifier(dataset, config: ClassifierConfig, provenance=TRAINED_ON_REAL) -> EvalClassifier:
    """Train a fresh classifier for a fixed epoch budget, deterministically."""
    if len(dataset) == 0:
        raise ValueError("cannot train a classifier on an empty set")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = SmallResNet(dataset.num_classes, config.width)
    gen = torch.Generator().manual_seed(config.seed + 7)
    x_all = _nchw(dataset.images)
    y_all = torch.from_numpy(np.array(dataset.labels))
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    steps_per_epoch = max(1, -(-len(dataset) // config.batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=config.epochs * steps_per_epoch)
    net.train()
    for _ in range(config.epochs):
        order = torch.randperm(len(dataset), generator=gen)
        for start in range(0, len(dataset), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            loss = F.cross_entropy(net(x_all[idx]), y_all[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
    return EvalClassifier(net, dataset.class_names, provenance, config)
