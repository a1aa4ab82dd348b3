"""Auxiliary classifier heads for the discriminator.

Two interchangeable heads score a discriminator embedding against ``C``
class weight vectors:

* ``softmax``: affine logits ``W_j . phi + b_j`` followed by cross-entropy.
* ``aam``: additive angular margin. Features and weight columns are
  normalised onto the unit hypersphere, logits are ``s * cos(theta_j)`` and
  the target class logit is replaced by ``s * cos(theta_y + m)`` during
  loss computation.

Both losses are computed together with their exact analytic gradients.
:class:`ClassifierHead` wires those gradients into autograd so the trainer
never differentiates through the head numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .errors import InvalidLabel, NearZeroVector

SOFTMAX = "softmax"
AAM = "aam"
HEAD_KINDS = (SOFTMAX, AAM)

EPS_NORM = 1e-12
EPS_COS = 1e-7

DEFAULT_SCALE = 30.0
DEFAULT_MARGIN = 0.35


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    arr = np.asarray(x)
    if dtype is None:
        dtype = torch.float64 if arr.dtype.kind == "f" or arr.dtype.kind == "i" else None
    return torch.as_tensor(arr, dtype=dtype)


def _as_batch(e):
    e = _as_tensor(e)
    if e.dim() == 1:
        return e.unsqueeze(0), True
    if e.dim() != 2:
        raise ValueError(f"embeddings must be 1-D or 2-D, got shape {tuple(e.shape)}")
    return e, False


def _check_finite(t, what):
    if not torch.isfinite(t).all():
        raise ValueError(f"{what} contains NaN or Inf")


def _check_labels(labels, batch_size, num_classes):
    labels = torch.as_tensor(np.asarray(labels) if not isinstance(labels, torch.Tensor) else labels)
    labels = labels.reshape(-1)
    if labels.dtype.is_floating_point or labels.dtype == torch.bool:
        raise InvalidLabel(f"labels must be integers, got {labels.dtype}")
    labels = labels.long()
    if labels.numel() != batch_size:
        raise InvalidLabel(f"expected {batch_size} labels, got {labels.numel()}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0].item()
        raise InvalidLabel(f"label {bad} outside [0, {num_classes})")
    return labels


def normalize_to_unit(v, dim=-1):
    """Scale ``v`` to unit Euclidean norm along ``dim``.

    Raises :class:`NearZeroVector` when any slice has norm ``<= 1e-12``;
    there is no fallback direction for a degenerate embedding.
    """
    v = _as_tensor(v)
    _check_finite(v, "vector")
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if (norm <= EPS_NORM).any():
        raise NearZeroVector(f"vector norm {norm.min().item():.3e} <= {EPS_NORM}")
    return v / norm


@dataclass(frozen=True)
class HeadParams:
    """Immutable snapshot of a head.

    ``weight`` is ``d x C`` (one column per class). For ``kind='aam'`` the
    bias is identically zero and ``margin`` is the additive angle in
    radians; for ``kind='softmax'`` the margin must be zero and ``scale`` is
    unused.
    """

    weight: torch.Tensor
    bias: torch.Tensor
    scale: float = DEFAULT_SCALE
    margin: float = DEFAULT_MARGIN
    kind: str = AAM

    def __post_init__(self):
        w = _as_tensor(self.weight)
        object.__setattr__(self, "weight", w)
        b = self.bias
        b = torch.zeros(w.shape[1], dtype=w.dtype) if b is None else _as_tensor(b, w.dtype)
        object.__setattr__(self, "bias", b)
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if w.dim() != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise ValueError(f"weight must be a non-empty d x C matrix, got {tuple(w.shape)}")
        if b.shape != (w.shape[1],):
            raise ValueError(f"bias must have length {w.shape[1]}, got {tuple(b.shape)}")
        _check_finite(w, "weight matrix")
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not 0.0 <= self.margin < math.pi:
            raise ValueError(f"margin must lie in [0, pi), got {self.margin}")
        if self.kind == SOFTMAX and self.margin != 0.0:
            raise ValueError("softmax head requires margin = 0")
        if self.kind == AAM and bool((b != 0).any()):
            raise ValueError("aam head requires a zero bias")

    @property
    def embed_dim(self):
        return self.weight.shape[0]

    @property
    def num_classes(self):
        return self.weight.shape[1]

    def projected(self):
        """Copy with unit-norm weight columns (identity for softmax heads)."""
        if self.kind != AAM:
            return self
        return HeadParams(normalize_to_unit(self.weight, dim=0), self.bias,
                          self.scale, self.margin, self.kind)

    @classmethod
    def random(cls, kind, embed_dim, num_classes, scale=DEFAULT_SCALE,
               margin=DEFAULT_MARGIN, generator=None, dtype=torch.float64):
        w = torch.randn(embed_dim, num_classes, generator=generator, dtype=dtype)
        if kind == AAM:
            return cls(normalize_to_unit(w, dim=0), None, scale, margin, AAM)
        return cls(w / math.sqrt(embed_dim), None, 1.0, 0.0, SOFTMAX)


class HeadLoss(NamedTuple):
    loss: torch.Tensor
    grad_embeddings: torch.Tensor
    grad_weight: torch.Tensor
    grad_bias: Optional[torch.Tensor]


# ---------------------------------------------------------------------------
# analytic cores: plain tensors in, (loss, grads) out


def _unit_rows(emb):
    norms = torch.linalg.vector_norm(emb, dim=1, keepdim=True)
    if (norms <= EPS_NORM).any():
        raise NearZeroVector(f"embedding norm {norms.min().item():.3e} <= {EPS_NORM}")
    return emb / norms, norms


def _unit_cols(weight):
    norms = torch.linalg.vector_norm(weight, dim=0, keepdim=True)
    if (norms <= EPS_NORM).any():
        raise NearZeroVector(f"weight column norm {norms.min().item():.3e} <= {EPS_NORM}")
    return weight / norms, norms


def _clamped_cosines(emb, weight):
    u, e_norm = _unit_rows(emb)
    w_hat, w_norm = _unit_cols(weight)
    raw = u @ w_hat
    lo, hi = -1.0 + EPS_COS, 1.0 - EPS_COS
    cos = raw.clamp(lo, hi)
    return cos, (raw > lo) & (raw < hi), u, e_norm, w_hat, w_norm


def _aam_core(emb, weight, labels, scale, margin):
    batch = emb.shape[0]
    rows = torch.arange(batch)
    cos, inside, u, e_norm, w_hat, w_norm = _clamped_cosines(emb, weight)

    cos_y = cos[rows, labels]
    sin_y = torch.sqrt(1.0 - cos_y * cos_y)
    cos_m, sin_m = math.cos(margin), math.sin(margin)
    # cos(theta + m) expanded; evaluated literally even past theta + m > pi
    target = cos_y * cos_m - sin_y * sin_m

    logits = scale * cos
    logits[rows, labels] = scale * target
    lse = torch.logsumexp(logits, dim=1)
    loss = (lse - logits[rows, labels]).mean()

    g = torch.softmax(logits, dim=1)
    g[rows, labels] -= 1.0
    g /= batch
    d_cos = scale * g
    d_cos[rows, labels] *= cos_m + cos_y / sin_y * sin_m
    d_cos = d_cos * inside

    d_u = d_cos @ w_hat.T
    d_what = u.T @ d_cos
    grad_emb = (d_u - u * (u * d_u).sum(dim=1, keepdim=True)) / e_norm
    grad_w = (d_what - w_hat * (w_hat * d_what).sum(dim=0, keepdim=True)) / w_norm
    return loss, grad_emb, grad_w


def _softmax_core(emb, weight, bias, labels):
    batch = emb.shape[0]
    rows = torch.arange(batch)
    logits = emb @ weight + bias
    lse = torch.logsumexp(logits, dim=1)
    loss = (lse - logits[rows, labels]).mean()

    g = torch.softmax(logits, dim=1)
    g[rows, labels] -= 1.0
    g /= batch
    return loss, g @ weight.T, emb.T @ g, g.sum(dim=0)


def _prepare(batch, labels, p, kind):
    if p.kind != kind:
        raise ValueError(f"expected a {kind} head, got {p.kind}")
    emb, _ = _as_batch(batch)
    if emb.shape[0] == 0:
        raise ValueError("batch is empty")
    if emb.shape[1] != p.embed_dim:
        raise ValueError(f"embedding dim {emb.shape[1]} != head dim {p.embed_dim}")
    _check_finite(emb, "embedding")
    emb = emb.to(p.weight.dtype)
    return emb, _check_labels(labels, emb.shape[0], p.num_classes)


def aam_loss(batch, labels, p: HeadParams, margin=None) -> HeadLoss:
    """Mean additive-angular-margin cross-entropy with exact gradients.

    ``margin`` overrides ``p.margin`` for this call only (used for the
    fake-image term and for ablations). Gradients are taken with respect
    to the raw embeddings and the raw weight matrix; both are normalised
    inside the loss.
    """
    emb, labels = _prepare(batch, labels, p, AAM)
    m = p.margin if margin is None else float(margin)
    if not 0.0 <= m < math.pi:
        raise ValueError(f"margin must lie in [0, pi), got {m}")
    loss, ge, gw = _aam_core(emb, p.weight, labels, p.scale, m)
    return HeadLoss(loss, ge, gw, None)


def softmax_loss(batch, labels, p: HeadParams) -> HeadLoss:
    emb, labels = _prepare(batch, labels, p, SOFTMAX)
    return HeadLoss(*_softmax_core(emb, p.weight, p.bias, labels))


def cosine_angles(e, p: HeadParams):
    """Angles ``theta_j`` in ``[0, pi]`` between ``e`` and each class column."""
    if p.kind != AAM:
        raise ValueError("cosine_angles needs an aam head")
    emb, single = _as_batch(e)
    _check_finite(emb, "embedding")
    cos = _clamped_cosines(emb.to(p.weight.dtype), p.weight)[0]
    theta = torch.arccos(cos)
    return theta[0] if single else theta


def margin_free_logits(e, p: HeadParams):
    emb, single = _as_batch(e)
    _check_finite(emb, "embedding")
    emb = emb.to(p.weight.dtype)
    if p.kind == AAM:
        logits = p.scale * _clamped_cosines(emb, p.weight)[0]
    else:
        logits = emb @ p.weight + p.bias
    return logits[0] if single else logits


def predict(e, p: HeadParams):
    """Return ``(argmax class, probabilities)``; the margin is never applied."""
    logits = margin_free_logits(e, p)
    probs = torch.softmax(logits, dim=-1)
    return torch.argmax(probs, dim=-1), probs


# ---------------------------------------------------------------------------
# autograd integration


class _HeadLossFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, emb, weight, bias, labels, kind, scale, margin):
        if kind == AAM:
            loss, ge, gw = _aam_core(emb, weight, labels, scale, margin)
            gb = torch.zeros_like(bias)
        else:
            loss, ge, gw, gb = _softmax_core(emb, weight, bias, labels)
        ctx.save_for_backward(ge, gw, gb)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        ge, gw, gb = ctx.saved_tensors
        return grad_out * ge, grad_out * gw, grad_out * gb, None, None, None, None


class ClassifierHead(nn.Module):
    """Trainable head; ``forward(emb, labels)`` returns the mean loss."""

    def __init__(self, kind, embed_dim, num_classes, scale=DEFAULT_SCALE, margin=DEFAULT_MARGIN):
        super().__init__()
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.scale = float(scale) if kind == AAM else 1.0
        self.margin = float(margin) if kind == AAM else 0.0
        self.weight = nn.Parameter(torch.empty(embed_dim, num_classes))
        if kind == AAM:
            self.register_buffer("bias", torch.zeros(num_classes))
        else:
            self.bias = nn.Parameter(torch.zeros(num_classes))
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.embed_dim)
        nn.init.uniform_(self.weight, -bound, bound)
        if self.kind == SOFTMAX:
            nn.init.zeros_(self.bias)
        self.project_()

    @torch.no_grad()
    def project_(self):
        """Renormalise AAM weight columns onto the unit sphere in place."""
        if self.kind == AAM:
            self.weight.div_(torch.linalg.vector_norm(self.weight, dim=0, keepdim=True))

    def forward(self, emb, labels, margin=None):
        m = self.margin if margin is None else float(margin)
        if self.kind == SOFTMAX:
            m = 0.0
        labels = _check_labels(labels, emb.shape[0], self.num_classes)
        return _HeadLossFn.apply(emb, self.weight, self.bias, labels, self.kind, self.scale, m)

    def logits(self, emb):
        if self.kind == AAM:
            return self.scale * _clamped_cosines(emb, self.weight)[0]
        return emb @ self.weight + self.bias

    def snapshot(self) -> HeadParams:
        w = self.weight.detach().clone()
        return HeadParams(w, self.bias.detach().clone(), self.scale if self.kind == AAM else 1.0,
                          self.margin, self.kind)

    def extra_repr(self):
        return f"kind={self.kind}, d={self.embed_dim}, C={self.num_classes}, s={self.scale}, m={self.margin}"
