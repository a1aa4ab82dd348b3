"""Adversarial, reconstruction and auxiliary classification losses.

The discriminator minimises ``-L_adv + lambda_cls * L_cls_real``. The
generator minimises ``adv_g + lambda_cls * L_cls_fake + lambda_rec * L_rec``
where ``adv_g`` is the non-saturating ``-log D(G(x, c))`` by default.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import DomainError, ShapeMismatch

PROB_EPS = 1e-7

NON_SATURATING = "non-saturating"
SATURATING = "saturating"


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_rec"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossComponents:
    """Raw loss values before weighting.

    ``adv`` is the value of the adversarial objective itself
    (``E log D(x) + E log(1 - D(G(x, c)))``), so the discriminator's term
    is ``-adv``.
    """

    adv: float
    adv_g: float
    cls_real: float
    cls_fake: float
    rec: float
    gp: float = 0.0


@dataclass(frozen=True)
class LossBreakdown:
    adv: float
    adv_g: float
    cls_real: float
    cls_fake: float
    rec: float
    total_d: float
    total_g: float
    gp: float = 0.0

    def as_row(self):
        return asdict(self)


def _check_probs(p, what):
    p = torch.as_tensor(p, dtype=torch.get_default_dtype()) if not isinstance(p, torch.Tensor) else p
    if torch.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise DomainError(f"{what} must be probabilities in [0, 1]")
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def adversarial_terms(d_real, d_fake, g_form=NON_SATURATING):
    """Return ``(d_term, g_term)`` from discriminator probabilities.

    ``d_term = -[mean log d_real + mean log(1 - d_fake)]``. ``g_term`` is
    ``-mean log d_fake`` (non-saturating) or ``mean log(1 - d_fake)`` when
    ``g_form='saturating'`` (the literal minimax form). Inputs are clamped
    to ``[1e-7, 1 - 1e-7]``; anything outside ``[0, 1]`` raises
    :class:`DomainError`.
    """
    real = _check_probs(d_real, "d_real")
    fake = _check_probs(d_fake, "d_fake")
    d_term = -(torch.log(real).mean() + torch.log1p(-fake).mean())
    return d_term, generator_adversarial_term(d_fake, g_form)


def generator_adversarial_term(d_fake, g_form=NON_SATURATING):
    fake = _check_probs(d_fake, "d_fake")
    if g_form == NON_SATURATING:
        return -torch.log(fake).mean()
    if g_form == SATURATING:
        return torch.log1p(-fake).mean()
    raise ValueError(f"unknown generator adversarial form {g_form!r}")


def reconstruction_loss(x, x_rec):
    """Mean absolute error over all elements."""
    if x.shape != x_rec.shape:
        raise ShapeMismatch(f"reconstruction shape {tuple(x_rec.shape)} != input {tuple(x.shape)}")
    return (x - x_rec).abs().mean()


def gradient_penalty(disc, real, fake, generator=None):
    """WGAN-GP penalty on random interpolates of real and fake batches."""
    alpha = torch.rand(real.shape[0], 1, 1, 1, generator=generator, dtype=real.dtype)
    mix = (alpha * real + (1 - alpha) * fake).requires_grad_(True)
    logit, _ = disc.score(mix)
    (grad,) = torch.autograd.grad(logit.sum(), mix, create_graph=True)
    return ((grad.flatten(1).norm(dim=1) - 1) ** 2).mean()


def classification_loss_real(x, y, disc, head, margin=None):
    """Head loss on embeddings of real images against their true labels."""
    _, emb = disc(x)
    return head(emb, y, margin=margin)


def classification_loss_fake(x, c, gen, disc, head, margin=None, num_classes=None):
    """Head loss on ``G(x, c)`` against target labels ``c`` (class indices).

    Parameters of ``disc`` and ``head`` are expected to be frozen by the
    caller when this term drives a generator update.
    """
    num_classes = num_classes or head.num_classes
    codes = F.one_hot(c, num_classes).to(x.dtype)
    fake = gen(x, codes)
    _, emb = disc(fake)
    return head(emb, c, margin=margin)


def discriminator_objective(adv, cls_real, w: LossWeights, gp=0.0, lambda_gp=0.0):
    return -adv + w.lambda_cls * cls_real + lambda_gp * gp


def generator_objective(adv_g, cls_fake, rec, w: LossWeights):
    return adv_g + w.lambda_cls * cls_fake + w.lambda_rec * rec


def total_losses(components: LossComponents, w: LossWeights, lambda_gp=0.0) -> LossBreakdown:
    c = components
    return LossBreakdown(
        c.adv, c.adv_g, c.cls_real, c.cls_fake, c.rec,
        discriminator_objective(c.adv, c.cls_real, w, c.gp, lambda_gp),
        generator_objective(c.adv_g, c.cls_fake, c.rec, w),
        c.gp,
    )
