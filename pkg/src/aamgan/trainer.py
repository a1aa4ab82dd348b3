"""Alternating discriminator / generator optimisation.

One :func:`train_step` runs ``d_steps`` discriminator updates followed by a
single generator update on the same batch. Target classes are a random
permutation of the batch's own labels. Everything random inside the loop
draws from ``GanState.rng`` so that a checkpoint fully determines the rest
of the run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import torch
import torch.nn.functional as F

from .config import WGAN_GP, HeadConfig, ModelConfig, TrainConfig
from .errors import IOFailure, NonFiniteLoss
from .heads import ClassifierHead
from .losses import (
    LossBreakdown,
    LossComponents,
    adversarial_terms,
    discriminator_objective,
    generator_adversarial_term,
    generator_objective,
    gradient_penalty,
    reconstruction_loss,
    total_losses,
)
from .nets import Discriminator, Generator

log = logging.getLogger(__name__)

ADAM = "adam"
SGD = "sgd"


def lr_at(iteration, config: TrainConfig):
    """Step-decayed learning rate: ``lr0 * factor ** (iteration // every)``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.lr_initial * config.lr_decay_factor ** (iteration // config.lr_decay_every)


def build_networks(model: ModelConfig, head: HeadConfig):
    gen = Generator(model.num_classes, model.image_size, model.g_conv_dim, model.g_down, model.g_res_blocks)
    disc = Discriminator(model.image_size, model.d_conv_dim, model.d_strided, model.embed_dim)
    cls_head = ClassifierHead(head.kind, model.embed_dim, model.num_classes, head.scale, head.margin)
    return gen, disc, cls_head


@dataclass
class GanState:
    model_cfg: ModelConfig
    head_cfg: HeadConfig
    train_cfg: TrainConfig
    gen: Generator
    disc: Discriminator
    head: ClassifierHead
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    iteration: int = 0
    optimizer: str = ADAM

    def named_modules(self):
        return (("G", self.gen), ("D", self.disc), ("head", self.head))

    def d_parameters(self):
        return list(self.disc.parameters()) + list(self.head.parameters())

    def parameter_digest(self):
        h = hashlib.sha256()
        for prefix, module in self.named_modules():
            for name, t in module.state_dict().items():
                h.update(f"{prefix}.{name}".encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _make_optimizer(kind, params, cfg: TrainConfig):
    if kind == ADAM:
        return torch.optim.Adam(params, lr=cfg.lr_initial, betas=(cfg.beta1, cfg.beta2))
    if kind == SGD:
        return torch.optim.SGD(params, lr=cfg.lr_initial)
    raise ValueError(f"unknown optimizer {kind!r}")


def build_state(model: ModelConfig, head: HeadConfig, train: TrainConfig, optimizer=ADAM,
                dtype=torch.float32) -> GanState:
    """Fresh networks and optimisers initialised from ``train.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train.seed)
        gen, disc, cls_head = build_networks(model, head)
    gen, disc, cls_head = gen.to(dtype), disc.to(dtype), cls_head.to(dtype)
    cls_head.project_()
    opt_g = _make_optimizer(optimizer, gen.parameters(), train)
    opt_d = _make_optimizer(optimizer, list(disc.parameters()) + list(cls_head.parameters()), train)
    rng = torch.Generator().manual_seed(train.seed + 1)
    return GanState(model, head, train, gen, disc, cls_head, opt_g, opt_d, rng, 0, optimizer)


def _codes(labels, num_classes, dtype):
    return F.one_hot(labels, num_classes).to(dtype)


def sample_targets(state: GanState, y):
    perm = torch.randperm(y.shape[0], generator=state.rng)
    return y[perm]


def _check(name, value, iteration):
    if not math.isfinite(float(value.detach() if isinstance(value, torch.Tensor) else value)):
        raise NonFiniteLoss(name, iteration)


def d_loss(state: GanState, x, y, c):
    """Discriminator objective for one batch; returns ``(total, parts)``.

    The fake batch is generated without tracking gradients, so the total
    only depends on discriminator and head parameters.
    """
    cfg, C = state.train_cfg, state.model_cfg.num_classes
    with torch.no_grad():
        fake = state.gen(x, _codes(c, C, x.dtype))
    if cfg.adversarial == WGAN_GP:
        logit_real, emb_real = state.disc.score(x)
        logit_fake, _ = state.disc.score(fake)
        adv = logit_real.mean() - logit_fake.mean()
        gp = gradient_penalty(state.disc, x, fake, state.rng)
    else:
        p_real, emb_real = state.disc(x)
        p_fake, _ = state.disc(fake)
        d_term, _ = adversarial_terms(p_real, p_fake, cfg.g_adversarial)
        adv = -d_term
        gp = torch.zeros((), dtype=x.dtype)
    cls_real = state.head(emb_real, y)
    total = discriminator_objective(adv, cls_real, cfg.loss_weights, gp, cfg.lambda_gp)
    return total, {"adv": adv, "cls_real": cls_real, "gp": gp}


def g_loss(state: GanState, x, y, c):
    """Generator objective for one batch; returns ``(total, parts)``."""
    cfg, C = state.train_cfg, state.model_cfg.num_classes
    fake = state.gen(x, _codes(c, C, x.dtype))
    if cfg.adversarial == WGAN_GP:
        logit_fake, emb_fake = state.disc.score(fake)
        adv_g = -logit_fake.mean()
    else:
        p_fake, emb_fake = state.disc(fake)
        adv_g = generator_adversarial_term(p_fake, cfg.g_adversarial)
    cls_fake = state.head(emb_fake, c, margin=state.head_cfg.fake_margin)
    rec = reconstruction_loss(x, state.gen(fake, _codes(y, C, x.dtype)))
    total = generator_objective(adv_g, cls_fake, rec, cfg.loss_weights)
    return total, {"adv_g": adv_g, "cls_fake": cls_fake, "rec": rec}


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def discriminator_step(state: GanState, x, y, c):
    lr = lr_at(state.iteration, state.train_cfg)
    total, parts = d_loss(state, x, y, c)
    for name, v in parts.items():
        _check(name, v, state.iteration)
    _check("total_d", total, state.iteration)
    state.opt_d.zero_grad(set_to_none=True)
    total.backward()
    _set_lr(state.opt_d, lr)
    state.opt_d.step()
    state.head.project_()
    return {k: float(v.detach()) for k, v in parts.items()}


def generator_step(state: GanState, x, y, c):
    lr = lr_at(state.iteration, state.train_cfg)
    frozen = state.d_parameters()
    for p in frozen:
        p.requires_grad_(False)
    try:
        total, parts = g_loss(state, x, y, c)
        for name, v in parts.items():
            _check(name, v, state.iteration)
        _check("total_g", total, state.iteration)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        _set_lr(state.opt_g, lr)
        state.opt_g.step()
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return {k: float(v.detach()) for k, v in parts.items()}


def train_step(state: GanState, x, y, update_g=True) -> LossBreakdown:
    """One alternating update on batch ``(x, y)``; advances the iteration.

    With ``update_g=False`` the generator is left untouched and its terms
    are reported as zeros.
    """
    c = sample_targets(state, y)
    for _ in range(state.train_cfg.d_steps):
        d_parts = discriminator_step(state, x, y, c)
    if update_g:
        g_parts = generator_step(state, x, y, c)
    else:
        g_parts = {"adv_g": 0.0, "cls_fake": 0.0, "rec": 0.0}
    state.iteration += 1
    parts = LossComponents(d_parts["adv"], g_parts["adv_g"], d_parts["cls_real"],
                           g_parts["cls_fake"], g_parts["rec"], d_parts["gp"])
    lambda_gp = state.train_cfg.lambda_gp if state.train_cfg.adversarial == WGAN_GP else 0.0
    return total_losses(parts, state.train_cfg.loss_weights, lambda_gp)


def sample_batch(state: GanState, x_all, y_all):
    idx = torch.randint(x_all.shape[0], (state.train_cfg.batch_size,), generator=state.rng)
    return x_all[idx], y_all[idx]


@dataclass
class TrainResult:
    state: GanState
    history: List[dict] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    @property
    def final_checkpoint(self):
        return self.checkpoints[-1] if self.checkpoints else None


class MetricsLog:
    """Writes one structured row per logging interval (text + JSON lines)."""

    def __init__(self, out_dir: Optional[Path]):
        self.text = self.jsonl = None
        if out_dir is not None:
            try:
                out_dir.mkdir(parents=True, exist_ok=True)
                self.text = open(out_dir / "log.txt", "a", encoding="utf-8")
                self.jsonl = open(out_dir / "metrics.jsonl", "a", encoding="utf-8")
            except OSError as exc:
                raise IOFailure(f"cannot open logs in {out_dir}: {exc}") from exc

    def write(self, row):
        if self.text is None:
            return
        self.text.write(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                 for k, v in row.items()) + "\n")
        self.jsonl.write(json.dumps(row, sort_keys=True) + "\n")

    def close(self):
        for fh in (self.text, self.jsonl):
            if fh is not None:
                fh.close()


def run_training(state: GanState, dataset, out_dir=None, progress: Optional[Callable] = None) -> TrainResult:
    """Iterate :func:`train_step` until ``train_cfg.total_iterations``.

    ``state`` may be fresh or loaded from a checkpoint (resume). When
    ``out_dir`` is given, checkpoints go to ``out_dir/checkpoints`` on the
    configured cadence plus a final one, and loss rows to ``log.txt`` /
    ``metrics.jsonl``.
    """
    from .checkpoint import save_checkpoint

    cfg = state.train_cfg
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.num_classes != state.model_cfg.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model expects "
                         f"{state.model_cfg.num_classes}")
    x_all, y_all = dataset.tensors()
    x_all = x_all.to(next(state.gen.parameters()).dtype)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out_dir / "checkpoints" if out_dir is not None else None
    result = TrainResult(state)
    metrics = MetricsLog(out_dir)
    try:
        while state.iteration < cfg.total_iterations:
            x, y = sample_batch(state, x_all, y_all)
            it = state.iteration
            losses = train_step(state, x, y)
            row = {"iteration": it, "lr": lr_at(it, cfg), **losses.as_row()}
            result.history.append(row)
            if it % cfg.log_every == 0 or state.iteration == cfg.total_iterations:
                metrics.write(row)
            if progress is not None:
                progress(row)
            if ckpt_dir is not None and state.iteration % cfg.checkpoint_every == 0 \
                    and state.iteration < cfg.total_iterations:
                result.checkpoints.append(save_checkpoint(state, ckpt_dir / f"iter_{state.iteration:07d}.ckpt"))
        if ckpt_dir is not None:
            result.checkpoints.append(save_checkpoint(state, ckpt_dir / "final.ckpt"))
    finally:
        metrics.close()
    return result
