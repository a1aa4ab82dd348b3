import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from aamgan.checkpoint import load_checkpoint
from aamgan.config import WGAN_GP, HeadConfig, ModelConfig, TrainConfig
from aamgan.datasets import ToySpec, toy_dataset
from aamgan.errors import NonFiniteLoss
from aamgan.heads import AAM, SOFTMAX
from aamgan.losses import adversarial_terms
from aamgan.trainer import (
    SGD,
    build_state,
    d_loss,
    discriminator_step,
    g_loss,
    generator_step,
    lr_at,
    run_training,
    sample_batch,
    train_step,
)

from oracles import rel_err

SMALL = ModelConfig(num_classes=4, g_conv_dim=4, g_res_blocks=1, d_conv_dim=4, embed_dim=16)


def _head(kind=AAM):
    return HeadConfig(kind=kind, margin=0.35 if kind == AAM else 0.0)


@pytest.fixture(scope="module")
def toy4():
    return toy_dataset(ToySpec(4, 12, 32, 0))


def _snapshot(modules):
    return [p.detach().clone() for m in modules for p in m.state_dict().values()]


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def _batch(ds, n=4):
    x, y = ds.tensors()
    return x[:n], y[:n]


# --- learning-rate schedule --------------------------------------------------

def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(cfg.lr_decay_every - 1, cfg) == 1e-4
    assert lr_at(3 * cfg.lr_decay_every, cfg) == pytest.approx(1.25e-5, rel=1e-15)


def test_lr_closed_form_all_indices():
    cfg = TrainConfig(lr_initial=3e-4, lr_decay_every=777, lr_decay_factor=0.9)
    prev = None
    for i in range(100_000):
        lr = lr_at(i, cfg)
        assert lr == 3e-4 * 0.9 ** (i // 777)
        assert lr > 0
        if prev is not None:
            assert lr == prev if i % 777 else lr < prev
        prev = lr


def test_lr_negative_iteration():
    with pytest.raises(ValueError):
        lr_at(-1, TrainConfig())


@settings(max_examples=200)
@given(st.integers(0, 10**7), st.floats(1e-6, 1.0), st.integers(1, 10**5), st.floats(0.01, 1.0))
def test_lr_property(i, lr0, every, factor):
    cfg = TrainConfig(lr_initial=lr0, lr_decay_every=every, lr_decay_factor=factor)
    assert lr_at(i, cfg) == lr0 * factor ** (i // every)


# --- single steps -------------------------------------------------------------

def test_zero_weights_d_step_is_pure_adversarial(toy4):
    state = build_state(SMALL, _head(), TrainConfig(lambda_cls=0.0, lambda_rec=0.0, batch_size=4))
    x, y = _batch(toy4)
    probe = torch.Generator()
    probe.set_state(state.rng.get_state())
    c = y[torch.randperm(4, generator=probe)]
    with torch.no_grad():
        fake = state.gen(x, F.one_hot(c, 4).float())
        expected, _ = adversarial_terms(state.disc(x)[0], state.disc(fake)[0])
    g_before = _snapshot([state.gen])
    b = train_step(state, x, y, update_g=False)
    assert b.total_d == pytest.approx(float(expected), abs=1e-6)
    assert _same(g_before, _snapshot([state.gen]))


def test_alternation_isolation(toy4):
    state = build_state(SMALL, _head(), TrainConfig(batch_size=4))
    x, y = _batch(toy4)
    c = y.flip(0)
    g0, d0 = _snapshot([state.gen]), _snapshot([state.disc, state.head])
    discriminator_step(state, x, y, c)
    assert _same(g0, _snapshot([state.gen]))
    d1 = _snapshot([state.disc, state.head])
    assert not _same(d0, d1)
    generator_step(state, x, y, c)
    assert _same(d1, _snapshot([state.disc, state.head]))
    assert not _same(g0, _snapshot([state.gen]))
    assert all(p.requires_grad for p in state.d_parameters())


def _flat_params(module):
    return [p for p in module.parameters()]


def _fd_probe(state, objective, params, rng, n=100, h=1e-6):
    """Central differences of ``objective()`` for ``n`` random parameter entries."""
    sizes = [p.numel() for p in params]
    picks = rng.choice(sum(sizes), size=n, replace=False)
    offsets = np.cumsum([0] + sizes)
    out = []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, i = params[k], int(flat - offsets[k])
        view = p.data.view(-1)
        orig = view[i].item()
        view[i] = orig + h
        fp = objective()
        view[i] = orig - h
        fm = objective()
        view[i] = orig
        out.append((k, i, (fp - fm) / (2 * h)))
    return out


@pytest.mark.parametrize("kind", [SOFTMAX, AAM])
def test_sgd_step_matches_finite_differences(toy4, kind):
    cfg = TrainConfig(lr_initial=1e-2, batch_size=2)
    state = build_state(SMALL, _head(kind), cfg, optimizer=SGD, dtype=torch.float64)
    x, y = _batch(toy4, 2)
    x = x.double()
    c = y.flip(0)
    rng = np.random.default_rng(0)

    d_params = state.d_parameters()
    if kind == AAM:
        d_params = list(state.disc.parameters())  # the head weight is re-projected after the step

    def d_obj():
        with torch.no_grad():
            return float(d_loss(state, x, y, c)[0])

    probe = _fd_probe(state, d_obj, d_params, rng)
    before = [p.detach().clone() for p in d_params]
    discriminator_step(state, x, y, c)
    delta = np.array([(d_params[k].data.view(-1)[i] - before[k].view(-1)[i]).item() for k, i, _ in probe])
    fd = np.array([g for _, _, g in probe])
    assert rel_err(-delta / cfg.lr_initial, fd) < 1e-5

    g_params = list(state.gen.parameters())

    def g_obj():
        with torch.no_grad():
            return float(g_loss(state, x, y, c)[0])

    probe = _fd_probe(state, g_obj, g_params, rng)
    before = [p.detach().clone() for p in g_params]
    generator_step(state, x, y, c)
    delta = np.array([(g_params[k].data.view(-1)[i] - before[k].view(-1)[i]).item() for k, i, _ in probe])
    fd = np.array([g for _, _, g in probe])
    assert rel_err(-delta / cfg.lr_initial, fd) < 1e-5


def test_identical_loss_sequences(toy4):
    runs = []
    for _ in range(2):
        state = build_state(SMALL, _head(), TrainConfig(batch_size=4, seed=7))
        x_all, y_all = toy4.tensors()
        seq = []
        for _ in range(4):
            x, y = sample_batch(state, x_all, y_all)
            seq.append(train_step(state, x, y))
        runs.append(seq)
    assert runs[0] == runs[1]


def test_non_finite_loss_names_component(toy4):
    state = build_state(SMALL, _head(SOFTMAX), TrainConfig(batch_size=4))
    with torch.no_grad():
        state.head.bias.fill_(float("nan"))
    x, y = _batch(toy4)
    with pytest.raises(NonFiniteLoss) as info:
        train_step(state, x, y)
    assert info.value.component == "cls_real"


def test_wgan_gp_variant_runs(toy4):
    state = build_state(SMALL, _head(), TrainConfig(batch_size=4, adversarial=WGAN_GP, total_iterations=2))
    assert state.train_cfg.d_steps == 5
    result = run_training(state, toy4)
    assert len(result.history) == 2
    assert all(math.isfinite(r["gp"]) and r["gp"] >= 0 for r in result.history)


# --- run_training -------------------------------------------------------------

def test_zero_iterations_writes_initial_checkpoint_only(toy4, tmp_path):
    state = build_state(SMALL, _head(), TrainConfig(total_iterations=0, batch_size=4))
    digest = state.parameter_digest()
    result = run_training(state, toy4, tmp_path)
    assert [p.name for p in result.checkpoints] == ["final.ckpt"]
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["final.ckpt"]
    assert state.parameter_digest() == digest
    assert load_checkpoint(result.final_checkpoint).parameter_digest() == digest


def test_ten_iterations_reproducible(toy4, tmp_path):
    digests = []
    for k in range(2):
        state = build_state(SMALL, _head(), TrainConfig(total_iterations=10, batch_size=4, checkpoint_every=4))
        result = run_training(state, toy4, tmp_path / str(k))
        digests.append(state.parameter_digest())
        assert [p.name for p in result.checkpoints] == ["iter_0000004.ckpt", "iter_0000008.ckpt", "final.ckpt"]
    assert digests[0] == digests[1]
    rows = (tmp_path / "0" / "metrics.jsonl").read_text().splitlines()
    assert len(rows) == 2  # iterations 0 and the last one at log_every=10
    assert "total_d=" in (tmp_path / "0" / "log.txt").read_text()


def test_resume_equivalence(toy4, tmp_path):
    cfg = TrainConfig(total_iterations=6, batch_size=4)
    whole = build_state(SMALL, _head(), cfg)
    run_training(whole, toy4)

    first = build_state(SMALL, _head(), replace(cfg, total_iterations=3))
    result = run_training(first, toy4, tmp_path)
    resumed = load_checkpoint(result.final_checkpoint)
    assert resumed.iteration == 3
    resumed.train_cfg = cfg
    run_training(resumed, toy4)
    assert resumed.parameter_digest() == whole.parameter_digest()


def test_class_count_mismatch(toy4):
    state = build_state(replace(SMALL, num_classes=5), _head(), TrainConfig(batch_size=4))
    with pytest.raises(ValueError):
        run_training(state, toy4)


@pytest.mark.parametrize("kind", [SOFTMAX, AAM])
def test_reconstruction_trend_500_iterations(kind):
    data = toy_dataset(ToySpec(8, 100, 32, 0))
    state = build_state(ModelConfig(), _head(kind), TrainConfig(total_iterations=500))
    result = run_training(state, data)
    rec = [r["rec"] for r in result.history]
    assert np.mean(rec[-100:]) < np.mean(rec[:100])
