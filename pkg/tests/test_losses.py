import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from aamgan.errors import DomainError, ShapeMismatch
from aamgan.heads import AAM, SOFTMAX, ClassifierHead, HeadParams, aam_loss, softmax_loss
from aamgan.losses import (
    SATURATING,
    LossComponents,
    LossWeights,
    adversarial_terms,
    classification_loss_fake,
    classification_loss_real,
    reconstruction_loss,
    total_losses,
)
from aamgan.nets import Discriminator


def test_indifferent_discriminator():
    d, g = adversarial_terms(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64))
    assert float(d) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(g) == pytest.approx(math.log(2), abs=1e-12)


def test_perfect_discriminator_limit():
    d, _ = adversarial_terms(torch.tensor([1 - 1e-9], dtype=torch.float64),
                             torch.tensor([1e-9], dtype=torch.float64))
    assert 0 <= float(d) < 1e-6


def test_adversarial_scalar_oracle(rng):
    for _ in range(100):
        p, q = rng.uniform(1e-3, 1 - 1e-3, size=2)
        d, g = adversarial_terms(torch.tensor([p], dtype=torch.float64), torch.tensor([q], dtype=torch.float64))
        assert float(d) == pytest.approx(-(math.log(p) + math.log(1 - q)), abs=1e-12)
        assert float(g) == pytest.approx(-math.log(q), abs=1e-12)
        _, gs = adversarial_terms(torch.tensor([p], dtype=torch.float64), torch.tensor([q], dtype=torch.float64),
                                  SATURATING)
        assert float(gs) == pytest.approx(math.log(1 - q), abs=1e-12)


@pytest.mark.parametrize("bad", [float("nan"), -0.1, 1.5])
def test_adversarial_domain(bad):
    with pytest.raises(DomainError):
        adversarial_terms(torch.tensor([bad]), torch.tensor([0.5]))


def test_adversarial_endpoints_are_finite():
    d, g = adversarial_terms(torch.tensor([0.0]), torch.tensor([1.0]))
    assert math.isfinite(float(d)) and math.isfinite(float(g))


def test_reconstruction_examples(rng):
    x = torch.as_tensor(rng.uniform(-1, 1, size=(2, 3, 8, 8)))
    assert float(reconstruction_loss(x, x)) == 0.0
    assert float(reconstruction_loss(x, x + 0.1)) == pytest.approx(0.1, abs=1e-12)
    y = torch.as_tensor(rng.uniform(-1, 1, size=x.shape))
    oracle = sum(abs(a - b) for a, b in zip(x.numpy().ravel(), y.numpy().ravel())) / x.numel()
    assert float(reconstruction_loss(x, y)) == pytest.approx(oracle, abs=1e-12)


def test_reconstruction_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        reconstruction_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reconstruction_pseudometric(seed):
    r = np.random.default_rng(seed)
    a, b, c = (torch.as_tensor(r.uniform(-1, 1, size=(1, 3, 4, 4))) for _ in range(3))
    ab, ba = reconstruction_loss(a, b), reconstruction_loss(b, a)
    assert float(ab) == float(ba)
    assert float(ab) > 0 and float(reconstruction_loss(a, a)) == 0
    assert float(ab) <= float(reconstruction_loss(a, c)) + float(reconstruction_loss(c, b)) + 1e-15


def _zeroed_softmax_head():
    head = ClassifierHead(SOFTMAX, 128, 8)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    return head


def test_cls_real_uniform_prediction():
    torch.manual_seed(0)
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    loss = classification_loss_real(x, torch.tensor([0, 3, 5, 7]), Discriminator(), _zeroed_softmax_head())
    assert loss.item() == pytest.approx(math.log(8), abs=1e-6)


def test_cls_fake_uniform_prediction():
    torch.manual_seed(0)
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    loss = classification_loss_fake(x, torch.tensor([1, 2, 3, 4]), lambda img, code: img, Discriminator(),
                                    _zeroed_softmax_head())
    assert loss.item() == pytest.approx(math.log(8), abs=1e-6)


def test_cls_fake_identity_generator_matches_real():
    torch.manual_seed(1)
    d, head = Discriminator(), ClassifierHead(AAM, 128, 8)
    x = torch.rand(6, 3, 32, 32) * 2 - 1
    y = torch.tensor([0, 1, 2, 3, 4, 5])
    real = classification_loss_real(x, y, d, head)
    fake = classification_loss_fake(x, y, lambda img, code: img, d, head)
    assert real.item() == fake.item()


def test_cls_real_aam_zero_margin_is_cosine_softmax():
    torch.manual_seed(2)
    d = Discriminator().double()
    head = ClassifierHead(AAM, 128, 8, scale=30.0, margin=0.0).double()
    x = torch.rand(5, 3, 32, 32, dtype=torch.float64) * 2 - 1
    y = torch.tensor([0, 2, 4, 6, 7])
    got = classification_loss_real(x, y, d, head)
    _, emb = d(x)
    u = emb / emb.norm(dim=1, keepdim=True)
    w = head.weight / head.weight.norm(dim=0, keepdim=True)
    expected = F.cross_entropy(30.0 * u @ w, y)
    assert float(got) == pytest.approx(float(expected), abs=1e-6)


@pytest.mark.parametrize("kind", [SOFTMAX, AAM])
def test_cls_composition_oracle(kind):
    torch.manual_seed(3)
    d = Discriminator().double()
    head = ClassifierHead(kind, 128, 8).double()
    x = torch.rand(3, 3, 32, 32, dtype=torch.float64) * 2 - 1
    y = torch.tensor([1, 4, 6])
    _, emb = d(x)
    w = head.weight.detach()
    if kind == AAM:
        expected = aam_loss(emb.detach(), y, HeadParams(w, None, head.scale, head.margin, AAM)).loss
    else:
        expected = softmax_loss(emb.detach(), y, HeadParams(w, head.bias.detach(), 1.0, 0.0, SOFTMAX)).loss
    assert float(classification_loss_real(x, y, d, head)) == pytest.approx(float(expected), abs=1e-12)

    gen = lambda img, code: torch.flip(img, dims=[3])  # noqa: E731
    _, emb_f = d(torch.flip(x, dims=[3]))
    c = torch.tensor([0, 0, 7])
    if kind == AAM:
        expected = aam_loss(emb_f.detach(), c, HeadParams(w, None, head.scale, head.margin, AAM)).loss
    else:
        expected = softmax_loss(emb_f.detach(), c, HeadParams(w, head.bias.detach(), 1.0, 0.0, SOFTMAX)).loss
    assert float(classification_loss_fake(x, c, gen, d, head)) == pytest.approx(float(expected), abs=1e-12)


def test_total_losses_default_weight():
    b = total_losses(LossComponents(1.0, 1.0, 1.0, 1.0, 1.0), LossWeights(1.0, 10.0))
    assert b.total_d == 0.0
    assert b.total_g == 12.0


def test_total_losses_zero_weights():
    b = total_losses(LossComponents(-1.3, 0.7, 2.0, 3.0, 0.4), LossWeights(0.0, 0.0))
    assert b.total_d == 1.3 and b.total_g == 0.7


@settings(max_examples=200)
@given(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5), st.floats(0, 100), st.floats(0, 100))
def test_total_losses_scalar_oracle(parts, lc, lr):
    adv, adv_g, cr, cf, rec = parts
    rec = abs(rec)
    b = total_losses(LossComponents(adv, adv_g, cr, cf, rec), LossWeights(lc, lr))
    assert b.total_d == pytest.approx(-adv + lc * cr, rel=1e-12, abs=1e-9)
    assert b.total_g == pytest.approx(adv_g + lc * cf + lr * rec, rel=1e-12, abs=1e-9)


@pytest.mark.parametrize("bad", [{"lambda_cls": -1.0}, {"lambda_rec": float("inf")}])
def test_loss_weights_validation(bad):
    with pytest.raises(ValueError):
        LossWeights(**bad)
