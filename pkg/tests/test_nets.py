import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from aamgan.errors import ShapeMismatch
from aamgan.heads import SOFTMAX, ClassifierHead
from aamgan.losses import LossWeights, generator_adversarial_term, generator_objective, reconstruction_loss
from aamgan.nets import Discriminator, Generator, count_parameters, spatial_broadcast_concat

from oracles import central_diff, rel_err


def _codes(labels, c=8):
    return F.one_hot(torch.as_tensor(labels), c).float()


@pytest.fixture(scope="module")
def gen():
    torch.manual_seed(0)
    return Generator(8)


@pytest.fixture(scope="module")
def disc():
    torch.manual_seed(1)
    return Discriminator()


def test_broadcast_concat_shape():
    x = torch.zeros(2, 3, 32, 32)
    out = spatial_broadcast_concat(x, _codes([1, 5]))
    assert out.shape == (2, 11, 32, 32)


def test_broadcast_concat_exhaustive():
    rng = np.random.default_rng(0)
    x = torch.as_tensor(rng.uniform(-1, 1, size=(3, 3, 4, 5)))
    c = _codes([0, 2, 3], 4).double()
    out = spatial_broadcast_concat(x, c).numpy()
    np.testing.assert_array_equal(out[:, :3], x.numpy())
    for b in range(3):
        for k in range(4):
            for i in range(4):
                for j in range(5):
                    assert out[b, 3 + k, i, j] == c[b, k]


def test_broadcast_concat_rejects_batch_mismatch():
    with pytest.raises(ShapeMismatch):
        spatial_broadcast_concat(torch.zeros(2, 3, 8, 8), _codes([1]))


def test_generator_shape_and_range(gen):
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    y = gen(x, _codes([0, 3, 7, 1])).detach()
    assert y.shape == x.shape
    assert float(y.abs().max()) <= 1.0


def test_generator_deterministic(gen):
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    c = _codes([2, 4])
    assert torch.equal(gen(x, c), gen(x, c))


@pytest.mark.parametrize("bad", [
    (torch.zeros(2, 3, 16, 16), _codes([0, 1])),
    (torch.zeros(2, 3, 32, 32), _codes([0, 1], 7)),
    (torch.zeros(2, 3, 32, 32), torch.full((2, 8), 0.125)),
])
def test_generator_shape_errors(gen, bad):
    with pytest.raises(ShapeMismatch):
        gen(*bad)


def test_generator_parameter_sensitivity():
    torch.manual_seed(3)
    g = Generator(8).double()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    c = _codes([1, 6]).double()
    p = g.main[0].weight
    idx = (0, 0, 3, 3)
    base = p.data[idx].item()

    def out_norm(v):
        with torch.no_grad():
            p.data[idx] = float(v[0])
            r = g(x, c).norm().item()
            p.data[idx] = base
            return r

    fd = central_diff(out_norm, np.array([base]), h=1e-4)[0]
    assert abs(fd) > 1e-8
    with torch.no_grad():
        p.data[idx] = base + 1e-2
        moved = g(x, c)
        p.data[idx] = base
    assert not torch.equal(moved, g(x, c))


def test_discriminator_outputs(disc):
    x = torch.rand(5, 3, 32, 32) * 2 - 1
    real, emb = disc(x)
    assert real.shape == (5,)
    assert bool(((real > 0) & (real < 1)).all())
    assert emb.shape == (5, 128)
    assert bool(torch.isfinite(emb).all())


def test_discriminator_shape_error(disc):
    with pytest.raises(ShapeMismatch):
        disc(torch.zeros(1, 1, 32, 32))


def test_discriminator_realness_gradient_fd():
    torch.manual_seed(4)
    d = Discriminator().double()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    xr = x.clone().requires_grad_(True)
    d(xr)[0].sum().backward()
    analytic = xr.grad[0, :, 10:14, 10:14].numpy()

    def f(patch):
        z = x.clone()
        z[0, :, 10:14, 10:14] = torch.as_tensor(patch)
        with torch.no_grad():
            return d(z)[0].item()

    numeric = central_diff(f, x[0, :, 10:14, 10:14].numpy(), h=1e-5)
    assert rel_err(analytic, numeric) <= 1e-3


def test_parameter_budget():
    total = count_parameters(Generator(8)) + count_parameters(Discriminator()) + 128 * 8
    assert total < 5_000_000


def test_generator_gradient_reaches_every_parameter():
    torch.manual_seed(5)
    g, d = Generator(8), Discriminator()
    head = ClassifierHead(SOFTMAX, 128, 8)
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    y = torch.tensor([0, 1, 2, 3])
    c = torch.tensor([4, 5, 6, 7])
    fake = g(x, _codes(c))
    p_fake, emb = d(fake)
    total = generator_objective(generator_adversarial_term(p_fake), head(emb, c),
                                reconstruction_loss(x, g(fake, _codes(y))), LossWeights())
    total.backward()
    for name, p in g.named_parameters():
        assert p.grad is not None and float(p.grad.norm()) > 0, name


@settings(max_examples=10, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 7))
def test_generator_range_for_any_parameters(scale, label):
    torch.manual_seed(0)
    g = Generator(8, n_res=1)
    with torch.no_grad():
        for p in g.parameters():
            p.mul_(scale)
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    y = g(x, _codes([label])).detach()
    assert float(y.abs().max()) <= 1.0
