import numpy as np
import pytest
import torch
import torch.nn.functional as F

from aamgan.config import ModelConfig
from aamgan.datasets import ToySpec, toy_dataset
from aamgan.losses import reconstruction_loss
from aamgan.trainer import build_networks
from aamgan.config import HeadConfig
from aamgan.synthesis import ALL_CLASSES, FIXED_CLASS, PERMUTED, reconstruction_error, synthesize, translate

SMALL = ModelConfig(num_classes=4, g_conv_dim=4, g_res_blocks=1, d_conv_dim=4, embed_dim=16)


@pytest.fixture(scope="module")
def gen():
    torch.manual_seed(0)
    return build_networks(SMALL, HeadConfig())[0]


@pytest.fixture(scope="module")
def data():
    return toy_dataset(ToySpec(4, 5, 32, 2))


def test_all_classes_counts_and_order(gen, data):
    syn = synthesize(gen, data, ALL_CLASSES)
    n, c = len(data), 4
    assert len(syn.dataset) == n * c
    assert syn.dataset.labels.tolist() == list(range(c)) * n
    assert syn.source_index.tolist() == [i for i in range(n) for _ in range(c)]
    np.testing.assert_array_equal(syn.source_label, data.labels[syn.source_index])
    assert np.bincount(syn.dataset.labels).tolist() == [n] * c


def test_max_sources(gen, data):
    syn = synthesize(gen, data, ALL_CLASSES, max_sources=3)
    assert len(syn.dataset) == 12 and set(syn.source_index.tolist()) == {0, 1, 2}


def test_fixed_class(gen, data):
    syn = synthesize(gen, data, FIXED_CLASS, fixed_class=2)
    assert len(syn.dataset) == len(data) and set(syn.dataset.labels.tolist()) == {2}
    for bad in (None, 4, -1):
        with pytest.raises(ValueError):
            synthesize(gen, data, FIXED_CLASS, fixed_class=bad)


def test_permuted_is_seeded_permutation(gen, data):
    a = synthesize(gen, data, PERMUTED, seed=5)
    b = synthesize(gen, data, PERMUTED, seed=5)
    assert sorted(a.dataset.labels.tolist()) == sorted(data.labels.tolist())
    np.testing.assert_array_equal(a.dataset.labels, b.dataset.labels)
    np.testing.assert_array_equal(a.dataset.images, b.dataset.images)


def test_unknown_policy(gen, data):
    with pytest.raises(ValueError):
        synthesize(gen, data, "every-other")


def test_outputs_match_direct_generator_calls(gen, data):
    syn = synthesize(gen, data, ALL_CLASSES)
    x, _ = data.tensors()
    with torch.no_grad():
        direct = gen(x[:1].repeat(4, 1, 1, 1), F.one_hot(torch.arange(4), 4).float())
    np.testing.assert_allclose(syn.dataset.images[:4], direct.permute(0, 2, 3, 1).numpy(), atol=1e-6)
    assert np.abs(syn.dataset.images).max() <= 1.0


def test_translate_batching_and_mode(gen, data):
    gen.train()
    targets = data.labels[::-1].copy()
    small = translate(gen, data.images, targets, 4, batch_size=3)
    big = translate(gen, data.images, targets, 4, batch_size=256)
    np.testing.assert_allclose(small, big, atol=1e-6)
    assert gen.training


def test_reconstruction_error_matches_loss(gen, data):
    x, y = data.tensors()
    code = F.one_hot(y, 4).float()
    with torch.no_grad():
        expected = float(reconstruction_loss(x, gen(gen(x, code), code)))
    assert reconstruction_error(gen, data) == pytest.approx(expected, rel=1e-5)


def test_inputs_not_mutated(gen, data):
    before = data.images.copy()
    synthesize(gen, data, ALL_CLASSES)
    np.testing.assert_array_equal(before, data.images)
