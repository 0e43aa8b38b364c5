import math

import numpy as np
import pytest

from stacklab import tensor as T
from stacklab.conditioning import embed_batch
from stacklab.config import ArchConfig
from stacklab.errors import ConfigError, ShapeError
from stacklab.gan_stage1 import (Stage1Discriminator, Stage1Generator, d0_forward, d_loss_from_logits,
                                 g0_forward, stage1_d_loss, stage1_g_loss)
from stacklab.optim import Adam
from stacklab.rng import make_rng
from stacklab.synth_data import generate_dataset

ARCH = ArchConfig()


def zero_score(d):
    d.head.score.weight.data[:] = 0
    d.head.score.bias.data[:] = 0


def weights(module):
    # learnable parameters only; BN running statistics move on any train-mode forward
    return {k: v.data.copy() for k, v in module.parameters().items()}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def zero_ca(g):
    g.ca.fc.weight.data[:] = 0
    g.ca.fc.bias.data[:] = 0


@pytest.fixture(scope="module")
def phis():
    ds = generate_dataset(4, 4, seed=0)
    return embed_batch(ds.specs[::4], ARCH.embed_dim), ds


def test_generator_shape_and_range():
    g = Stage1Generator(ARCH, make_rng(0))
    img, _ = g(make_rng(1).standard_normal((2, ARCH.n_z)), make_rng(2).normal(size=(2, 32)),
               np.zeros((2, ARCH.n_g)))
    assert img.shape == (2, 3, 16, 16)
    assert np.all(np.abs(img.data) <= 1)


def test_zero_parameters_give_zero_image():
    g = Stage1Generator(ARCH, make_rng(0))
    for p in g.parameters().values():
        p.data[:] = 0
    img = g0_forward(np.ones((2, ARCH.n_z)), T.Tensor(np.ones((2, ARCH.n_g))), g)
    assert np.all(img.data == 0.0)


def test_paper_size_generator_shape():
    arch = ArchConfig.paper()
    g = Stage1Generator(arch, make_rng(0), np.float32)
    with T.no_grad():
        img, _ = g(np.zeros((2, arch.n_z)), np.zeros((2, arch.embed_dim)), np.zeros((2, arch.n_g)))
    assert img.shape == (2, 3, 64, 64)


def test_each_up_block_doubles():
    g = Stage1Generator(ARCH, make_rng(0))
    h = T.Tensor(np.zeros((2, g.stem_channels, 4, 4)))
    for block in g.up:
        size = h.shape[-1]
        h = block(h)
        assert h.shape[-1] == 2 * size
    assert h.shape[-1] == ARCH.w0


def test_noise_shape_checked():
    g = Stage1Generator(ARCH, make_rng(0))
    with pytest.raises(ShapeError):
        g(np.zeros((2, ARCH.n_z + 1)), np.zeros((2, 32)), np.zeros((2, ARCH.n_g)))


def test_bad_resolution():
    with pytest.raises(ConfigError):
        Stage1Generator(ARCH, make_rng(0), resolution=12)


def test_discriminator_range_blocks_and_half():
    d = Stage1Discriminator(ARCH, make_rng(0))
    assert d.n_blocks == 2
    x = make_rng(1).uniform(-1, 1, size=(3, 3, 16, 16))
    out = d0_forward(T.Tensor(x), make_rng(2).normal(size=(3, 32)), d).data
    assert np.all((out > 0) & (out < 1))
    zero_score(d)
    assert np.all(d0_forward(T.Tensor(x), make_rng(2).normal(size=(3, 32)), d).data == 0.5)
    with pytest.raises(ShapeError):
        d(T.Tensor(np.zeros((1, 3, 32, 32))), np.zeros((1, 32)))


def test_d_loss_at_half_is_two_ln2():
    d = Stage1Discriminator(ARCH, make_rng(0))
    zero_score(d)
    rng = make_rng(1)
    real, fake = rng.uniform(-1, 1, size=(2, 4, 3, 16, 16))
    phi = rng.normal(size=(4, 32))
    loss = stage1_d_loss(real, fake, phi, np.roll(phi, 1, 0), d)
    assert abs(float(loss.data) - 2 * math.log(2)) <= 1e-9


def test_d_loss_perfect_limit():
    big = T.Tensor(np.full(4, 100.0))
    loss = d_loss_from_logits(big, -big, -big)
    assert 0 <= float(loss.data) < 1e-12


def test_d_loss_batch_mismatch():
    d = Stage1Discriminator(ARCH, make_rng(0))
    with pytest.raises(ShapeError):
        stage1_d_loss(np.zeros((2, 3, 16, 16)), np.zeros((3, 3, 16, 16)), np.zeros((2, 32)), np.zeros((2, 32)), d)


def test_g_loss_at_half_is_minus_ln2_plus_kl():
    rng = make_rng(0)
    g, d = Stage1Generator(ARCH, rng), Stage1Discriminator(ARCH, rng)
    zero_score(d)
    zero_ca(g)
    z, phi, eps = rng.standard_normal((4, ARCH.n_z)), rng.normal(size=(4, 32)), rng.standard_normal((4, ARCH.n_g))
    loss, kl, _ = stage1_g_loss(z, phi, eps, g, d, 1.0)
    assert abs(float(loss.data) + math.log(2)) <= 1e-9
    assert float(kl.data) == 0.0
    # non-zero KL is added with weight lambda
    g.ca.fc.bias.data[:] = 0.3
    loss, kl, _ = stage1_g_loss(z, phi, eps, g, d, 2.0)
    assert abs(float(loss.data) - (-math.log(2) + 2.0 * float(kl.data))) <= 1e-9


def test_lambda_zero_is_pure_adversarial():
    rng = make_rng(0)
    g, d = Stage1Generator(ARCH, rng, np.float64), Stage1Discriminator(ARCH, rng, np.float64)
    z, phi, eps = rng.standard_normal((4, ARCH.n_z)), rng.normal(size=(4, 32)), rng.standard_normal((4, ARCH.n_g))
    loss, kl, fake = stage1_g_loss(z, phi, eps, g, d, 0.0)
    adv = np.mean(np.log(1 - d(fake.detach(), phi).data))
    assert kl is None
    assert float(loss.data) == pytest.approx(adv, abs=1e-12)


def test_g_step_leaves_discriminator_untouched():
    rng = make_rng(0)
    g, d = Stage1Generator(ARCH, rng), Stage1Discriminator(ARCH, rng)
    before = weights(d)
    opt = Adam(g.parameters())
    loss, _, _ = stage1_g_loss(rng.standard_normal((4, ARCH.n_z)), rng.normal(size=(4, 32)),
                               rng.standard_normal((4, ARCH.n_g)), g, d)
    T.backward(loss)
    assert all(p.grad is None for p in d.parameters().values())
    opt.step(1e-3)
    assert same(weights(d), before)


def test_d_step_leaves_generator_untouched():
    rng = make_rng(0)
    g, d = Stage1Generator(ARCH, rng), Stage1Discriminator(ARCH, rng)
    before = weights(g)
    fake, _ = g(rng.standard_normal((4, ARCH.n_z)), rng.normal(size=(4, 32)), rng.standard_normal((4, ARCH.n_g)))
    phi = rng.normal(size=(4, 32))
    loss = stage1_d_loss(rng.uniform(-1, 1, size=(4, 3, 16, 16)), fake, phi, np.roll(phi, 1, 0), d)
    T.backward(loss)
    Adam(d.parameters()).step(1e-3)
    assert all(p.grad is None for p in g.parameters().values())
    assert same(weights(g), before)


def test_losses_finite_with_extreme_logits():
    d = Stage1Discriminator(ARCH, make_rng(0))
    d.head.score.bias.data[:] = 1e4
    rng = make_rng(1)
    phi = rng.normal(size=(2, 32))
    x = rng.uniform(-1, 1, size=(2, 3, 16, 16))
    assert np.isfinite(stage1_d_loss(x, x, phi, phi[::-1], d).data)
