"""Stage-II encoder/decoder generator, its discriminator and losses.

The generator never sees the noise vector: its only stochastic inputs are the
Stage-I sketch ``s0`` and the CA noise ``eps``.
"""

import math

import numpy as np

from . import tensor as T
from .conditioning import CaParams, ca_forward
from .errors import ConfigError, ShapeError, StateError
from .gan_stage1 import Discriminator, _phi, generator_objective, matching_d_loss
from .nn import Act, BatchNorm, Conv2d, Module, ResidualBlock, Sequential, down_block, up_block


class Stage2Generator(Module):
    def __init__(self, arch, rng, dtype=np.float64, use_ca=True, text_twice=True):
        super().__init__()
        if arch.m_g > arch.w0:
            raise ConfigError("M_g exceeds the Stage-I resolution")
        bc = arch.base_channels
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "use_ca", use_ca)
        object.__setattr__(self, "text_twice", text_twice)
        if text_twice:
            self.ca = CaParams(arch.embed_dim, arch.n_g, rng, dtype)
        else:
            # learned stand-in for the text branch
            self.text_const = T.zeros((arch.n_g,), dtype, requires_grad=True)
        ch = bc
        self.stem = Sequential(Conv2d(3, ch, 3, 1, 1, rng=rng, dtype=dtype), Act("relu"))
        enc = []
        for _ in range(int(round(math.log2(arch.w0 // arch.m_g)))):
            enc.append(down_block(ch, ch * 2, rng, dtype, batch_norm=True))
            ch *= 2
        self.encoder = Sequential(*enc)
        self.joint = Sequential(Conv2d(ch + arch.n_g, ch, 3, 1, 1, rng=rng, dtype=dtype),
                                BatchNorm(ch, dtype), Act("relu"))
        self.residual = Sequential(*[ResidualBlock(ch, rng, dtype, arch.relu_after_residual)
                                     for _ in range(arch.residual_blocks)])
        dec = []
        for _ in range(int(round(math.log2(arch.w // arch.m_g)))):
            nxt = max(ch // 2, bc)
            dec.append(up_block(ch, nxt, rng, dtype))
            ch = nxt
        self.decoder = Sequential(*dec)
        self.to_rgb = Conv2d(ch, 3, 3, 1, 1, rng=rng, dtype=dtype)

    def condition(self, phi, eps, n):
        """Return (c_hat [N, n_g], dist or None)."""
        if not self.text_twice:
            base = T.Tensor(np.zeros((n, self.arch.n_g), dtype=self.text_const.dtype))
            return base + self.text_const, None
        c_hat, dist = ca_forward(phi, self.ca, eps)
        if not self.use_ca:
            c_hat = dist.mu
        return c_hat, dist

    def refine(self, s0, c_hat):
        a = self.arch
        if s0.ndim != 4 or s0.shape[1:] != (3, a.h0, a.w0):
            raise ShapeError(f"s0 must be [N, 3, {a.h0}, {a.w0}], got {s0.shape}")
        h = self.encoder(self.stem(s0))
        text = T.replicate_spatial(c_hat, h.shape[2], h.shape[3])
        h = self.joint(T.concat_channels(h, text))
        h = self.residual(h)
        h = self.decoder(h)
        return T.tanh(self.to_rgb(h))

    def forward(self, s0, phi, eps):
        s0 = s0.detach() if isinstance(s0, T.Tensor) else T.Tensor(s0)
        c_hat, dist = self.condition(_phi(phi, s0), eps, s0.shape[0])
        return self.refine(s0, c_hat), dist


def g2_forward(s0, c_hat, params):
    s0 = s0.detach() if isinstance(s0, T.Tensor) else T.Tensor(s0)
    return params.refine(s0, c_hat)


class Stage2Discriminator(Discriminator):
    def __init__(self, arch, rng, dtype=np.float64):
        super().__init__(arch, arch.w, rng, dtype)
        object.__setattr__(self, "trained", False)

    def feature_length(self):
        return self.head.m_d * self.head.m_d * self.joint_channels


def discriminator_features(image, phi, params, allow_untrained=False):
    """Flattened joint-conv activations in eval mode, as float64 [N, F]."""
    if params is None or (not allow_untrained and not getattr(params, "trained", True)):
        raise StateError("discriminator features need a trained discriminator")
    image = image if isinstance(image, T.Tensor) else T.Tensor(np.asarray(image))
    if image.ndim == 3:
        image = image.reshape(1, *image.shape)
    was_training = params.training
    params.eval()
    try:
        with T.no_grad():
            feat = params.head.features(params.encode(image), _phi(phi, image))
    finally:
        params.train(was_training)
    return feat.data.reshape(feat.shape[0], -1).astype(np.float64)


def stage2_d_loss(real_hi, fake_hi, phi_match, phi_mismatch, params):
    return matching_d_loss(params, real_hi, fake_hi, phi_match, phi_mismatch)


def stage2_g_loss(s0_batch, phi_batch, eps, g_params, d_params, lam=1.0, non_saturating=False):
    """Returns (loss, kl, fake). ``s0_batch`` is treated as a constant."""
    s0 = s0_batch.detach() if isinstance(s0_batch, T.Tensor) else T.Tensor(s0_batch)
    phi = _phi(phi_batch, s0)
    fake, dist = g_params(s0, phi, eps)
    loss, kl = generator_objective(fake, dist, phi, d_params, lam, g_params.use_ca, non_saturating)
    return loss, kl, fake
