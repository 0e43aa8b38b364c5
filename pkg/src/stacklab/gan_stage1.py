"""Stage-I generator and discriminator, and the matching-aware losses."""

import math

import numpy as np

from . import tensor as T
from .conditioning import CaParams, ca_forward, kl_to_standard_normal
from .errors import ConfigError, ShapeError
from .nn import Act, Conv2d, Dense, Module, Sequential, down_block, frozen, up_block

LOG_FLOOR = 1e-12


def _log2(n):
    return int(round(math.log2(n)))


class Stage1Generator(Module):
    """(z, phi) -> [N, 3, res, res] via CA, a dense stem at 4x4 and up-sampling blocks.

    ``resolution`` defaults to the config's W0; the single-stage ablation
    builds this generator directly at the Stage-II resolution.
    """

    def __init__(self, arch, rng, dtype=np.float64, use_ca=True, resolution=None):
        super().__init__()
        res = resolution or arch.w0
        if res < 4 or res & (res - 1):
            raise ConfigError(f"generator resolution must be a power of two >= 4, got {res}")
        bc = arch.base_channels
        ch = 8 * bc
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "use_ca", use_ca)
        object.__setattr__(self, "stem_channels", ch)
        self.ca = CaParams(arch.embed_dim, arch.n_g, rng, dtype)
        self.stem = Dense(arch.n_z + arch.n_g, 4 * 4 * ch, rng, dtype)
        blocks = []
        for _ in range(_log2(res // 4)):
            nxt = max(ch // 2, bc)
            blocks.append(up_block(ch, nxt, rng, dtype))
            ch = nxt
        self.up = Sequential(*blocks)
        self.to_rgb = Conv2d(ch, 3, 3, 1, 1, rng=rng, dtype=dtype)

    def condition(self, phi, eps):
        """Return (c_hat, dist). Without CA, c_hat is the deterministic mean."""
        c_hat, dist = ca_forward(phi, self.ca, eps)
        if not self.use_ca:
            c_hat = dist.mu
        return c_hat, dist

    def decode(self, z, c_hat):
        z = z if isinstance(z, T.Tensor) else T.Tensor(np.asarray(z, dtype=c_hat.dtype))
        if z.ndim != 2 or z.shape[1] != self.arch.n_z:
            raise ShapeError(f"noise must be [N, {self.arch.n_z}], got {z.shape}")
        if c_hat.shape != (z.shape[0], self.arch.n_g):
            raise ShapeError(f"conditioning must be [N, {self.arch.n_g}], got {c_hat.shape}")
        h = self.stem(T.concat([c_hat, z], axis=1))
        h = h.reshape(z.shape[0], self.stem_channels, 4, 4)
        h = self.up(h)
        return T.tanh(self.to_rgb(h))

    def forward(self, z, phi, eps):
        c_hat, dist = self.condition(phi, eps)
        return self.decode(z, c_hat), dist


def g0_forward(z, c_hat0, params):
    return params.decode(z, c_hat0)


class JointHead(Module):
    """Text compression, spatial replication, 1x1 joint conv and the score node."""

    def __init__(self, img_channels, arch, rng, dtype):
        super().__init__()
        object.__setattr__(self, "m_d", arch.m_d)
        self.compress = Dense(arch.embed_dim, arch.n_d, rng, dtype)
        self.joint = Conv2d(img_channels + arch.n_d, img_channels, 1, 1, 0, rng=rng, dtype=dtype)
        self.act = Act("leaky_relu")
        self.score = Dense(img_channels * arch.m_d * arch.m_d, 1, rng, dtype)

    def features(self, feat, phi):
        text = self.compress(phi)
        text = T.replicate_spatial(text, self.m_d, self.m_d)
        return self.act(self.joint(T.concat_channels(feat, text)))

    def forward(self, feat, phi):
        j = self.features(feat, phi)
        return self.score(j.reshape(j.shape[0], -1)).reshape(j.shape[0])


class Discriminator(Module):
    """Down-sampling encoder to M_d x M_d followed by the joint text head."""

    def __init__(self, arch, resolution, rng, dtype=np.float64):
        super().__init__()
        if resolution < arch.m_d:
            raise ConfigError("image smaller than the joint spatial size")
        n_blocks = _log2(resolution // arch.m_d)
        object.__setattr__(self, "resolution", resolution)
        object.__setattr__(self, "n_blocks", n_blocks)
        ch_in, ch = 3, arch.base_channels
        blocks = []
        for i in range(n_blocks):
            blocks.append(down_block(ch_in, ch, rng, dtype, batch_norm=i > 0))
            ch_in, ch = ch, ch * 2
        self.encoder = Sequential(*blocks)
        self.head = JointHead(ch_in, arch, rng, dtype)
        object.__setattr__(self, "joint_channels", ch_in)

    def encode(self, image):
        if image.ndim != 4 or image.shape[1:] != (3, self.resolution, self.resolution):
            raise ShapeError(f"discriminator expects [N, 3, {self.resolution}, {self.resolution}], got {image.shape}")
        return self.encoder(image)

    def logits(self, image, phi):
        return self.head(self.encode(image), _phi(phi, image))

    def forward(self, image, phi):
        return T.sigmoid(self.logits(image, phi))


class Stage1Discriminator(Discriminator):
    def __init__(self, arch, rng, dtype=np.float64, resolution=None):
        super().__init__(arch, resolution or arch.w0, rng, dtype)


def _phi(phi, like=None):
    if isinstance(phi, T.Tensor):
        return phi
    arr = np.asarray(phi)
    if like is not None:
        arr = arr.astype(like.dtype)
    return T.Tensor(arr if arr.ndim == 2 else arr[None, :])


def d0_forward(image, phi, params):
    return params(image, phi)


# ------------------------------------------------------------------- losses


def d_loss_from_logits(l_real, l_wrong, l_fake, floor=LOG_FLOOR):
    """-[E log D(real) + 1/2 E log(1 - D(wrong)) + 1/2 E log(1 - D(fake))]."""
    pos = T.mean(T.log_sigmoid(l_real, floor))
    neg_wrong = T.mean(T.log_sigmoid(-l_wrong, floor))
    neg_fake = T.mean(T.log_sigmoid(-l_fake, floor))
    return -(pos + neg_wrong * 0.5 + neg_fake * 0.5)


def g_adv_from_logits(l_fake, non_saturating=False, floor=LOG_FLOOR):
    """E log(1 - D(fake)) as written, or -E log D(fake) when non-saturating."""
    if non_saturating:
        return -T.mean(T.log_sigmoid(l_fake, floor))
    return T.mean(T.log_sigmoid(-l_fake, floor))


def matching_d_loss(disc, real, fake, phi_match, phi_mismatch):
    if real.shape != fake.shape or real.shape[0] != phi_match.shape[0] or phi_match.shape != phi_mismatch.shape:
        raise ShapeError("real, fake and both embedding batches must share a batch size")
    fake = fake.detach() if isinstance(fake, T.Tensor) else T.Tensor(fake)
    real = real if isinstance(real, T.Tensor) else T.Tensor(real)
    phi_match, phi_mismatch = _phi(phi_match, real), _phi(phi_mismatch, real)
    real_feat = disc.encode(real)
    l_real = disc.head(real_feat, phi_match)
    l_wrong = disc.head(real_feat, phi_mismatch)
    l_fake = disc.logits(fake, phi_match)
    return d_loss_from_logits(l_real, l_wrong, l_fake)


def stage1_d_loss(real, fake, phi_match, phi_mismatch, params):
    return matching_d_loss(params, real, fake, phi_match, phi_mismatch)


def generator_objective(fake, dist, phi, disc, lam=1.0, use_kl=True, non_saturating=False):
    """Adversarial term against a frozen ``disc`` plus lambda * batch-mean KL.

    Returns (loss, kl); ``kl`` is None when the KL term is dropped.
    """
    with frozen(disc):
        adv = g_adv_from_logits(disc.logits(fake, phi), non_saturating)
    if use_kl and dist is not None and lam > 0:
        kl = kl_to_standard_normal(dist)
        return adv + kl * lam, kl
    return adv, None


def stage1_g_loss(z_batch, phi_batch, eps, g_params, d_params, lam=1.0, non_saturating=False):
    """Returns (loss, kl, fake). Gradients reach G0 and its CA layer, never D0."""
    phi = _phi(phi_batch, g_params.ca.fc.weight)
    fake, dist = g_params(z_batch, phi, eps)
    loss, kl = generator_objective(fake, dist, phi, d_params, lam, g_params.use_ca, non_saturating)
    return loss, kl, fake
