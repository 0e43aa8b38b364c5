"""Text embeddings and Conditioning Augmentation.

The embedding is a deterministic attribute encoding: one-hot blocks for body
color, accent color and shape, min-max scaled continuous attributes, zero
padding up to the embedding width, then L2 normalization.

Conditioning Augmentation maps an embedding through one dense layer to the
mean and log standard deviation of a diagonal Gaussian and samples from it
with the reparameterization ``c = mu + exp(log_sigma) * eps``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import EncodingError, InvalidArgumentError, ShapeError
from .nn import Dense, Module
from .synth_data import (ACCENT_COLORS, BODY_COLORS, ORIENTATION_RANGE, SHAPE_KINDS,
                         SIZE_RANGE, TONE_RANGE, SceneSpec)

EMBED_DIM = 32

_BLOCKS = (
    ("body_color", tuple(BODY_COLORS)),
    ("accent_color", tuple(ACCENT_COLORS)),
    ("shape_kind", SHAPE_KINDS),
)
_CONTINUOUS = (("size", SIZE_RANGE), ("orientation", ORIENTATION_RANGE), ("background_tone", TONE_RANGE))


def block_slices():
    """Index ranges of each attribute inside the raw encoding."""
    out, pos = {}, 0
    for name, cats in _BLOCKS:
        out[name] = slice(pos, pos + len(cats))
        pos += len(cats)
    for name, _ in _CONTINUOUS:
        out[name] = slice(pos, pos + 1)
        pos += 1
    return out


RAW_DIM = sum(len(c) for _, c in _BLOCKS) + len(_CONTINUOUS)


@dataclass
class TextEmbedding:
    values: np.ndarray
    source_attributes: Optional[SceneSpec] = None

    def __len__(self):
        return len(self.values)


@dataclass
class CondGaussian:
    mu: T.Tensor
    log_sigma: T.Tensor

    @property
    def sigma(self):
        return np.exp(self.log_sigma.data)


def encode_attributes(spec, dim=EMBED_DIM):
    """Raw (unnormalized) encoding of ``spec``, zero-padded to ``dim``."""
    if dim < RAW_DIM:
        raise EncodingError(f"embedding dim {dim} < attribute width {RAW_DIM}")
    parts = []
    for name, cats in _BLOCKS:
        value = getattr(spec, name)
        if value not in cats:
            raise EncodingError(f"unknown {name} category {value!r}")
        onehot = np.zeros(len(cats))
        onehot[cats.index(value)] = 1.0
        parts.append(onehot)
    for name, (lo, hi) in _CONTINUOUS:
        v = float(getattr(spec, name))
        if not lo <= v <= hi:
            raise EncodingError(f"{name}={v} outside [{lo}, {hi}]")
        parts.append(np.array([(v - lo) / (hi - lo)]))
    raw = np.concatenate(parts)
    return np.concatenate([raw, np.zeros(dim - RAW_DIM)])


def embed_description(spec, dim=EMBED_DIM):
    raw = encode_attributes(spec, dim)
    return TextEmbedding(raw / np.linalg.norm(raw), spec)


def embed_batch(specs, dim=EMBED_DIM):
    return np.stack([embed_description(s, dim).values for s in specs])


def interpolate_embeddings(e1, e2, t):
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"interpolation weight {t} outside [0, 1]")
    v1 = e1.values if isinstance(e1, TextEmbedding) else np.asarray(e1)
    v2 = e2.values if isinstance(e2, TextEmbedding) else np.asarray(e2)
    if v1.shape != v2.shape:
        raise ShapeError("embeddings differ in dimension")
    if t == 0.0:
        return TextEmbedding(v1.copy())
    if t == 1.0:
        return TextEmbedding(v2.copy())
    return TextEmbedding((1.0 - t) * v1 + t * v2)


class CaParams(Module):
    """Dense layer embed_dim -> 2 * n_g; first half is mu, second half log sigma."""

    def __init__(self, embed_dim, n_g, rng, dtype=np.float64):
        super().__init__()
        self.fc = Dense(embed_dim, 2 * n_g, rng, dtype)
        object.__setattr__(self, "n_g", n_g)

    def distribution(self, phi):
        out = self.fc(phi)
        return CondGaussian(out[:, :self.n_g], out[:, self.n_g:])

    def forward(self, phi, eps):
        return ca_forward(phi, self, eps)


def _as_batch(phi):
    if isinstance(phi, TextEmbedding):
        phi = phi.values
    if isinstance(phi, T.Tensor):
        return phi if phi.ndim == 2 else phi.reshape(1, -1)
    phi = np.asarray(phi)
    return T.Tensor(phi if phi.ndim == 2 else phi[None, :])


def ca_forward(phi, params, eps):
    """Sample ``c_hat = mu + sigma * eps``; returns ``(c_hat, CondGaussian)``.

    Accepts a single embedding or a batch; ``eps`` must match [N, n_g].
    """
    phi = _as_batch(phi)
    eps = np.asarray(eps.data if isinstance(eps, T.Tensor) else eps)
    if eps.ndim == 1:
        eps = eps[None, :]
    if eps.shape != (phi.shape[0], params.n_g):
        raise ShapeError(f"eps shape {eps.shape} != {(phi.shape[0], params.n_g)}")
    if phi.shape[1] != params.fc.weight.shape[1]:
        raise ShapeError(f"embedding dim {phi.shape[1]} != {params.fc.weight.shape[1]}")
    dist = params.distribution(phi)
    c_hat = dist.mu + T.exp(dist.log_sigma) * eps.astype(dist.mu.dtype)
    return c_hat, dist


def kl_per_sample(dist):
    """0.5 * sum(mu^2 + sigma^2 - 2 log sigma - 1) along the last axis."""
    mu, ls = dist.mu, dist.log_sigma
    terms = T.square(mu) + T.exp(ls * 2.0) - ls * 2.0 - 1.0
    return T.sum_(terms, axis=-1) * 0.5


def kl_to_standard_normal(dist):
    """KL(N(mu, diag sigma^2) || N(0, I)), averaged over the batch when batched."""
    per = kl_per_sample(dist)
    return T.mean(per) if per.ndim else per
