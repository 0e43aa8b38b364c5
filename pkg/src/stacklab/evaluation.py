"""Inception score against a locally trained classifier, discriminator-feature
retrieval, and per-caption sample diversity."""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .conditioning import embed_batch
from .errors import ConfigError, InvalidArgumentError, StateError
from .gan_stage2 import discriminator_features
from .nn import Dense, Module, Sequential, down_block
from .optim import Adam
from .rng import derive_rng
from .synth_data import random_spec


class EvalClassifier(Module):
    """Two down-sampling blocks and a dense layer over ``n_classes`` logits.

    Inputs at a lower resolution than ``resolution`` are nearest-upsampled.
    """

    def __init__(self, n_classes, resolution, rng, width=16, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "n_classes", n_classes)
        object.__setattr__(self, "resolution", resolution)
        object.__setattr__(self, "heldout_accuracy", None)
        self.features = Sequential(down_block(3, width, rng, dtype, batch_norm=False),
                                   down_block(width, 2 * width, rng, dtype))
        self.fc = Dense(2 * width * (resolution // 4) ** 2, n_classes, rng, dtype)

    def forward(self, images):
        x = images if isinstance(images, T.Tensor) else T.Tensor(np.asarray(images, dtype=self.fc.weight.dtype))
        if x.shape[-1] != self.resolution:
            factor = self.resolution // x.shape[-1]
            if factor * x.shape[-1] != self.resolution:
                raise ConfigError(f"cannot resize {x.shape[-1]} to {self.resolution}")
            x = T.nearest_upsample(x, factor)
        h = self.features(x)
        return self.fc(h.reshape(h.shape[0], -1))

    def predict_proba(self, images, batch=256):
        """Class posteriors as float64 rows summing to one."""
        prev = self.training
        self.eval()
        out = []
        try:
            with T.no_grad():
                for lo in range(0, len(images), batch):
                    logits = self(np.asarray(images[lo:lo + batch], dtype=self.fc.weight.dtype))
                    out.append(T.softmax_np(logits.data.astype(np.float64)))
        finally:
            self.train(prev)
        return np.concatenate(out)

    def predict(self, images):
        return self.predict_proba(images).argmax(axis=1)


def train_eval_classifier(dataset, n_classes=None, resolution="hi", epochs=30, batch_size=32,
                          lr=1e-3, holdout=0.25, seed=0):
    """Supervised training on real training-split images.

    A seeded ``holdout`` fraction of every training class is kept aside and
    the accuracy on it is stored as ``heldout_accuracy``.
    """
    images = dataset.images(resolution)
    labels = dataset.class_ids
    idx = dataset.indices("train")
    classes = np.unique(labels[idx])
    if len(classes) < 2:
        raise InvalidArgumentError("classifier needs at least two classes in the training split")
    n_classes = n_classes or dataset.n_classes
    rng = derive_rng(seed, 7)
    fit_idx, held_idx = [], []
    for c in classes:
        members = rng.permutation(idx[labels[idx] == c])
        n_hold = max(1, int(round(holdout * len(members))))
        held_idx.extend(members[:n_hold])
        fit_idx.extend(members[n_hold:])
    fit_idx, held_idx = np.array(fit_idx), np.array(held_idx)

    clf = EvalClassifier(n_classes, images.shape[-1], rng)
    opt = Adam(clf.parameters(), beta1=0.9)
    clf.train()
    for _ in range(epochs):
        order = rng.permutation(fit_idx)
        for lo in range(0, len(order), batch_size):
            b = order[lo:lo + batch_size]
            if len(b) < 2:
                continue
            clf.zero_grad()
            loss = T.cross_entropy(clf(images[b]), labels[b])
            T.backward(loss)
            opt.step(lr)
    acc = float((clf.predict(images[held_idx]) == labels[held_idx]).mean())
    object.__setattr__(clf, "heldout_accuracy", acc)
    return clf


@dataclass
class ScoreReport:
    mean: float
    std: float
    n_samples: int
    n_splits: int

    def to_dict(self):
        return asdict(self)


def inception_score_from_posteriors(posteriors, n_splits=4):
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise InvalidArgumentError("need a non-empty [N, C] posterior matrix")
    if len(p) < n_splits:
        raise InvalidArgumentError(f"{len(p)} samples cannot fill {n_splits} splits")
    scores = []
    for part in np.array_split(p, n_splits):
        # a column of identical values averages to that value; np.mean can be an ulp off
        constant = part.min(axis=0) == part.max(axis=0)
        marginal = np.where(constant, part[0], part.mean(axis=0))
        # base 2 keeps power-of-two class counts exact (exp(log 8) is not 8.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log2(part) - np.log2(marginal)), 0.0)
        scores.append(np.exp2(terms.sum(axis=1).mean()))
    return ScoreReport(float(np.mean(scores)), float(np.std(scores)), len(p), n_splits)


def inception_score(samples, classifier, n_splits=4):
    if len(samples) == 0:
        raise InvalidArgumentError("no samples to score")
    return inception_score_from_posteriors(classifier.predict_proba(samples), n_splits)


def caption_pool(dataset, n, seed, classes=None):
    """``n`` random specs from the training classes, uniformly over class."""
    rng = derive_rng(seed, 11)
    palette = [tuple(p) for p in dataset.meta["palette"]]
    classes = dataset.manifest.train_classes if classes is None else classes
    picks = rng.choice(classes, size=n)
    return [random_spec(int(c), palette, rng) for c in picks]


def score_generator(models, classifier, dataset, n_samples=2048, n_splits=4, seed=0, stage=None):
    """Inception score of fresh samples for captions drawn from training classes."""
    from .training import sample_batched

    stage = stage or models.stage
    specs = caption_pool(dataset, n_samples, seed)
    phis = embed_batch(specs, models.arch.embed_dim)
    imgs = sample_batched(models, phis, derive_rng(seed, 12), stage)
    return inception_score(imgs, classifier, n_splits)


@dataclass
class RetrievalResult:
    query_id: int
    ranked: list  # [(training index, L2 distance)], ascending

    def to_dict(self):
        return {"query_id": self.query_id, "ranked": [[int(i), float(d)] for i, d in self.ranked]}


def _features(images, phis, d2):
    # one sample per call keeps every row's arithmetic identical across calls
    return np.concatenate([discriminator_features(images[i:i + 1], phis[i:i + 1], d2) for i in range(len(images))])


def nn_retrieval(query_images, query_phis, train_images, train_phis, d2_params, k=5, query_ids=None):
    n_train = len(train_images)
    if k > n_train or k < 1:
        raise InvalidArgumentError(f"k={k} outside [1, {n_train}]")
    if d2_params is None:
        raise StateError("retrieval needs a trained Stage-II discriminator")
    qf = _features(query_images, query_phis, d2_params)
    tf = _features(train_images, train_phis, d2_params)
    dist = np.sqrt(((qf[:, None, :] - tf[None, :, :]) ** 2).sum(axis=-1))
    ids = range(len(qf)) if query_ids is None else query_ids
    results = []
    train_index = np.arange(n_train)
    for qid, row in zip(ids, dist):
        order = np.lexsort((train_index, row))[:k]
        results.append(RetrievalResult(int(qid), [(int(j), float(row[j])) for j in order]))
    return results


def diversity_metric(per_caption_samples):
    """Mean over captions of the mean per-pixel population std across samples."""
    groups = [np.asarray(g, dtype=np.float64) for g in per_caption_samples]
    if not groups:
        raise InvalidArgumentError("no captions given")
    vals = []
    for g in groups:
        if len(g) < 2:
            raise InvalidArgumentError("each caption needs at least two samples")
        vals.append(g.std(axis=0).mean())
    return float(np.mean(vals))
