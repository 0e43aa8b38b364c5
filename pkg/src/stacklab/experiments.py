"""Multi-seed ablation runs with an on-disk checkpoint cache.

Finished checkpoints are stored under ``cache_dir`` keyed by dataset digest,
stage fingerprint and epoch count, so repeated runs of the same protocol only
pay for the scoring. Training is bit-deterministic, which makes a cached
checkpoint indistinguishable from a fresh one.
"""

import dataclasses
import hashlib
import json
import logging
import os

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import embed_batch
from .config import fingerprint
from .evaluation import caption_pool, diversity_metric, score_generator
from .rng import derive_rng
from .training import Models, build_stage1, build_stage2, load_models, sample, train_stage1, train_stage2

log = logging.getLogger(__name__)

# name -> TrainConfig overrides; "stage" is the stage whose samples get scored
ABLATIONS = {
    "stacked": ({}, 2),
    "no_ca": ({"use_ca": False}, 2),
    "no_text_twice": ({"text_twice": False}, 2),
    "single_stage": ({"single_stage_resolution": None}, 1),  # resolution filled from arch.w
}


def dataset_digest(dataset):
    h = hashlib.sha256()
    h.update(json.dumps(dataset.meta, sort_keys=True).encode())
    h.update(np.ascontiguousarray(dataset.images_hi).tobytes())
    h.update(json.dumps(dataset.manifest.splits).encode())
    return h.hexdigest()[:12]


def untrained_models(arch, cfg, stage):
    """Freshly initialized networks, seeded like the start of training."""
    g0, _ = build_stage1(arch, cfg, derive_rng(cfg.seed, 1), np.float32)
    models = Models(arch, cfg, g0=g0)
    if stage == 2:
        models.g2, _ = build_stage2(arch, cfg, derive_rng(cfg.seed, 2), np.float32)
    return models


def cache_path(dataset, arch, cfg, stage, cache_dir):
    tag = dataset_digest(dataset)
    if stage == 1:
        name = f"s1_{tag}_{fingerprint(arch, cfg, 1)}_{cfg.stage1_epochs}.sgck"
    else:
        name = f"s2_{tag}_{fingerprint(arch, cfg, 2)}_{cfg.stage1_epochs}_{cfg.stage2_epochs}.sgck"
    return os.path.join(cache_dir, name)


def _cached(path, make):
    if os.path.exists(path):
        return load_checkpoint(path)
    ckpt = make()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_checkpoint(ckpt, path)
    return ckpt


def trained_checkpoint(dataset, arch, cfg, stage, cache_dir):
    """Train (or fetch) the final checkpoint of ``stage`` for this config."""
    ckpt1 = _cached(cache_path(dataset, arch, cfg, 1, cache_dir), lambda: train_stage1(dataset, arch, cfg)[0])
    if stage == 1:
        return ckpt1
    return _cached(cache_path(dataset, arch, cfg, 2, cache_dir),
                   lambda: train_stage2(dataset, ckpt1, arch, cfg)[0])


def ablation_config(base, name, arch):
    overrides, stage = ABLATIONS[name]
    overrides = dict(overrides)
    if "single_stage_resolution" in overrides:
        overrides["single_stage_resolution"] = arch.w
    return dataclasses.replace(base, **overrides), stage


def caption_diversity(models, dataset, n_captions=8, per_caption=16, seed=0, stage=None):
    """diversity_metric over ``per_caption`` random-noise samples per caption."""
    stage = stage or models.stage
    specs = caption_pool(dataset, n_captions, seed)
    rng = derive_rng(seed, 13)
    ng, nz = models.arch.n_g, models.arch.n_z
    groups = []
    for spec in specs:
        phi = np.repeat(embed_batch([spec], models.arch.embed_dim), per_caption, axis=0)
        groups.append(sample(models, phi, rng.standard_normal((per_caption, nz)), stage,
                             rng.standard_normal((per_caption, ng)), rng.standard_normal((per_caption, ng))))
    return diversity_metric(groups)


def run_ablations(dataset, arch, base, classifier, seeds, cache_dir, names=tuple(ABLATIONS),
                  n_samples=2048, n_splits=4, diversity=True):
    """Scores (and, optionally, caption diversity) for every ablation and seed.

    Returns ``{name: {"score": [...], "diversity": [...]}}`` with one entry per seed.
    """
    out = {name: {"score": [], "diversity": []} for name in names}
    for seed in seeds:
        for name in names:
            cfg, stage = ablation_config(dataclasses.replace(base, seed=seed), name, arch)
            ckpt = trained_checkpoint(dataset, arch, cfg, stage, cache_dir)
            models = load_models(ckpt)
            report = score_generator(models, classifier, dataset, n_samples, n_splits, seed, stage)
            out[name]["score"].append(report.mean)
            if diversity:
                out[name]["diversity"].append(caption_diversity(models, dataset, seed=seed, stage=stage))
            log.info("seed %d %s: score %.4f", seed, name, report.mean)
    return out
