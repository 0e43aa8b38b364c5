import os

import numpy as np
import pytest

from stacklab.checkpoint import load_checkpoint
from stacklab.config import ArchConfig, TrainConfig
from stacklab.evaluation import train_eval_classifier
from stacklab.experiments import (ABLATIONS, ablation_config, cache_path, caption_diversity, dataset_digest,
                                  run_ablations, trained_checkpoint, untrained_models)
from stacklab.synth_data import generate_dataset
from stacklab.training import load_models, train_stage1

ARCH = ArchConfig(n_g=4, n_z=4, n_d=4, base_channels=4)
BASE = TrainConfig(stage1_epochs=1, stage2_epochs=1, batch_size=8)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(4, 6, seed=0)


def test_digest_tracks_content(ds):
    assert dataset_digest(ds) == dataset_digest(generate_dataset(4, 6, seed=0))
    assert dataset_digest(ds) != dataset_digest(generate_dataset(4, 6, seed=1))


def test_ablation_configs():
    cfg, stage = ablation_config(BASE, "single_stage", ARCH)
    assert cfg.single_stage_resolution == ARCH.w and stage == 1
    cfg, stage = ablation_config(BASE, "no_ca", ARCH)
    assert not cfg.use_ca and stage == 2
    assert set(ABLATIONS) == {"stacked", "no_ca", "no_text_twice", "single_stage"}


def test_cache_reuses_checkpoint(ds, tmp_path):
    a = trained_checkpoint(ds, ARCH, BASE, 2, str(tmp_path))
    assert os.path.exists(cache_path(ds, ARCH, BASE, 1, str(tmp_path)))
    path = cache_path(ds, ARCH, BASE, 2, str(tmp_path))
    stamp = os.path.getmtime(path)
    b = trained_checkpoint(ds, ARCH, BASE, 2, str(tmp_path))
    assert os.path.getmtime(path) == stamp
    assert a.equals(b) and b.equals(load_checkpoint(path))


def test_cached_stage1_equals_fresh(ds, tmp_path):
    cached = trained_checkpoint(ds, ARCH, BASE, 1, str(tmp_path))
    assert cached.equals(train_stage1(ds, ARCH, BASE)[0])


def test_text_twice_shares_stage1(ds):
    on = cache_path(ds, ARCH, BASE, 1, "c")
    off = cache_path(ds, ARCH, ablation_config(BASE, "no_text_twice", ARCH)[0], 1, "c")
    assert on == off


def test_untrained_models_stages():
    assert untrained_models(ARCH, BASE, 1).stage == 1
    assert untrained_models(ARCH, BASE, 2).stage == 2


def test_caption_diversity_positive_and_deterministic(ds, tmp_path):
    cfg = ablation_config(BASE, "no_ca", ARCH)[0]
    models = load_models(trained_checkpoint(ds, ARCH, cfg, 2, str(tmp_path)))
    assert caption_diversity(models, ds, n_captions=2, per_caption=3) > 0
    assert caption_diversity(models, ds, n_captions=2, per_caption=3) == caption_diversity(
        models, ds, n_captions=2, per_caption=3)


def test_run_ablations_shape(ds, tmp_path):
    clf = train_eval_classifier(ds, epochs=2)
    res = run_ablations(ds, ARCH, BASE, clf, (0, 1), str(tmp_path), n_samples=8, n_splits=2)
    assert set(res) == set(ABLATIONS)
    for v in res.values():
        assert len(v["score"]) == 2 and len(v["diversity"]) == 2
        assert all(1.0 - 1e-9 <= s <= 4 + 1e-9 for s in v["score"])
        assert all(np.isfinite(v["diversity"]))
