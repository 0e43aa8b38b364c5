import dataclasses
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stacklab.checkpoint import load_checkpoint
from stacklab.conditioning import embed_batch, embed_description
from stacklab.config import ArchConfig, TrainConfig
from stacklab.errors import ConfigError, IncompatibleCheckpointError, InvalidBatchError, StateError
from stacklab.synth_data import generate_dataset
from stacklab.training import (TrainLog, interpolation_sweep, load_models, lr_schedule, make_pair_batch,
                               mismatch_index, sample, train_stage1, train_stage2)

ARCH = ArchConfig(n_g=4, n_z=4, n_d=4, base_channels=4, embed_dim=32)


def cfg(**kw):
    base = dict(stage1_epochs=2, stage2_epochs=2, batch_size=8, checkpoint_every=1, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(4, 8, seed=0)


@pytest.fixture(scope="module")
def stage1(data):
    return train_stage1(data, ARCH, cfg())


@pytest.fixture(scope="module")
def stage2(data, stage1):
    return train_stage2(data, stage1[0], ARCH, cfg())


# ------------------------------------------------------------- lr schedule

@pytest.mark.parametrize("epoch,lr", [(0, 2e-4), (99, 2e-4), (100, 1e-4), (199, 1e-4), (200, 5e-5)])
def test_lr_schedule_examples(epoch, lr):
    assert lr_schedule(epoch, TrainConfig()) == lr


def test_lr_schedule_negative_epoch():
    with pytest.raises(ConfigError):
        lr_schedule(-1, TrainConfig())


@settings(max_examples=100, deadline=None)
@given(epoch=st.integers(0, 5000), period=st.integers(1, 300))
def test_lr_is_monotone_and_halving(epoch, period):
    c = TrainConfig(lr_halving_period=period)
    assert lr_schedule(epoch + 1, c) <= lr_schedule(epoch, c)
    assert lr_schedule(epoch + period, c) == lr_schedule(epoch, c) / 2


# ------------------------------------------------------------ pair batches

def test_two_sample_batch_swaps():
    partner, degenerate = mismatch_index([0, 1])
    assert list(partner) == [1, 0] and not degenerate


def test_pair_batch_groups():
    real = np.arange(3.0)
    phi = np.eye(3)
    pb = make_pair_batch(real, phi, [0, 1, 2], np.zeros(3))
    assert np.array_equal(pb.positives[1], phi)
    assert np.array_equal(pb.negatives_a[1], phi[[1, 2, 0]])
    assert np.array_equal(pb.negatives_b[1], phi)
    assert pb.negatives_b[0].node is None


@settings(max_examples=200, deadline=None)
@given(ids=st.lists(st.integers(0, 3), min_size=2, max_size=40))
def test_mismatch_never_pairs_same_class(ids):
    partner, degenerate = mismatch_index(ids)
    ids = np.array(ids)
    assert np.all(partner != np.arange(len(ids)))
    if len(set(ids.tolist())) > 1:
        assert not degenerate
        assert np.all(ids[partner] != ids)
    else:
        assert degenerate


def test_mismatch_needs_two():
    with pytest.raises(InvalidBatchError):
        mismatch_index([0])


def test_train_log_epochs_increase():
    log = TrainLog()
    log.append({"epoch": 0})
    with pytest.raises(StateError):
        log.append({"epoch": 0})


# ----------------------------------------------------------------- training

def test_smoke_finite_and_shapes(stage1):
    ckpt, log = stage1
    assert ckpt.stage == 1 and ckpt.epoch == 2
    for key in ("d_loss", "g_loss", "kl_term"):
        assert all(math.isfinite(v) for v in log.column(key))
    assert log.column("epoch") == [0, 1]


def test_initial_d_loss_near_two_ln2(stage1):
    assert abs(stage1[1].records[0]["d_loss"] - 2 * math.log(2)) <= 0.3


def test_training_deterministic(data, stage1):
    again, _ = train_stage1(data, ARCH, cfg())
    assert again.equals(stage1[0])


def test_no_ca_reports_zero_kl(data):
    _, log = train_stage1(data, ARCH, cfg(stage1_epochs=1, use_ca=False))
    assert log.column("kl_term") == [0.0]


def test_resume_is_bit_exact(data, stage1, tmp_path):
    train_stage1(data, ARCH, cfg(), out_dir=str(tmp_path))
    mid = load_checkpoint(os.path.join(tmp_path, "stage1_e0001.sgck"))
    assert mid.epoch == 1
    resumed, log = train_stage1(data, ARCH, cfg(), resume=mid)
    assert log.column("epoch") == [1]
    assert resumed.equals(stage1[0])


def test_resume_rejects_other_config(data, stage1):
    with pytest.raises(IncompatibleCheckpointError):
        train_stage1(data, ARCH, cfg(lambda_kl=2.0), resume=stage1[0])


def test_stage2_freezes_stage1(stage1, stage2):
    s1, s2 = stage1[0], stage2[0]
    assert s2.stage == 2
    g0_before = s1.prefixed("g0.")
    g0_after = s2.prefixed("g0.")
    assert g0_before.keys() == g0_after.keys()
    assert all(g0_before[k].tobytes() == g0_after[k].tobytes() for k in g0_before)
    assert all(k.startswith(("g2.", "d2.")) for k in s2.moments)


def test_stage2_needs_matching_stage1(data, stage1):
    with pytest.raises(IncompatibleCheckpointError):
        train_stage2(data, stage1[0], ARCH, cfg(lambda_kl=0.5))


def test_stage2_accepts_text_twice_ablation(data, stage1):
    ckpt, _ = train_stage2(data, stage1[0], ARCH, cfg(stage2_epochs=1, text_twice=False))
    assert ckpt.epoch == 1


def test_single_stage_has_no_stage2(data):
    c = cfg(single_stage_resolution=32, stage1_epochs=1)
    ckpt, _ = train_stage1(data, ARCH, c)
    assert load_models(ckpt).g0.resolution == 32
    with pytest.raises(ConfigError):
        train_stage2(data, ckpt, ARCH, c)


# ----------------------------------------------------------------- sampling

def test_sample_shapes_and_errors(data, stage1, stage2):
    phi = embed_batch(data.specs[:3], ARCH.embed_dim)
    z = np.zeros((3, ARCH.n_z))
    assert sample(stage1[0], phi, z, 1).shape == (3, 3, 16, 16)
    out = sample(stage2[0], phi, z, 2)
    assert out.shape == (3, 3, 32, 32) and np.all(np.abs(out) <= 1)
    with pytest.raises(StateError):
        sample(stage1[0], phi, z, 2)
    with pytest.raises(ConfigError):
        sample(stage2[0], phi, z, 3)


def test_sample_is_deterministic(data, stage2):
    models = load_models(stage2[0])
    phi = embed_batch(data.specs[:2], ARCH.embed_dim)
    z = np.random.default_rng(0).standard_normal((2, ARCH.n_z))
    assert np.array_equal(sample(models, phi, z, 2), sample(models, phi, z, 2))


def test_interpolation_sweep_endpoints(data, stage2):
    models = load_models(stage2[0])
    e1, e2 = embed_description(data.specs[0]), embed_description(data.specs[-1])
    ts, imgs = interpolation_sweep(models, e1, e2, n_points=5)
    assert list(ts) == [0, 0.25, 0.5, 0.75, 1.0]
    z = np.zeros((1, ARCH.n_z))
    assert np.array_equal(imgs[0], sample(models, e1.values[None], z, 2)[0])
    assert np.array_equal(imgs[-1], sample(models, e2.values[None], z, 2)[0])
    with pytest.raises(ConfigError):
        interpolation_sweep(models, e1, e2, n_points=1)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(ConfigError):
        dataclasses.replace(ARCH, w=48).validate()
