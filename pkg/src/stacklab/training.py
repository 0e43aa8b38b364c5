"""Two-phase adversarial training, checkpoint/resume and sampling.

Stage I trains (G0, D0) on low-resolution images. Stage II loads a frozen G0
(eval mode, no gradients, no optimizer state) and trains (G, D) on
high-resolution images, redrawing the sketch ``s0 = G0(z, c0)`` with fresh
noise every step. Every batch runs one discriminator update followed by one
generator update.

All randomness for a phase flows through one PCG64 stream whose state is
stored in each checkpoint, so a resumed run replays the uninterrupted one
bit for bit.
"""

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import ModelCheckpoint, save_checkpoint
from .conditioning import embed_batch
from .config import ArchConfig, TrainConfig, fingerprint
from .errors import (ConfigError, IncompatibleCheckpointError, InvalidBatchError, NumericalError,
                     StateError)
from .gan_stage1 import Stage1Discriminator, Stage1Generator, generator_objective, matching_d_loss
from .gan_stage2 import Stage2Discriminator, Stage2Generator
from .optim import Adam
from .rng import derive_rng, get_state, set_state

log = logging.getLogger(__name__)


def lr_schedule(epoch, config):
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return config.initial_lr * 2.0 ** (-(epoch // config.lr_halving_period))


# ------------------------------------------------------------- pair batches


@dataclass
class PairBatch:
    positives: tuple
    negatives_a: tuple
    negatives_b: tuple
    partner: np.ndarray = None
    degenerate: bool = False


def mismatch_index(class_ids):
    """Partner index for every sample's mismatched embedding.

    Sample ``i`` starts from the cyclic neighbour ``i + 1`` and keeps shifting
    until the partner belongs to another class. Returns ``(partner,
    degenerate)``; a single-class batch falls back to the plain shift by one
    with ``degenerate=True``.
    """
    cls = np.asarray(class_ids)
    n = len(cls)
    if n < 2:
        raise InvalidBatchError("mismatched pairs need a batch of at least 2")
    partner = (np.arange(n) + 1) % n
    if np.all(cls == cls[0]):
        return partner, True
    for i in range(n):
        k = 1
        while cls[(i + k) % n] == cls[i]:
            k += 1
        partner[i] = (i + k) % n
    return partner, False


def make_pair_batch(real, phi, class_ids, fake, rng=None):
    """Group (real, phi), (real, mismatched phi), (detached fake, phi).

    ``rng`` is accepted for interface symmetry; the mismatch assignment is a
    deterministic function of the class ids.
    """
    partner, degenerate = mismatch_index(class_ids)
    if degenerate:
        log.warning("single-class batch of %d samples; mismatched pairs share a class", len(class_ids))
    phi_arr = phi.data if isinstance(phi, T.Tensor) else np.asarray(phi)
    fake = fake.detach() if isinstance(fake, T.Tensor) else T.Tensor(fake)
    return PairBatch((real, phi_arr), (real, phi_arr[partner]), (fake, phi_arr), partner, degenerate)


# ------------------------------------------------------------------- logs


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec["epoch"] <= self.records[-1]["epoch"]:
            raise StateError("epoch indices must increase")
        self.records.append(rec)

    def column(self, key):
        return [r[key] for r in self.records]

    def write_jsonl(self, path, append=False):
        with open(path, "a" if append else "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def read_jsonl(cls, path):
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# ----------------------------------------------------------------- models


@dataclass
class Models:
    arch: ArchConfig
    train: TrainConfig
    g0: Stage1Generator = None
    d0: Stage1Discriminator = None
    g2: Stage2Generator = None
    d2: Stage2Discriminator = None

    @property
    def stage(self):
        return 2 if self.g2 is not None else 1


def _dtype(cfg):
    return np.float32 if cfg.dtype == "float32" else np.float64


def stage1_resolution(arch, cfg):
    return cfg.single_stage_resolution or arch.w0


def build_stage1(arch, cfg, rng, dtype=None):
    dtype = dtype or _dtype(cfg)
    res = stage1_resolution(arch, cfg)
    g0 = Stage1Generator(arch, rng, dtype, use_ca=cfg.use_ca, resolution=res)
    d0 = Stage1Discriminator(arch, rng, dtype, resolution=res)
    return g0, d0


def build_stage2(arch, cfg, rng, dtype=None):
    dtype = dtype or _dtype(cfg)
    g2 = Stage2Generator(arch, rng, dtype, use_ca=cfg.use_ca, text_twice=cfg.text_twice)
    d2 = Stage2Discriminator(arch, rng, dtype)
    return g2, d2


def load_state(module, tensors):
    state = module.state()
    if list(state) != list(tensors):
        missing = set(state) ^ set(tensors)
        raise IncompatibleCheckpointError(f"tensor names differ: {sorted(missing)[:5]}")
    for name, t in state.items():
        arr = tensors[name]
        if arr.shape != t.shape:
            raise IncompatibleCheckpointError(f"{name}: shape {arr.shape} != {t.shape}")
        t.data = np.array(arr, dtype=t.dtype)


def load_models(ckpt, dtype=np.float32):
    arch = ArchConfig(**ckpt.arch)
    cfg = TrainConfig(**ckpt.train)
    rng = derive_rng(0, 0)  # weights are overwritten
    g0, d0 = build_stage1(arch, cfg, rng, dtype)
    load_state(g0, ckpt.prefixed("g0."))
    models = Models(arch, cfg, g0=g0)
    if ckpt.has("d0."):
        load_state(d0, ckpt.prefixed("d0."))
        models.d0 = d0
    if ckpt.stage == 2:
        g2, d2 = build_stage2(arch, cfg, rng, dtype)
        load_state(g2, ckpt.prefixed("g2."))
        load_state(d2, ckpt.prefixed("d2."))
        object.__setattr__(d2, "trained", ckpt.epoch > 0)
        models.g2, models.d2 = g2, d2
    for m in (models.g0, models.d0, models.g2, models.d2):
        if m is not None:
            m.eval()
    return models


def _snapshot(stage, epoch, arch, cfg, rng, nets, opts, frozen_nets=()):
    tensors, moments = {}, {}
    for prefix, net in list(frozen_nets) + list(nets):
        for k, t in net.state().items():
            tensors[prefix + k] = np.array(t.data, dtype=np.float32)
    for prefix, opt in opts:
        for k, st in opt.states.items():
            moments[prefix + k] = (np.array(st.m, dtype=np.float32), np.array(st.v, dtype=np.float32), st.t)
    return ModelCheckpoint(
        stage=stage, epoch=epoch, tensors=tensors, moments=moments, rng_state=get_state(rng),
        fingerprint=fingerprint(arch, cfg, stage), stage1_fingerprint=fingerprint(arch, cfg, 1),
        arch=dataclasses.asdict(arch), train=dataclasses.asdict(cfg),
    )


def _restore_optimizer(opt, prefix, ckpt):
    for k, st in opt.states.items():
        if prefix + k not in ckpt.moments:
            raise IncompatibleCheckpointError(f"missing optimizer moments for {prefix + k}")
        m, v, t = ckpt.moments[prefix + k]
        st.m = np.array(m, dtype=st.m.dtype)
        st.v = np.array(v, dtype=st.v.dtype)
        st.t = int(t)


def _check_resume(ckpt, arch, cfg, stage):
    if ckpt.stage != stage:
        raise IncompatibleCheckpointError(f"cannot resume stage {stage} from a stage-{ckpt.stage} checkpoint")
    if ckpt.fingerprint != fingerprint(arch, cfg, stage):
        raise IncompatibleCheckpointError("config fingerprint differs from the checkpoint's")


def _stage_images(dataset, arch, cfg, stage):
    if stage == 2:
        res = arch.w
    else:
        res = stage1_resolution(arch, cfg)
    for key in ("lo", "hi"):
        imgs = dataset.images(key)
        if imgs.shape[-1] == res:
            return imgs
    raise ConfigError(f"dataset has no {res}x{res} images")


def _fit(stage, dataset, arch, cfg, g, d, g_opt, d_opt, rng, start_epoch, end_epoch,
         snapshot, out_dir=None, sketcher=None, progress=None):
    dtype = _dtype(cfg)
    images = _stage_images(dataset, arch, cfg, stage)
    phis = embed_batch(dataset.specs, arch.embed_dim).astype(dtype)
    class_ids = dataset.class_ids
    train_idx = dataset.indices("train")
    if len(train_idx) < 2:
        raise ConfigError("training split has fewer than 2 records")
    bs = cfg.batch_size
    g.train()
    d.train()
    train_log = TrainLog()
    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(train_idx)
        d_losses, g_losses, kls, degenerate = [], [], [], 0
        for lo in range(0, len(order), bs):
            idx = order[lo:lo + bs]
            n = len(idx)
            if n < 2:
                continue
            real = T.Tensor(images[idx].astype(dtype))
            phi_np = phis[idx]
            phi = T.Tensor(phi_np)
            z = rng.standard_normal((n, arch.n_z)).astype(dtype)
            eps0 = rng.standard_normal((n, arch.n_g)).astype(dtype) if stage == 2 else None
            eps = rng.standard_normal((n, arch.n_g)).astype(dtype)
            if stage == 1:
                fake, dist = g(z, phi, eps)
            else:
                with T.no_grad():
                    s0, _ = sketcher(z, phi, eps0)
                fake, dist = g(s0, phi, eps)
            pb = make_pair_batch(real, phi_np, class_ids[idx], fake)
            degenerate += pb.degenerate

            d.zero_grad()
            d_loss = matching_d_loss(d, real, pb.negatives_b[0], phi, T.Tensor(pb.negatives_a[1]))
            _check_finite(d_loss, "discriminator", epoch, snapshot, out_dir, stage)
            T.backward(d_loss)
            d_opt.step(lr)

            g.zero_grad()
            g_loss, kl = generator_objective(fake, dist, phi, d, cfg.lambda_kl, cfg.use_ca, cfg.non_saturating)
            _check_finite(g_loss, "generator", epoch, snapshot, out_dir, stage)
            T.backward(g_loss)
            g_opt.step(lr)

            d_losses.append(float(d_loss.item()))
            g_losses.append(float(g_loss.item()))
            kls.append(float(kl.item()) if kl is not None else 0.0)
        rec = {"stage": stage, "epoch": epoch, "d_loss": float(np.mean(d_losses)),
               "g_loss": float(np.mean(g_losses)), "kl_term": float(np.mean(kls)), "lr": lr,
               "wall_clock": time.perf_counter() - t0, "degenerate_batches": int(degenerate)}
        train_log.append(rec)
        if progress is not None:
            progress(rec)
        done = epoch + 1
        if out_dir is not None:
            with open(os.path.join(out_dir, f"stage{stage}_log.jsonl"), "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            if done % cfg.checkpoint_every == 0 and done != end_epoch:
                save_checkpoint(snapshot(done), os.path.join(out_dir, f"stage{stage}_e{done:04d}.sgck"))
    return train_log


def _check_finite(loss, which, epoch, snapshot, out_dir, stage):
    if np.isfinite(loss.data).all():
        return
    path = None
    if out_dir is not None:
        path = os.path.join(out_dir, f"stage{stage}_diagnostic.sgck")
        save_checkpoint(snapshot(epoch), path)
    raise NumericalError(f"non-finite {which} loss at epoch {epoch}", path)


def train_stage1(dataset, arch, cfg, out_dir=None, resume=None, progress=None):
    """Train (G0, D0) up to ``cfg.stage1_epochs``; returns (checkpoint, log)."""
    arch.validate()
    cfg.validate()
    rng = derive_rng(cfg.seed, 1)
    g0, d0 = build_stage1(arch, cfg, rng)
    g_opt, d_opt = Adam(g0.parameters()), Adam(d0.parameters())
    start = 0
    if resume is not None:
        _check_resume(resume, arch, cfg, 1)
        load_state(g0, resume.prefixed("g0."))
        load_state(d0, resume.prefixed("d0."))
        _restore_optimizer(g_opt, "g0.", resume)
        _restore_optimizer(d_opt, "d0.", resume)
        set_state(rng, resume.rng_state)
        start = resume.epoch

    def snapshot(epoch):
        return _snapshot(1, epoch, arch, cfg, rng, [("g0.", g0), ("d0.", d0)],
                         [("g0.", g_opt), ("d0.", d_opt)])

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    train_log = _fit(1, dataset, arch, cfg, g0, d0, g_opt, d_opt, rng, start, cfg.stage1_epochs,
                     snapshot, out_dir, progress=progress)
    ckpt = snapshot(max(cfg.stage1_epochs, start))
    if out_dir is not None:
        save_checkpoint(ckpt, os.path.join(out_dir, "stage1.sgck"))
    return ckpt, train_log


def train_stage2(dataset, stage1_ckpt, arch, cfg, out_dir=None, resume=None, progress=None):
    """Train (G, D) on top of the frozen G0 from ``stage1_ckpt``."""
    arch.validate()
    cfg.validate()
    if cfg.single_stage_resolution is not None:
        raise ConfigError("single-stage configurations have no Stage II")
    if stage1_ckpt.stage != 1:
        raise IncompatibleCheckpointError("stage-2 training needs a stage-1 checkpoint")
    if stage1_ckpt.stage1_fingerprint != fingerprint(arch, cfg, 1):
        raise IncompatibleCheckpointError("stage-1 checkpoint was trained with a different config")
    dtype = _dtype(cfg)
    g0, _ = build_stage1(arch, cfg, derive_rng(0, 0), dtype)
    load_state(g0, stage1_ckpt.prefixed("g0."))
    g0.eval()
    for p in g0.parameters().values():
        p.requires_grad = False

    rng = derive_rng(cfg.seed, 2)
    g2, d2 = build_stage2(arch, cfg, rng)
    g_opt, d_opt = Adam(g2.parameters()), Adam(d2.parameters())
    start = 0
    if resume is not None:
        _check_resume(resume, arch, cfg, 2)
        if resume.prefixed("g0.").keys() != stage1_ckpt.prefixed("g0.").keys() or any(
                v.tobytes() != stage1_ckpt.tensors["g0." + k].tobytes() for k, v in resume.prefixed("g0.").items()):
            raise IncompatibleCheckpointError("resume checkpoint holds a different Stage-I generator")
        load_state(g2, resume.prefixed("g2."))
        load_state(d2, resume.prefixed("d2."))
        _restore_optimizer(g_opt, "g2.", resume)
        _restore_optimizer(d_opt, "d2.", resume)
        set_state(rng, resume.rng_state)
        start = resume.epoch

    def snapshot(epoch):
        return _snapshot(2, epoch, arch, cfg, rng, [("g2.", g2), ("d2.", d2)],
                         [("g2.", g_opt), ("d2.", d_opt)], frozen_nets=[("g0.", g0)])

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    train_log = _fit(2, dataset, arch, cfg, g2, d2, g_opt, d_opt, rng, start, cfg.stage2_epochs,
                     snapshot, out_dir, sketcher=g0, progress=progress)
    ckpt = snapshot(max(cfg.stage2_epochs, start))
    if out_dir is not None:
        save_checkpoint(ckpt, os.path.join(out_dir, "stage2.sgck"))
    return ckpt, train_log


# ---------------------------------------------------------------- sampling


def sample(source, phi_batch, z_batch, stage, eps0=None, eps=None):
    """Eval-mode images for embeddings ``phi_batch`` and noise ``z_batch``.

    ``eps0``/``eps`` are the Stage-I and Stage-II CA noise (zeros if omitted).
    Stage 2 runs G0 then G. Returns a float array [N, 3, H, W] in [-1, 1].
    """
    models = load_models(source) if isinstance(source, ModelCheckpoint) else source
    if stage == 2 and models.g2 is None:
        raise StateError("stage-2 sampling needs a stage-2 checkpoint")
    if stage not in (1, 2):
        raise ConfigError("stage must be 1 or 2")
    g0 = models.g0
    dtype = g0.stem.weight.dtype
    phi = np.asarray(phi_batch, dtype=dtype)
    phi = phi if phi.ndim == 2 else phi[None, :]
    n = phi.shape[0]
    z = np.asarray(z_batch, dtype=dtype).reshape(n, models.arch.n_z)
    ng = models.arch.n_g
    eps0 = np.zeros((n, ng), dtype) if eps0 is None else np.asarray(eps0, dtype=dtype).reshape(n, ng)
    eps = np.zeros((n, ng), dtype) if eps is None else np.asarray(eps, dtype=dtype).reshape(n, ng)
    nets = [m for m in (models.g0, models.g2) if m is not None]
    prev = [m.training for m in nets]
    for m in nets:
        m.eval()
    try:
        with T.no_grad():
            s0, _ = g0(z, T.Tensor(phi), eps0)
            if stage == 1:
                return s0.data.copy()
            img, _ = models.g2(s0, T.Tensor(phi), eps)
            return img.data.copy()
    finally:
        for m, flag in zip(nets, prev):
            m.train(flag)


def sample_batched(models, phis, rng, stage, batch=256):
    """Random-noise samples for every row of ``phis`` (fresh z and eps each)."""
    out = []
    ng, nz = models.arch.n_g, models.arch.n_z
    for lo in range(0, len(phis), batch):
        ph = phis[lo:lo + batch]
        n = len(ph)
        z = rng.standard_normal((n, nz))
        eps0 = rng.standard_normal((n, ng))
        eps = rng.standard_normal((n, ng))
        out.append(sample(models, ph, z, stage, eps0, eps))
    return np.concatenate(out)


def interpolation_sweep(models, e1, e2, n_points=11, stage=2):
    """Images for ``interpolate_embeddings(e1, e2, t)`` at ``n_points`` evenly
    spaced t in [0, 1], with z = 0 and zero CA noise.

    Each point is sampled on its own so the endpoints reproduce
    ``sample(models, e, zeros, stage)`` bit for bit.
    """
    from .conditioning import interpolate_embeddings

    if n_points < 2:
        raise ConfigError("an interpolation sweep needs at least 2 points")
    ts = [i / (n_points - 1) for i in range(n_points)]
    z = np.zeros((1, models.arch.n_z))
    rows = [sample(models, interpolate_embeddings(e1, e2, t).values[None, :], z, stage) for t in ts]
    return np.array(ts), np.concatenate(rows)
