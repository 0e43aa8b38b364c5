"""``stacklab`` command line: data generation, training, sampling and evaluation.

Structured output is JSON lines on stdout; human diagnostics go to stderr.
Exit codes: 0 success, 1 usage or config error, 2 numeric failure, 3 I/O.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import plotting
from .checkpoint import load_checkpoint
from .conditioning import embed_batch, embed_description
from .config import RunConfig, fingerprint
from .errors import (ConfigError, CorruptDatasetError, IncompatibleCheckpointError, NumericalError,
                     OptimizerError, RenderError, StateError)
from .rng import derive_rng
from .synth_data import generate_dataset, load_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
RESOLUTIONS = {"16x16": 16, "32x32": 32, "64x64": 64}

log = logging.getLogger("stacklab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class ExitReport:
    command: str
    wall_clock: float
    artifacts: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(event="exit", **dataclasses.asdict(self))


def emit(obj, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(obj, sort_keys=True) + "\n")
    stream.flush()


# ------------------------------------------------------------------ parsing


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--stage", type=int, choices=(1, 2))
    common.add_argument("--stage1-checkpoint")
    common.add_argument("--checkpoint", help="model checkpoint to sample or evaluate")
    common.add_argument("--resume", help="checkpoint to resume training from")
    common.add_argument("--no-ca", action="store_true", help="disable conditioning augmentation")
    common.add_argument("--no-text-twice", action="store_true", help="Stage-II ignores the text embedding")
    common.add_argument("--single-stage", action="store_true", help="train Stage-I directly at --resolution")
    common.add_argument("--resolution", choices=sorted(RESOLUTIONS))
    common.add_argument("--samples", type=int)
    common.add_argument("--epochs", type=int, help="override both stage epoch counts")
    common.add_argument("--zero-noise", action="store_true", help="sample with z = 0")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = _Parser(prog="stacklab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "sample", "interpolate", "evaluate", "retrieve", "selfcheck"):
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args):
    """Merge the JSON config file with command-line overrides and validate."""
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    try:
        cfg = RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    t, a = cfg.train, cfg.arch
    if args.seed is not None:
        t.seed = args.seed
    if args.no_ca:
        t.use_ca = False
    if args.no_text_twice:
        t.text_twice = False
    if args.epochs is not None:
        t.stage1_epochs = t.stage2_epochs = args.epochs
    if args.resolution:
        res = RESOLUTIONS[args.resolution]
        if args.single_stage:
            t.single_stage_resolution = res
        else:
            a.w = a.h = res
    elif args.single_stage:
        t.single_stage_resolution = a.w
    if args.samples is not None:
        cfg.samples = args.samples
    if args.out:
        cfg.out = args.out
    if args.data:
        cfg.data = args.data
    return cfg.validate()


def _persist(cfg, out, command):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"run_config.{command}.json")
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    return path


def _need(value, flag):
    if not value:
        raise UsageError(f"{flag} is required for this command")
    return value


def _guard(path, force):
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} already exists (pass --force to overwrite)")


def _load_ckpt(path):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _check_arch(ckpt, cfg):
    if ckpt.arch != dataclasses.asdict(cfg.arch):
        raise IncompatibleCheckpointError("checkpoint architecture differs from the run config")


# ----------------------------------------------------------------- commands


def cmd_gen_data(cfg, args):
    out = _need(cfg.out, "--out")
    ds = generate_dataset(cfg.n_classes, cfg.per_class, cfg.train.seed, (cfg.arch.w0, cfg.arch.w),
                          cfg.train_fraction)
    try:
        write_dataset(ds, out, force=args.force)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from exc
    sheet = plotting.contact_sheet(ds.images_hi[np.linspace(0, len(ds) - 1, 64).astype(int)],
                                   os.path.join(out, "contact_sheet.png"), title="dataset sample")
    cfg.data = out
    arts = [os.path.join(out, "manifest.json"), sheet, _persist(cfg, out, "gen-data")]
    m = ds.manifest
    return arts, {"records": len(ds), "train_classes": m.train_classes, "test_classes": m.test_classes}


def _dataset(cfg):
    return load_dataset(_need(cfg.data, "--data"))


def cmd_train(cfg, args):
    from .training import train_stage1, train_stage2

    out = _need(cfg.out, "--out")
    stage = args.stage or 1
    if cfg.train.single_stage_resolution is not None and stage == 2:
        raise UsageError("--single-stage has no Stage II")
    s1_path = None
    if stage == 2:
        s1_path = _need(args.stage1_checkpoint, "--stage1-checkpoint")
        if not os.path.exists(s1_path):
            raise UsageError(f"stage-1 checkpoint not found: {s1_path}")
    final = os.path.join(out, f"stage{stage}.sgck")
    _guard(final, args.force)
    ds = _dataset(cfg)
    os.makedirs(out, exist_ok=True)
    log_path = os.path.join(out, f"stage{stage}_log.jsonl")
    resume = _load_ckpt(args.resume) if args.resume else None
    if resume is None and os.path.exists(log_path):
        os.remove(log_path)
    cfg_path = _persist(cfg, out, f"train{stage}")

    def progress(rec):
        emit(dict(event="epoch", **rec))

    if stage == 1:
        ckpt, tlog = train_stage1(ds, cfg.arch, cfg.train, out, resume, progress)
    else:
        ckpt, tlog = train_stage2(ds, _load_ckpt(s1_path), cfg.arch, cfg.train, out, resume, progress)
    curves = plotting.training_curves({f"stage {stage}": tlog.records}, os.path.join(out, f"stage{stage}_curves.png"))
    last = tlog.records[-1] if tlog.records else {}
    metrics = {"epoch": ckpt.epoch, "fingerprint": ckpt.fingerprint,
               **{k: last[k] for k in ("d_loss", "g_loss", "kl_term") if k in last}}
    return [final, log_path, curves, cfg_path], metrics


def _models(cfg, args, need_stage=None):
    from .training import load_models

    path = _need(args.checkpoint or args.stage1_checkpoint, "--checkpoint")
    ckpt = _load_ckpt(path)
    _check_arch(ckpt, cfg)
    if ckpt.fingerprint != fingerprint(cfg.arch, cfg.train, ckpt.stage):
        raise IncompatibleCheckpointError("checkpoint was trained with a different configuration")
    if need_stage == 2 and ckpt.stage != 2:
        raise StateError("this command needs a stage-2 checkpoint")
    return load_models(ckpt), ckpt


def _captions(ds, n, split="test"):
    """``n`` records spread evenly over the split (test classes by default)."""
    idx = ds.indices(split)
    if len(idx) == 0:
        idx = np.arange(len(ds))
    pick = idx[np.linspace(0, len(idx) - 1, n).astype(int)]
    return [ds.specs[i] for i in pick]


def _write_raw(out, name, arr, meta):
    np.ascontiguousarray(arr, dtype="<f4").tofile(os.path.join(out, f"{name}.f32"))
    with open(os.path.join(out, f"{name}.json"), "w") as fh:
        json.dump(dict(meta, shape=list(arr.shape), dtype="float32"), fh, indent=1)
    return [os.path.join(out, f"{name}.f32"), os.path.join(out, f"{name}.json")]


def cmd_sample(cfg, args):
    from .training import sample

    out = _need(cfg.out, "--out")
    png = os.path.join(out, "samples.png")
    _guard(png, args.force)
    ds = _dataset(cfg)
    models, _ = _models(cfg, args)
    n = args.samples if args.samples is not None else 8
    specs = _captions(ds, n)
    rng = derive_rng(cfg.train.seed, 20)
    stage1, stage2 = [], []
    for spec in specs:
        # one caption per forward pass keeps outputs independent of batch size
        phi = embed_description(spec, cfg.arch.embed_dim).values[None, :]
        z = np.zeros((1, cfg.arch.n_z)) if args.zero_noise else rng.standard_normal((1, cfg.arch.n_z))
        stage1.append(sample(models, phi, z, 1)[0])
        if models.stage == 2:
            stage2.append(sample(models, phi, z, 2)[0])
    os.makedirs(out, exist_ok=True)
    captions = [s.caption() for s in specs]
    arts = []
    if stage2:
        plotting.stage_comparison(stage1, stage2, captions, png)
        arts += _write_raw(out, "samples_stage2", np.stack(stage2), {"captions": captions})
    else:
        plotting.image_grid([stage1], png, col_labels=[c[:18] for c in captions])
    arts += _write_raw(out, "samples_stage1", np.stack(stage1), {"captions": captions})
    arts += [png, _persist(cfg, out, "sample")]
    return arts, {"captions": len(specs), "stage": models.stage}


def cmd_interpolate(cfg, args):
    from .training import interpolation_sweep

    out = _need(cfg.out, "--out")
    png = os.path.join(out, "interpolation.png")
    _guard(png, args.force)
    ds = _dataset(cfg)
    models, _ = _models(cfg, args)
    spec_a, spec_b = _captions(ds, 2)
    e1, e2 = (embed_description(s, cfg.arch.embed_dim) for s in (spec_a, spec_b))
    rows, labels = [], []
    for stage in (1, 2)[:models.stage]:
        ts, imgs = interpolation_sweep(models, e1, e2, 11, stage)
        rows.append(list(imgs))
        labels.append(f"Stage-{'I' * stage}")
    os.makedirs(out, exist_ok=True)
    plotting.image_grid(rows, png, row_labels=labels, col_labels=[f"{t:.1f}" for t in ts])
    meta = {"t": ts.tolist(), "caption_a": spec_a.caption(), "caption_b": spec_b.caption()}
    arts = []
    for stage, row in enumerate(rows, start=1):
        arts += _write_raw(out, f"interpolation_stage{stage}", np.stack(row), meta)
    return arts + [png, _persist(cfg, out, "interpolate")], {"points": len(ts)}


def cmd_evaluate(cfg, args):
    from .evaluation import score_generator, train_eval_classifier
    from .experiments import untrained_models

    out = _need(cfg.out, "--out")
    path = os.path.join(out, "score.json")
    _guard(path, args.force)
    ds = _dataset(cfg)
    models, _ = _models(cfg, args)
    clf = train_eval_classifier(ds, seed=cfg.train.seed)
    report = score_generator(models, clf, ds, cfg.samples, cfg.n_splits, cfg.train.seed)
    # same architecture at initialization, for reference
    base = untrained_models(cfg.arch, cfg.train, models.stage)
    untrained = score_generator(base, clf, ds, cfg.samples, cfg.n_splits, cfg.train.seed)
    result = {"event": "score", "stage": models.stage, "classifier_heldout_accuracy": clf.heldout_accuracy,
              "score": report.to_dict(), "untrained_score": untrained.to_dict()}
    emit(result)
    os.makedirs(out, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(result, fh, indent=1)
    metrics = {"inception_score": report.mean, "inception_std": report.std,
               "untrained_inception_score": untrained.mean, "classifier_accuracy": clf.heldout_accuracy}
    return [path, _persist(cfg, out, "evaluate")], metrics


def cmd_retrieve(cfg, args):
    from .evaluation import nn_retrieval
    from .training import sample

    out = _need(cfg.out, "--out")
    png = os.path.join(out, "retrieval.png")
    _guard(png, args.force)
    ds = _dataset(cfg)
    models, _ = _models(cfg, args, need_stage=2)
    n = args.samples if args.samples is not None else 5
    specs = _captions(ds, n)
    rng = derive_rng(cfg.train.seed, 21)
    q_phi = embed_batch(specs, cfg.arch.embed_dim)
    queries = np.concatenate([sample(models, q_phi[i:i + 1], rng.standard_normal((1, cfg.arch.n_z)), 2)
                              for i in range(n)])
    train_idx = ds.indices("train")
    t_imgs = ds.images("hi")[train_idx]
    t_phi = embed_batch([ds.specs[i] for i in train_idx], cfg.arch.embed_dim)
    results = nn_retrieval(queries, q_phi, t_imgs, t_phi, models.d2, k=5)
    for r in results:
        d = r.to_dict()
        d["ranked"] = [[int(train_idx[j]), dist] for j, dist in d["ranked"]]
        emit(dict(event="retrieval", caption=specs[r.query_id].caption(), **d))
    os.makedirs(out, exist_ok=True)
    plotting.retrieval_sheet(queries, [[t_imgs[j] for j, _ in r.ranked] for r in results], png)
    return [png, _persist(cfg, out, "retrieve")], {"queries": n, "k": 5}


def cmd_selfcheck(cfg, args):
    from .selfcheck import run_all

    results = run_all(cfg.train.seed)
    for r in results:
        emit(dict(event="check", **r.to_dict()))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"self-check failures: {', '.join(failed)}")
    return [], {"checks": len(results), "failed": 0}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
    "retrieve": cmd_retrieve,
    "selfcheck": cmd_selfcheck,
}


def _threads():
    raw = os.environ.get("STACKLAB_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"STACKLAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"STACKLAB_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="stacklab: %(message)s")
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        n_threads = _threads()
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n_threads):
            arts, metrics = COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, IncompatibleCheckpointError, StateError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericalError, OptimizerError) as exc:
        path = getattr(exc, "checkpoint_path", None)
        log.error("%s%s", exc, f" (diagnostic checkpoint: {path})" if path else "")
        return EXIT_NUMERIC
    except (OSError, CorruptDatasetError, RenderError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    emit(ExitReport(args.command, time.perf_counter() - t0, arts, metrics).to_dict())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
