"""Procedural bird-like scenes with attribute captions and class-disjoint splits.

Each scene is a colored body ellipse with a wing, a beak, an eye and (for the
crested shape) a crest, drawn over a flat gray background. A class fixes the
body color and the body shape; everything else varies per record.

On disk a dataset is a directory holding ``manifest.json`` plus one raw
little-endian float32 blob per resolution (``lo.f32``, ``hi.f32``).
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, CorruptDatasetError, RenderError
from .rng import derive_rng, make_rng

BODY_COLORS = {
    "red": (0.86, 0.14, 0.12),
    "orange": (0.96, 0.55, 0.10),
    "yellow": (0.95, 0.90, 0.15),
    "green": (0.15, 0.65, 0.20),
    "blue": (0.12, 0.30, 0.90),
    "purple": (0.55, 0.15, 0.70),
}
ACCENT_COLORS = {
    "black": (0.05, 0.05, 0.05),
    "white": (0.97, 0.97, 0.97),
    "brown": (0.45, 0.27, 0.10),
    "pink": (0.98, 0.60, 0.75),
}
SHAPE_KINDS = ("round", "slim", "crested")

SIZE_RANGE = (0.3, 0.8)
ORIENTATION_RANGE = (-45.0, 45.0)
TONE_RANGE = (0.0, 1.0)
# Backgrounds are drawn from a mid-gray band so every body color contrasts.
_TONE_SAMPLING = (0.3, 0.8)

DATASET_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    body_color: str
    accent_color: str
    shape_kind: str
    size: float
    orientation: float
    background_tone: float

    def validate(self):
        if self.body_color not in BODY_COLORS:
            raise RenderError(f"unknown body color {self.body_color!r}")
        if self.accent_color not in ACCENT_COLORS:
            raise RenderError(f"unknown accent color {self.accent_color!r}")
        if self.shape_kind not in SHAPE_KINDS:
            raise RenderError(f"unknown shape kind {self.shape_kind!r}")
        for name, (lo, hi) in (("size", SIZE_RANGE), ("orientation", ORIENTATION_RANGE),
                               ("background_tone", TONE_RANGE)):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise RenderError(f"{name}={v} outside [{lo}, {hi}]")
        return self

    def caption(self):
        return (f"a {self.shape_kind} {self.body_color} bird with {self.accent_color} "
                f"wings, size {self.size:.2f}, tilted {self.orientation:.0f} degrees, "
                f"on a background of tone {self.background_tone:.2f}")


def class_palette(n_classes, seed):
    """Deterministic (body_color, shape_kind) for each class id.

    Colors cycle through a seeded permutation first, so classes share a color
    only once all six are used, and shapes are offset so shared colors never
    share a shape.
    """
    max_classes = len(BODY_COLORS) * len(SHAPE_KINDS)
    if not 2 <= n_classes <= max_classes:
        raise ConfigError(f"n_classes must be in [2, {max_classes}]")
    rng = make_rng(seed)
    colors = [list(BODY_COLORS)[i] for i in rng.permutation(len(BODY_COLORS))]
    shapes = [SHAPE_KINDS[i] for i in rng.permutation(len(SHAPE_KINDS))]
    nc = len(colors)
    return [(colors[i % nc], shapes[(i + i // nc) % len(shapes)]) for i in range(n_classes)]


# ------------------------------------------------------------------ rendering


def _in_triangle(px, py, tri):
    (x1, y1), (x2, y2), (x3, y3) = tri
    d1 = (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
    d2 = (px - x3) * (y2 - y3) - (x2 - x3) * (py - y3)
    d3 = (px - x1) * (y3 - y1) - (x3 - x1) * (py - y1)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def _body_geometry(kind, size):
    # half-length and half-height of the body, as fractions of the frame
    if kind == "round":
        return 0.36 * size, 0.36 * size
    if kind == "slim":
        return 0.50 * size, 0.20 * size
    return 0.42 * size, 0.30 * size


def render_raster(spec, n):
    """Hard-edged [3, n, n] raster in [0, 1]."""
    spec.validate()
    c = (np.arange(n) + 0.5) / n
    gy, gx = np.meshgrid(c, c, indexing="ij")
    # bird-local coordinates: origin at frame center, x toward the beak
    th = np.deg2rad(spec.orientation)
    dx, dy = gx - 0.5, gy - 0.52
    x = np.cos(th) * dx + np.sin(th) * dy
    y = -np.sin(th) * dx + np.cos(th) * dy

    img = np.empty((3, n, n))
    img[:] = spec.background_tone
    body = np.array(BODY_COLORS[spec.body_color])[:, None]
    accent = np.array(ACCENT_COLORS[spec.accent_color])[:, None]

    rx, ry = _body_geometry(spec.shape_kind, spec.size)
    body_mask = (x / rx) ** 2 + (y / ry) ** 2 <= 1.0
    # tail wedge behind the body
    tail = _in_triangle(x, y, [(-0.8 * rx, 0.0), (-1.35 * rx, -0.45 * ry), (-1.35 * rx, 0.45 * ry)])
    img[:, body_mask | tail] = body
    if spec.shape_kind == "crested":
        crest = _in_triangle(x, y, [(0.25 * rx, -0.8 * ry), (0.65 * rx, -0.7 * ry), (0.35 * rx, -1.6 * ry)])
        img[:, crest] = accent
    wing = _in_triangle(x, y, [(-0.55 * rx, -0.15 * ry), (0.35 * rx, 0.05 * ry), (-0.25 * rx, 0.75 * ry)])
    img[:, wing & body_mask] = accent
    beak = _in_triangle(x, y, [(0.92 * rx, -0.18 * ry), (0.92 * rx, 0.18 * ry), (1.0 * rx + 0.12 * spec.size, 0.0)])
    img[:, beak & ~body_mask] = accent
    eye_r = max(0.035 * spec.size, 0.012)
    eye = (x - 0.6 * rx) ** 2 + (y + 0.35 * ry) ** 2 <= eye_r ** 2
    img[:, eye] = 0.02
    return img


def box_downsample(img, factor):
    c, h, w = img.shape
    return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def render_scene(spec, size, supersample=4):
    """Anti-aliased [3, size, size] image in [-1, 1]."""
    raster = render_raster(spec, size * supersample)
    return (box_downsample(raster, supersample) * 2.0 - 1.0).astype(np.float32)


# -------------------------------------------------------------------- dataset


@dataclass
class DatasetRecord:
    spec: SceneSpec
    image_lo: np.ndarray
    image_hi: np.ndarray
    split: str


@dataclass
class SplitManifest:
    train_classes: list
    test_classes: list
    splits: list
    seed: int


class Dataset:
    """Specs plus stacked image arrays; records are views built on demand."""

    def __init__(self, specs, images_lo, images_hi, manifest, meta):
        self.specs = list(specs)
        self.images_lo = images_lo
        self.images_hi = images_hi
        self.manifest = manifest
        self.meta = meta

    def __len__(self):
        return len(self.specs)

    def __getitem__(self, i):
        return DatasetRecord(self.specs[i], self.images_lo[i], self.images_hi[i], self.manifest.splits[i])

    @property
    def class_ids(self):
        return np.array([s.class_id for s in self.specs])

    @property
    def n_classes(self):
        return self.meta["n_classes"]

    def indices(self, split):
        return np.array([i for i, s in enumerate(self.manifest.splits) if s == split], dtype=int)

    def images(self, resolution):
        return {"lo": self.images_lo, "hi": self.images_hi}[resolution]


def random_spec(class_id, palette, rng):
    body, shape = palette[class_id]
    accent = list(ACCENT_COLORS)[int(rng.integers(len(ACCENT_COLORS)))]
    return SceneSpec(
        class_id=int(class_id),
        body_color=body,
        accent_color=accent,
        shape_kind=shape,
        size=float(rng.uniform(*SIZE_RANGE)),
        orientation=float(rng.uniform(*ORIENTATION_RANGE)),
        background_tone=float(rng.uniform(*_TONE_SAMPLING)),
    )


def generate_dataset(n_classes=8, per_class=64, seed=0, resolutions=(16, 32), train_fraction_of_classes=0.75):
    if n_classes < 2 or per_class < 2:
        raise ConfigError("need n_classes >= 2 and per_class >= 2")
    lo, hi = resolutions
    if hi % lo:
        raise ConfigError("high resolution must be a multiple of the low resolution")
    n_train = int(round(train_fraction_of_classes * n_classes))
    if not 1 <= n_train < n_classes:
        raise ConfigError(f"train fraction {train_fraction_of_classes} leaves an empty split")
    palette = class_palette(n_classes, seed)
    order = make_rng(seed + 1).permutation(n_classes)
    train_classes = sorted(int(c) for c in order[:n_train])
    test_classes = sorted(int(c) for c in order[n_train:])

    specs, los, his, splits = [], [], [], []
    for cls in range(n_classes):
        for j in range(per_class):
            idx = cls * per_class + j
            spec = random_spec(cls, palette, derive_rng(seed, idx))
            img_hi = render_scene(spec, hi)
            specs.append(spec)
            his.append(img_hi)
            los.append(box_downsample(img_hi, hi // lo).astype(np.float32))
            splits.append("train" if cls in train_classes else "test")
    manifest = SplitManifest(train_classes, test_classes, splits, seed)
    meta = {"n_classes": n_classes, "per_class": per_class, "lo": lo, "hi": hi,
            "palette": [list(p) for p in palette]}
    return Dataset(specs, np.stack(los), np.stack(his), manifest, meta)


def _sha(arr_bytes):
    return hashlib.sha256(arr_bytes).hexdigest()


def write_dataset(dataset, path, force=False):
    if os.path.exists(path) and os.listdir(path) and not force:
        raise FileExistsError(f"{path} exists and is not empty (use force to overwrite)")
    os.makedirs(path, exist_ok=True)
    blobs = {}
    for key, arr in (("lo", dataset.images_lo), ("hi", dataset.images_hi)):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        with open(os.path.join(path, f"{key}.f32"), "wb") as fh:
            fh.write(raw)
        blobs[key] = {"file": f"{key}.f32", "shape": list(arr.shape), "sha256": _sha(raw)}
    m = dataset.manifest
    manifest = {
        "version": DATASET_VERSION,
        "seed": m.seed,
        "train_classes": m.train_classes,
        "test_classes": m.test_classes,
        "meta": dataset.meta,
        "records": [dict(asdict(s), split=sp) for s, sp in zip(dataset.specs, m.splits)],
        "blobs": blobs,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def load_dataset(path):
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptDatasetError(f"cannot read manifest in {path}: {exc}") from exc
    arrays = {}
    for key, info in manifest["blobs"].items():
        fname = os.path.join(path, info["file"])
        with open(fname, "rb") as fh:
            raw = fh.read()
        if len(raw) != 4 * int(np.prod(info["shape"])) or _sha(raw) != info["sha256"]:
            raise CorruptDatasetError(f"checksum mismatch for {fname}")
        arrays[key] = np.frombuffer(raw, dtype="<f4").reshape(info["shape"]).astype(np.float32)
    specs, splits = [], []
    for rec in manifest["records"]:
        rec = dict(rec)
        splits.append(rec.pop("split"))
        specs.append(SceneSpec(**rec))
    split_manifest = SplitManifest(manifest["train_classes"], manifest["test_classes"], splits, manifest["seed"])
    return Dataset(specs, arrays["lo"], arrays["hi"], split_manifest, manifest["meta"])
