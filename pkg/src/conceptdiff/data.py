"""Procedural attributed shapes dataset.

Categories are bundles over discrete attribute axes (shape, hue, size);
rendering is hard-edged (no anti-aliasing) so output is bit-exact across
platforms. Images are (3, H, W) float32 in [-1, 1].
"""

import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, CorruptionError
from .seeds import rng_for

IMAGE_HW = 16

SHAPES = ("circle", "square", "triangle", "cross")
HUES = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")

HUE_RGB = {
    "red": (0.90, -0.60, -0.60),
    "green": (-0.60, 0.90, -0.60),
    "blue": (-0.60, -0.60, 0.90),
    "yellow": (0.90, 0.90, -0.60),
}

# shape extent in pixels; small strictly inside large for every shape
SIZE_SCALE = {"small": 3.1, "large": 5.2}


@dataclass(frozen=True)
class AttributeVocab:
    axes: tuple = (("shape", SHAPES), ("hue", HUES), ("size", SIZES))

    def __post_init__(self):
        names = [a for a, _ in self.axes]
        if len(set(names)) != len(names):
            raise ArgumentError("duplicate axis names")
        for name, values in self.axes:
            if len(values) < 2:
                raise ArgumentError(f"axis {name} needs >= 2 values")

    def values(self, axis):
        for name, vals in self.axes:
            if name == axis:
                return tuple(vals)
        raise ArgumentError(f"unknown axis {axis!r}")

    def check_bundle(self, bundle):
        for axis, value in bundle.items():
            if value not in self.values(axis):
                raise ArgumentError(f"unknown value {value!r} for axis {axis!r}")

    def to_json(self):
        return [[name, list(vals)] for name, vals in self.axes]

    @classmethod
    def from_json(cls, obj):
        return cls(axes=tuple((name, tuple(vals)) for name, vals in obj))


@dataclass(frozen=True)
class CategorySpec:
    id: int
    name: str
    bundle: dict

    def to_json(self):
        return {"id": self.id, "name": self.name, "bundle": dict(self.bundle)}

    @classmethod
    def from_json(cls, obj):
        return cls(id=obj["id"], name=obj["name"], bundle=dict(obj["bundle"]))


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    label: int


@dataclass(frozen=True)
class Nuisance:
    dx: float = 0.0
    dy: float = 0.0
    background: float = -0.6
    intensity: float = 1.0

    @classmethod
    def draw(cls, rng):
        return cls(
            dx=float(rng.uniform(-1.5, 1.5)),
            dy=float(rng.uniform(-1.5, 1.5)),
            background=float(rng.uniform(-0.9, -0.3)),
            intensity=float(rng.uniform(0.85, 1.0)),
        )


def default_categories():
    """Eight classes off the 4x4 (shape,hue) grid, size fixed per shape.

    Each shape appears with two hues, so every class has a same-shape
    neighbor differing only in hue -- the similarity structure the
    weighted negative sampling relies on.
    """
    picks = [
        ("circle", "red", "large"),
        ("circle", "blue", "large"),
        ("square", "red", "small"),
        ("square", "blue", "small"),
        ("triangle", "green", "large"),
        ("triangle", "yellow", "large"),
        ("cross", "green", "small"),
        ("cross", "yellow", "small"),
    ]
    cats = []
    for i, (shape, hue, size) in enumerate(picks):
        cats.append(
            CategorySpec(
                id=i,
                name=f"{size} {hue} {shape}",
                bundle={"shape": shape, "hue": hue, "size": size},
            )
        )
    return cats


def shape_mask(shape, size_scale, dx, dy, hw=IMAGE_HW):
    """Boolean foreground mask on the pixel-center grid."""
    c = (hw - 1) / 2.0
    yy, xx = np.mgrid[0:hw, 0:hw]
    u = xx - (c + dx)
    v = yy - (c + dy)
    s = size_scale
    if shape == "circle":
        return u * u + v * v <= s * s
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= s * 0.85
    if shape == "triangle":
        # upward triangle: apex at (0,-s), base at v = +s*0.8
        return (v <= s * 0.8) & (v >= -s) & (np.abs(u) <= (v + s) * 0.62)
    if shape == "cross":
        w = max(s * 0.38, 0.55)
        arm_h = (np.abs(u) <= s) & (np.abs(v) <= w)
        arm_v = (np.abs(v) <= s) & (np.abs(u) <= w)
        return arm_h | arm_v
    raise ArgumentError(f"unknown shape {shape!r}")


def rasterize(spec: CategorySpec, vocab: AttributeVocab, nuisance: Nuisance, hw=IMAGE_HW):
    vocab.check_bundle(spec.bundle)
    bundle = spec.bundle
    mask = shape_mask(bundle["shape"], SIZE_SCALE[bundle["size"]], nuisance.dx, nuisance.dy, hw)
    img = np.full((3, hw, hw), np.float32(nuisance.background), dtype=np.float32)
    rgb = HUE_RGB[bundle["hue"]]
    for ch in range(3):
        img[ch][mask] = np.float32(rgb[ch] * nuisance.intensity)
    return np.clip(img, -1.0, 1.0)


def render_sample(spec: CategorySpec, vocab: AttributeVocab, rng) -> Sample:
    return Sample(image=rasterize(spec, vocab, Nuisance.draw(rng)), label=spec.id)


# ---------------------------------------------------------------------------
# on-disk dataset


@dataclass
class DatasetManifest:
    seed: int
    n_per_class: int
    image_shape: tuple
    categories: list
    vocab: AttributeVocab
    train_per_class: int
    test_per_class: int
    checksums: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "seed": self.seed,
            "n_per_class": self.n_per_class,
            "image_shape": list(self.image_shape),
            "categories": [c.to_json() for c in self.categories],
            "attribute_vocab": self.vocab.to_json(),
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "checksums": dict(self.checksums),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            seed=obj["seed"],
            n_per_class=obj["n_per_class"],
            image_shape=tuple(obj["image_shape"]),
            categories=[CategorySpec.from_json(c) for c in obj["categories"]],
            vocab=AttributeVocab.from_json(obj["attribute_vocab"]),
            train_per_class=obj["train_per_class"],
            test_per_class=obj["test_per_class"],
            checksums=dict(obj["checksums"]),
        )


@dataclass
class Dataset:
    train_x: np.ndarray  # (N, 3, H, W) float32
    train_y: np.ndarray  # (N,) uint16
    test_x: np.ndarray
    test_y: np.ndarray
    manifest: DatasetManifest

    @property
    def categories(self):
        return self.manifest.categories

    @property
    def vocab(self):
        return self.manifest.vocab

    def images_of(self, label, split="train"):
        x, y = (self.train_x, self.train_y) if split == "train" else (self.test_x, self.test_y)
        return x[y == label]


def file_crc(path) -> str:
    with open(path, "rb") as fh:
        return f"{zlib.crc32(fh.read()):08x}"


def build_dataset(categories, n_per_class, seed, out_dir, vocab=None, hw=IMAGE_HW,
                  test_frac=0.1) -> DatasetManifest:
    """Render n_per_class samples per category and write the split files."""
    if n_per_class < 2:
        raise ArgumentError("n_per_class must be >= 2")
    vocab = vocab or AttributeVocab()
    bundles = [tuple(sorted(c.bundle.items())) for c in categories]
    if len(set(bundles)) != len(bundles):
        raise ArgumentError("category bundles must be pairwise distinct")
    n_test = max(1, int(round(n_per_class * test_frac)))
    n_train = n_per_class - n_test

    train_x, train_y, test_x, test_y = [], [], [], []
    for cat in categories:
        for i in range(n_per_class):
            s = render_sample(cat, vocab, rng_for(seed, "render", cat.id, i))
            if i < n_train:
                train_x.append(s.image)
                train_y.append(cat.id)
            else:
                test_x.append(s.image)
                test_y.append(cat.id)

    os.makedirs(out_dir, exist_ok=True)
    arrays = {
        "train.f32": np.stack(train_x).astype("<f4"),
        "test.f32": np.stack(test_x).astype("<f4"),
        "train.labels.u16": np.asarray(train_y, dtype="<u2"),
        "test.labels.u16": np.asarray(test_y, dtype="<u2"),
    }
    checksums = {}
    for name, arr in arrays.items():
        path = os.path.join(out_dir, name)
        with open(path, "wb") as fh:
            fh.write(arr.tobytes())
        checksums[name] = file_crc(path)

    manifest = DatasetManifest(
        seed=seed,
        n_per_class=n_per_class,
        image_shape=(3, hw, hw),
        categories=list(categories),
        vocab=vocab,
        train_per_class=n_train,
        test_per_class=n_test,
        checksums=checksums,
    )
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1)
    return manifest


def load_dataset(path) -> Dataset:
    """Load and validate a dataset directory written by build_dataset."""
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise CorruptionError(f"missing manifest: {mpath}")
    with open(mpath) as fh:
        manifest = DatasetManifest.from_json(json.load(fh))

    c, h, w = manifest.image_shape
    n_cls = len(manifest.categories)
    counts = {
        "train.f32": manifest.train_per_class * n_cls * c * h * w,
        "test.f32": manifest.test_per_class * n_cls * c * h * w,
        "train.labels.u16": manifest.train_per_class * n_cls,
        "test.labels.u16": manifest.test_per_class * n_cls,
    }
    raw = {}
    for name, n_items in counts.items():
        fpath = os.path.join(path, name)
        if not os.path.exists(fpath):
            raise CorruptionError(f"missing data file: {name}")
        if file_crc(fpath) != manifest.checksums.get(name):
            raise CorruptionError(f"checksum mismatch for {name}")
        dtype = "<f4" if name.endswith(".f32") else "<u2"
        arr = np.fromfile(fpath, dtype=dtype)
        if arr.size != n_items:
            raise CorruptionError(f"{name}: expected {n_items} items, found {arr.size}")
        raw[name] = arr

    def imgs(arr, n):
        return arr.astype(np.float32).reshape(n, c, h, w)

    return Dataset(
        train_x=imgs(raw["train.f32"], manifest.train_per_class * n_cls),
        train_y=raw["train.labels.u16"].astype(np.uint16),
        test_x=imgs(raw["test.f32"], manifest.test_per_class * n_cls),
        test_y=raw["test.labels.u16"].astype(np.uint16),
        manifest=manifest,
    )
