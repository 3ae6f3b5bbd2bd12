"""Procedural long-tail image dataset.

Each class is a (shape, color) pair; size, texture and placement vary per
image. Class sizes follow ``max(n_min, floor(n_max * (c+1)**-gamma))`` and a
class-balanced validation split is generated alongside the training split.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring")
COLORS = ("red", "green", "blue", "yellow", "purple")
SIZES = ("small", "medium", "large")
TEXTURES = ("solid", "striped", "dotted", "checkered")

RGB = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.12, 0.72, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.58, 0.15, 0.75),
}
BACKGROUND = 0.85
SIZE_FRACTION = {"small": 0.16, "medium": 0.23, "large": 0.30}

MANY, MEDIUM, FEW = "Many", "Medium", "Few"

_SPLIT_CODE = {"train": 0, "val": 1, "pretrain": 2}


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 10
    n_max: int = 200
    n_min: int = 5
    gamma: float = 1.5
    image_size: int = 32
    seed: int = 0
    noise: float = 0.05
    val_per_class: int = 20

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.num_classes > len(SHAPES) * len(COLORS):
            raise ConfigError(f"at most {len(SHAPES) * len(COLORS)} (shape, color) classes available")
        if not self.n_max >= self.n_min >= 1:
            raise ConfigError("require n_max >= n_min >= 1")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")


@dataclass
class SyntheticImage:
    id: str
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int
    attributes: dict[str, str]


@dataclass
class SyntheticDataset:
    config: DataConfig
    classnames: list[str]
    images: list[SyntheticImage]
    val_images: list[SyntheticImage] = field(default_factory=list)
    class_counts: list[int] = field(default_factory=list)
    separability: dict[str, float] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def priors(self) -> np.ndarray:
        return priors(self.class_counts)

    @property
    def split_of_class(self) -> list[str]:
        return class_split(self.class_counts)

    def by_id(self) -> dict[str, SyntheticImage]:
        return {im.id: im for im in self.images + self.val_images}

    def ids(self) -> list[str]:
        return [im.id for im in self.images]

    def labels(self, split: str = "train") -> np.ndarray:
        ims = self.images if split == "train" else self.val_images
        return np.array([im.label for im in ims], dtype=np.int64)

    def pixels(self, split: str = "train") -> np.ndarray:
        ims = self.images if split == "train" else self.val_images
        return np.stack([im.pixels for im in ims])


def class_attributes(label: int) -> tuple[str, str]:
    """(shape, color) of a class; diagonal enumeration so tail classes reuse head attributes."""
    q, r = divmod(label, len(SHAPES))
    return SHAPES[r], COLORS[(r + q) % len(COLORS)]


def default_classnames(num_classes: int) -> list[str]:
    return [f"class{chr(ord('A') + c)}" if c < 26 else f"class{c}" for c in range(num_classes)]


def class_counts(num_classes: int, n_max: int, n_min: int, gamma: float) -> list[int]:
    # the 1e-9 nudge keeps exact integers like 300 * 3**-1 from flooring to 99
    return [max(n_min, math.floor(n_max * (c + 1) ** (-gamma) + 1e-9)) for c in range(num_classes)]


def class_split(counts: Sequence[int]) -> list[str]:
    out = []
    for n in counts:
        if n > 100:
            out.append(MANY)
        elif n >= 20:
            out.append(MEDIUM)
        else:
            out.append(FEW)
    return out


def priors(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or counts.sum() <= 0:
        raise ContractError("priors need a non-empty dataset")
    return counts / counts.sum()


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "triangle":
        # apex up, base at cy + r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if shape == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    raise ContractError(f"unknown shape {shape!r}")


def _texture(texture: str, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    yi, xi = yy.astype(int), xx.astype(int)
    if texture == "solid":
        return np.ones_like(yy)
    if texture == "striped":
        return np.where((yi // 2) % 2 == 0, 1.0, 0.55)
    if texture == "dotted":
        return np.where((yi % 3 == 1) & (xi % 3 == 1), 0.45, 1.0)
    if texture == "checkered":
        return np.where(((yi // 3) + (xi // 3)) % 2 == 0, 1.0, 0.6)
    raise ContractError(f"unknown texture {texture!r}")


def render(label: int, rng: np.random.Generator, image_size: int, noise: float) -> tuple[np.ndarray, dict[str, str]]:
    """Draw one image for ``label``; every random choice comes from ``rng``."""
    shape, color = class_attributes(label)
    size = SIZES[int(rng.integers(len(SIZES)))]
    texture = TEXTURES[int(rng.integers(len(TEXTURES)))]
    s = image_size
    r = SIZE_FRACTION[size] * s
    jitter = max(1.0, s * 0.5 - r - 1.0)
    cy, cx = s / 2 + rng.uniform(-jitter, jitter), s / 2 + rng.uniform(-jitter, jitter)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    mask = _shape_mask(shape, yy, xx, cy, cx, r)
    shade = _texture(texture, yy, xx)
    img = np.full((s, s, 3), BACKGROUND)
    rgb = np.asarray(RGB[color])
    img[mask] = shade[mask][:, None] * rgb[None, :]
    img += rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, {"shape": shape, "color": color, "size": size, "texture": texture}


def _image_rng(seed: int, split: str, label: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODE[split], label, index])


def generate(config: DataConfig = DataConfig()) -> SyntheticDataset:
    config.validate()
    counts = class_counts(config.num_classes, config.n_max, config.n_min, config.gamma)
    train: list[SyntheticImage] = []
    val: list[SyntheticImage] = []
    for split, per_class, out in (("train", counts, train), ("val", [config.val_per_class] * len(counts), val)):
        k = 0
        for label, n in enumerate(per_class):
            for i in range(n):
                px, attrs = render(label, _image_rng(config.seed, split, label, i), config.image_size, config.noise)
                out.append(SyntheticImage(f"{split}-{k:06d}", px, label, attrs))
                k += 1
    ds = SyntheticDataset(config, default_classnames(config.num_classes), train, val, counts)
    ds.separability = separability(ds)
    if ds.separability["mean_prototype_distance"] <= ds.separability["noise_spread"]:
        log.warning("class prototypes are closer than the noise spread: %s", ds.separability)
    return ds


def generate_pool(config: DataConfig, per_class: int, split: str = "pretrain") -> SyntheticDataset:
    """A class-balanced pool drawn from a random stream disjoint from train and val."""
    config.validate()
    images = []
    k = 0
    for label in range(config.num_classes):
        for i in range(per_class):
            px, attrs = render(label, _image_rng(config.seed, split, label, i), config.image_size, config.noise)
            images.append(SyntheticImage(f"{split}-{k:06d}", px, label, attrs))
            k += 1
    return SyntheticDataset(config, default_classnames(config.num_classes), images, [],
                            [per_class] * config.num_classes)


def separability(ds: SyntheticDataset) -> dict[str, float]:
    """Distances between class-mean images versus the expected norm of the pixel noise."""
    px = ds.pixels("train").reshape(len(ds.images), -1).astype(np.float64)
    labels = ds.labels("train")
    protos = np.stack([px[labels == c].mean(axis=0) for c in range(ds.num_classes)])
    d = np.linalg.norm(protos[:, None, :] - protos[None, :, :], axis=-1)
    off = d[~np.eye(len(d), dtype=bool)]
    return {
        "mean_prototype_distance": float(off.mean()),
        "min_prototype_distance": float(off.min()),
        "noise_spread": float(ds.config.noise * math.sqrt(px.shape[1])),
    }


def batch_iter(ids: Sequence[str] | SyntheticDataset, batch_size: int, seed: int, epoch: int) -> Iterator[list[str]]:
    """Seeded per-epoch permutation of ids, cut into batches; the last short batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if isinstance(ids, SyntheticDataset):
        ids = ids.ids()
    ids = list(ids)
    order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(len(ids))
    for start in range(0, len(ids), batch_size):
        yield [ids[i] for i in order[start:start + batch_size]]


# persistence: meta.json + index.json + pixels.bin (little-endian float32)

def save_dataset(ds: SyntheticDataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    with open(path / "pixels.bin", "wb") as fh:
        for split, ims in (("train", ds.images), ("val", ds.val_images)):
            for im in ims:
                blob = im.pixels.astype("<f4").tobytes()
                index[im.id] = {"offset": offset, "label": im.label, "split": split, "attributes": im.attributes}
                fh.write(blob)
                offset += len(blob)
    meta = {
        "format": "vlmkd-synthetic/1",
        "config": asdict(ds.config),
        "classnames": ds.classnames,
        "class_counts": ds.class_counts,
        "priors": ds.priors.tolist(),
        "split_of_class": ds.split_of_class,
        "class_attributes": [list(class_attributes(c)) for c in range(ds.num_classes)],
        "num_train": len(ds.images),
        "num_val": len(ds.val_images),
        "separability": ds.separability,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (path / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> SyntheticDataset:
    path = Path(path)
    for name in ("meta.json", "index.json", "pixels.bin"):
        if not (path / name).exists():
            raise FileNotFoundError(f"{path / name} missing; create it with `vlmkd gen-data --out {path}`")
    meta = json.loads((path / "meta.json").read_text())
    index = json.loads((path / "index.json").read_text())
    config = DataConfig(**meta["config"])
    s = config.image_size
    raw = np.fromfile(path / "pixels.bin", dtype="<f4")
    train, val = [], []
    for id_, rec in sorted(index.items()):
        start = rec["offset"] // 4
        px = raw[start:start + s * s * 3].reshape(s, s, 3).astype(np.float32)
        im = SyntheticImage(id_, px, int(rec["label"]), dict(rec["attributes"]))
        (train if rec["split"] == "train" else val).append(im)
    return SyntheticDataset(config, list(meta["classnames"]), train, val,
                            [int(n) for n in meta["class_counts"]], dict(meta.get("separability", {})))
