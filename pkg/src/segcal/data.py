"""SGCL container I/O, image-level splits and the synthetic generator.

SGCL layout (all little-endian)::

    b"SGCL"  u32 version=1  u32 num_classes  u32 image_count
    per image: u32 id  u32 H  u32 W  f32[H*W*K] logits  u16[H*W] labels

Logits are row-major with the class index fastest; label 0xFFFF is ignore.
"""
from dataclasses import asdict, dataclass
import hashlib
import json
import math
from pathlib import Path
import struct

import numpy as np

from .core import IGNORE, SegImage
from .errors import (
    BadMagic, ClassCountMismatch, EmptyDataset, EmptySplit, InputError, TrailingBytes,
    TruncatedPayload, VersionUnsupported,
)

MAGIC = b"SGCL"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_IMAGE = struct.Struct("<III")


@dataclass
class Dataset:
    num_classes: int
    images: list

    def __post_init__(self):
        for img in self.images:
            if img.num_classes != self.num_classes:
                raise ClassCountMismatch(
                    f"image {img.image_id} has {img.num_classes} classes, dataset has {self.num_classes}")

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def subset(self, indices):
        return Dataset(self.num_classes, [self.images[i] for i in indices])

    def ids(self):
        return [img.image_id for img in self.images]

    def flat(self):
        """Non-ignored pixels of every image as ``(logits (N, K), labels (N,))``."""
        zs, ys = [], []
        for img in self.images:
            keep = img.labels != IGNORE
            zs.append(img.logits[keep])
            ys.append(img.labels[keep])
        if not zs:
            return np.zeros((0, self.num_classes), np.float32), np.zeros(0, np.int64)
        return np.concatenate(zs), np.concatenate(ys).astype(np.int64)


def write_container(dataset, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dataset.num_classes, len(dataset.images)))
        for img in dataset.images:
            h, w = img.shape
            fh.write(_IMAGE.pack(img.image_id, h, w))
            fh.write(np.ascontiguousarray(img.logits, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(img.labels, dtype="<u2").tobytes())


def read_container(path):
    buf = Path(path).read_bytes()
    return decode_container(buf)


def decode_container(buf):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedPayload(len(buf), pos + n - len(buf))
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    magic, version, k, count = _HEADER.unpack(take(_HEADER.size))
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionUnsupported(f"SGCL version {version} is not supported (expected {VERSION})")
    images = []
    for _ in range(count):
        image_id, h, w = _IMAGE.unpack(take(_IMAGE.size))
        logits = np.frombuffer(take(4 * h * w * k), dtype="<f4").reshape(h, w, k)
        labels = np.frombuffer(take(2 * h * w), dtype="<u2").reshape(h, w)
        images.append(SegImage(image_id, logits.astype(np.float32), labels.astype(np.uint16)))
    if pos != len(buf):
        raise TrailingBytes(pos, len(buf) - pos)
    return Dataset(k, images)


def write_manifest(path, data_path, dataset, provenance):
    doc = {
        "path": str(data_path),
        "num_classes": dataset.num_classes,
        "image_count": len(dataset.images),
        "provenance": provenance,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


@dataclass(frozen=True)
class SplitSpec:
    train: float = 1.0
    val: float = 0.0
    test: float = 0.0
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) < 0 or not self.train > 0 or abs(sum(fr) - 1) > 1e-6:
            raise InputError(f"split fractions must be >= 0, train > 0 and sum to 1, got {fr}")

    @classmethod
    def parse(cls, text, seed=0):
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 3:
            raise InputError(f"split needs three fractions, got {text!r}")
        return cls(*parts, seed=seed)


def split_dataset(dataset, spec=SplitSpec(), require=()):
    """Seeded shuffle of images, then contiguous cuts; remainder goes to test.

    ``require`` names splits (``"train"``, ``"val"``, ``"test"``) that must be
    non-empty.
    """
    n = len(dataset.images)
    if n == 0:
        raise EmptyDataset("cannot split an empty dataset")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = math.floor(n * spec.train + 1e-9)
    n_val = min(math.floor(n * spec.val + 1e-9), n - n_train)
    parts = {
        "train": dataset.subset(order[:n_train]),
        "val": dataset.subset(order[n_train:n_train + n_val]),
        "test": dataset.subset(order[n_train + n_val:]),
    }
    for name in require:
        if len(parts[name]) == 0:
            raise EmptySplit(f"{name} split is empty")
    return parts["train"], parts["val"], parts["test"]


def split_hash(dataset):
    ids = ",".join(str(i) for i in dataset.ids())
    return hashlib.sha256(ids.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class SyntheticConfig:
    num_images: int = 10
    height: int = 32
    width: int = 32
    num_classes: int = 10
    dirichlet_alpha: tuple = None
    concentration: float = 100.0
    sharpness: float = 1.0
    blob_seeds_per_image: int = 4
    boundary_noise: float = 0.0
    boundary_radius: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.sharpness > 0:
            raise InputError(f"sharpness must be > 0, got {self.sharpness}")
        if not 0 <= self.boundary_noise <= 1:
            raise InputError("boundary_noise must be a probability")
        if self.num_classes < 2 or self.height < 1 or self.width < 1 or self.num_images < 0:
            raise InputError("need K >= 2 and positive image size")
        if self.blob_seeds_per_image < 1 or self.concentration < 0:
            raise InputError("need at least one blob seed and concentration >= 0")
        if self.dirichlet_alpha is not None:
            alpha = tuple(float(a) for a in self.dirichlet_alpha)
            if len(alpha) != self.num_classes or min(alpha) <= 0:
                raise InputError("dirichlet_alpha must hold K positive values")
            object.__setattr__(self, "dirichlet_alpha", alpha)

    def alpha(self):
        if self.dirichlet_alpha is None:
            return np.ones(self.num_classes)
        return np.asarray(self.dirichlet_alpha, dtype=np.float64)


@dataclass
class SyntheticData:
    dataset: Dataset
    true_probs: list
    noise_masks: list
    region_maps: list
    config: SyntheticConfig = None

    def provenance(self):
        cfg = asdict(self.config)
        return {"generator": "segcal.synthetic", "config": cfg}


def _region_map(rng, cfg):
    n = cfg.blob_seeds_per_image
    ys = rng.uniform(0, cfg.height, n)
    xs = rng.uniform(0, cfg.width, n)
    classes = rng.integers(0, cfg.num_classes, n)
    gy, gx = np.mgrid[0:cfg.height, 0:cfg.width]
    d2 = (gy[..., None] + 0.5 - ys) ** 2 + (gx[..., None] + 0.5 - xs) ** 2
    return classes[d2.argmin(axis=-1)]


def _categorical(rng, p):
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1])[..., None] * cdf[..., -1:]
    return np.minimum((u >= cdf).sum(axis=-1), p.shape[-1] - 1)


def generate_image(cfg, image_id):
    """One synthetic image plus its oracle arrays.

    Each image draws from its own generator seeded by ``(seed, image_id)`` so
    images can be produced independently.
    """
    from .metrics import BoundaryConfig, boundary_mask

    rng = np.random.default_rng([cfg.seed, image_id])
    k = cfg.num_classes
    regions = _region_map(rng, cfg)
    alpha = cfg.alpha() + cfg.concentration * np.eye(k)[regions]
    g = rng.standard_gamma(alpha)
    p = g / g.sum(axis=-1, keepdims=True)
    p = np.maximum(p, 1e-12)
    p /= p.sum(axis=-1, keepdims=True)
    labels = _categorical(rng, p)
    band = boundary_mask(regions, BoundaryConfig(cfg.boundary_radius))
    corrupt = band & (rng.random(regions.shape) < cfg.boundary_noise)
    labels = np.where(corrupt, rng.integers(0, k, regions.shape), labels)
    logits = (cfg.sharpness * np.log(p)).astype(np.float32)
    return SegImage(image_id, logits, labels.astype(np.uint16)), p, corrupt, regions


def generate_synthetic(cfg):
    """Calibrated-by-construction data: ``y ~ Cat(p)`` and ``z = s log p``.

    With ``sharpness == 1`` the softmax of the logits is the true label
    distribution; larger sharpness makes the model over-confident with an
    NLL-optimal temperature equal to the sharpness.
    """
    images, probs, noise, regions = [], [], [], []
    for image_id in range(cfg.num_images):
        img, p, corrupt, reg = generate_image(cfg, image_id)
        images.append(img)
        probs.append(p)
        noise.append(corrupt)
        regions.append(reg)
    return SyntheticData(Dataset(cfg.num_classes, images), probs, noise, regions, cfg)


def relabel_by_confidence(dataset, threshold, seed=0):
    """Plant a separable correctness rule on existing logits.

    Pixels whose softmax confidence exceeds ``threshold`` get the predicted
    class as label; the rest get a different class drawn in proportion to the
    remaining probability mass. Ignored pixels stay ignored.
    """
    from .core import softmax_with_temperature

    rng = np.random.default_rng(seed)
    out = []
    for img in dataset.images:
        p = softmax_with_temperature(img.logits)
        pred = p.argmax(axis=-1)
        conf = p.max(axis=-1)
        others = p.copy()
        np.put_along_axis(others, pred[..., None], 0.0, axis=-1)
        others = np.maximum(others, 1e-300)
        np.put_along_axis(others, pred[..., None], 0.0, axis=-1)
        wrong = _categorical(rng, others)
        labels = np.where(conf > threshold, pred, wrong)
        labels = np.where(img.labels == IGNORE, IGNORE, labels)
        out.append(SegImage(img.image_id, img.logits, labels.astype(np.uint16)))
    return Dataset(dataset.num_classes, out)
