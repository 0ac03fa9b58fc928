"""Binned ECE, image-wise ECE, reliability bins and regional statistics."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import os

import numpy as np

from .core import IGNORE, argmax_predict, correctness_mask, CORRECT, INCORRECT
from .errors import AllPixelsIgnored, DimensionMismatch, EmptyDataset, EmptyInput, InputError, LengthMismatch


@dataclass(frozen=True)
class BinningConfig:
    num_bins: int = 10

    def __post_init__(self):
        if int(self.num_bins) < 1:
            raise InputError(f"num_bins must be >= 1, got {self.num_bins}")

    @property
    def edges(self):
        m = self.num_bins
        return np.array([i / m for i in range(m + 1)])


def bin_index(confidences, num_bins):
    """0-based bin of each confidence; bins are ``(i/m, (i+1)/m]``."""
    edges = BinningConfig(num_bins).edges
    idx = np.searchsorted(edges, np.asarray(confidences, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, num_bins - 1)


@dataclass
class ReliabilityBins:
    counts: np.ndarray
    correct_sums: np.ndarray
    conf_sums: np.ndarray

    @classmethod
    def empty(cls, num_bins=10):
        return cls(np.zeros(num_bins, dtype=np.int64), np.zeros(num_bins), np.zeros(num_bins))

    @classmethod
    def from_samples(cls, confidences, correct, num_bins=10):
        conf = np.asarray(confidences, dtype=np.float64).ravel()
        hit = np.asarray(correct, dtype=np.float64).ravel()
        if conf.shape != hit.shape:
            raise LengthMismatch(f"{conf.size} confidences vs {hit.size} correctness flags")
        idx = bin_index(conf, num_bins)
        return cls(
            np.bincount(idx, minlength=num_bins).astype(np.int64),
            np.bincount(idx, weights=hit, minlength=num_bins),
            np.bincount(idx, weights=conf, minlength=num_bins),
        )

    @property
    def num_bins(self):
        return len(self.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.correct_sums / np.maximum(self.counts, 1), 0.0)

    @property
    def confidence(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.conf_sums / np.maximum(self.counts, 1), 0.0)

    def ece(self):
        n = self.total
        if n == 0:
            raise EmptyInput("no samples in bins")
        total = 0.0
        for count, hits, confs in zip(self.counts.tolist(), self.correct_sums.tolist(), self.conf_sums.tolist()):
            if count == 0:
                continue
            total += count / n * abs(hits / count - confs / count)
        return total

    def __add__(self, other):
        if self.num_bins != other.num_bins:
            raise DimensionMismatch("cannot merge bins with different bin counts")
        return ReliabilityBins(
            self.counts + other.counts,
            self.correct_sums + other.correct_sums,
            self.conf_sums + other.conf_sums,
        )


def binned_ece(confidences, correct, cfg=BinningConfig()):
    """Equal-width binned ECE over (0, 1]. Returns ``(ece, bins)``."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct).ravel()
    if conf.size != hit.size:
        raise LengthMismatch(f"{conf.size} confidences vs {hit.size} correctness flags")
    if conf.size == 0:
        raise EmptyInput("binned_ece needs at least one sample")
    bins = ReliabilityBins.from_samples(conf, hit.astype(bool), cfg.num_bins)
    return bins.ece(), bins


def _pixels(probs, labels, image_id=None):
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise DimensionMismatch(f"probabilities {probs.shape} vs labels {labels.shape}")
    pred = argmax_predict(probs)
    mask = correctness_mask(pred, labels)
    keep = mask != -1
    if not keep.any():
        raise AllPixelsIgnored(image_id)
    return pred.confidence, mask, keep


def image_bins(probs, labels, cfg=BinningConfig(), image_id=None):
    conf, mask, keep = _pixels(probs, labels, image_id)
    return ReliabilityBins.from_samples(conf[keep], mask[keep] == CORRECT, cfg.num_bins)


def image_ece(probs, labels, cfg=BinningConfig(), image_id=None):
    return image_bins(probs, labels, cfg, image_id).ece()


@dataclass
class EceReport:
    dataset_ece: float
    per_image: list
    accuracy: float
    bins: ReliabilityBins

    def to_json(self):
        return {
            "dataset_ece": self.dataset_ece,
            "accuracy": self.accuracy,
            "bins": reliability_diagram_data(self.bins),
            "per_image": [{"id": i, "ece": e, "pixels": n} for i, e, n in self.per_image],
        }


def worker_count():
    try:
        return max(1, int(os.environ.get("SEGCAL_THREADS", "1")))
    except ValueError:
        return 1


def dataset_ece(items, cfg=BinningConfig()):
    """Image-wise ECE averaged over images (unweighted).

    ``items`` yields ``(image_id, probs, labels)`` triples.
    """
    items = list(items)
    if not items:
        raise EmptyDataset("dataset_ece needs at least one image")

    def one(item):
        image_id, probs, labels = item
        return image_id, image_bins(probs, labels, cfg, image_id)

    threads = worker_count()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]

    pooled = ReliabilityBins.empty(cfg.num_bins)
    per_image = []
    for image_id, bins in results:
        per_image.append((image_id, bins.ece(), bins.total))
        pooled = pooled + bins
    mean = sum(e for _, e, _ in per_image) / len(per_image)
    accuracy = float(pooled.correct_sums.sum() / pooled.total)
    return EceReport(mean, per_image, accuracy, pooled)


def _subset_ece(conf, hits, cfg):
    if conf.size == 0:
        return None
    return binned_ece(conf, hits, cfg)[0]


def split_ece_by_correctness(probs, labels, cfg=BinningConfig()):
    """ECE over correct and over incorrect pixels separately.

    Returns ``(ece_correct, ece_incorrect, counts)``; an empty subset gives
    ``None``. For the incorrect subset accuracy is 0 everywhere, so its ECE is
    the mean confidence of the mispredictions.
    """
    conf, mask, _ = _pixels(probs, labels)
    good = mask == CORRECT
    bad = mask == INCORRECT
    counts = {"correct": int(good.sum()), "incorrect": int(bad.sum())}
    return (
        _subset_ece(conf[good], np.ones(good.sum(), bool), cfg),
        _subset_ece(conf[bad], np.zeros(bad.sum(), bool), cfg),
        counts,
    )


@dataclass(frozen=True)
class BoundaryConfig:
    radius: int = 2
    connectivity: int = 4

    def __post_init__(self):
        if self.radius < 0:
            raise InputError("boundary radius must be >= 0")
        if self.connectivity not in (4, 8):
            raise InputError("connectivity must be 4 or 8")

    def offsets(self):
        d = self.radius
        out = []
        for dy in range(-d, d + 1):
            for dx in range(-d, d + 1):
                if (dy, dx) == (0, 0):
                    continue
                if self.connectivity == 4 and abs(dy) + abs(dx) > d:
                    continue
                out.append((dy, dx))
        return out


def boundary_mask(labels, cfg=BoundaryConfig()):
    """Pixels with a differently-labelled neighbour within ``cfg.radius``.

    With 4-connectivity the neighbourhood is the radius-``d`` diamond reached
    by ``d`` four-neighbour steps; with 8-connectivity it is the Chebyshev
    square. Ignored pixels are never boundary and never count as neighbours.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    valid = labels != IGNORE
    out = np.zeros((h, w), dtype=bool)
    for dy, dx in cfg.offsets():
        ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
        xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
        # neighbour at (y+dy, x+dx) seen from pixel (y, x)
        here = labels[yd, xd]
        there = labels[ys, xs]
        differs = (here != there) & valid[yd, xd] & valid[ys, xs]
        out[yd, xd] |= differs
    return out


def regional_ece(probs, labels, mask, cfg=BinningConfig()):
    """ECE inside and outside ``mask`` (``None`` for an empty region)."""
    conf, hits, keep = _pixels(probs, labels)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != keep.shape:
        raise DimensionMismatch(f"mask {mask.shape} vs labels {keep.shape}")
    inside = keep & mask
    outside = keep & ~mask
    return (
        _subset_ece(conf[inside], hits[inside] == CORRECT, cfg),
        _subset_ece(conf[outside], hits[outside] == CORRECT, cfg),
    )


@dataclass
class BoxplotStats:
    min: float
    q25: float
    median: float
    q75: float
    max: float
    mean: float
    outliers: list = field(default_factory=list)


def ece_boxplot_stats(values):
    """Five-number summary with linear-interpolation quartiles and 1.5 IQR outliers."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("boxplot needs at least one value")
    q25, median, q75 = np.percentile(v, [25, 50, 75], method="linear")
    iqr = q75 - q25
    lo, hi = q25 - 1.5 * iqr, q75 + 1.5 * iqr
    return BoxplotStats(
        float(v.min()), float(q25), float(median), float(q75), float(v.max()), float(v.mean()),
        [float(x) for x in v if x < lo or x > hi],
    )


def reliability_diagram_data(bins):
    edges = BinningConfig(bins.num_bins).edges
    acc, conf = bins.accuracy, bins.confidence
    rows = []
    for i in range(bins.num_bins):
        count = int(bins.counts[i])
        rows.append({
            "low": float(edges[i]),
            "high": float(edges[i + 1]),
            "acc": float(acc[i]),
            "conf": float(conf[i]),
            "count": count,
            "gap": float(abs(acc[i] - conf[i])) if count else 0.0,
        })
    return rows


def _mean_present(values):
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def dataset_split_ece(items, cfg=BinningConfig()):
    """Image-wise means of the correct/incorrect ECEs, skipping absent subsets."""
    good, bad, n_good, n_bad = [], [], 0, 0
    for _, probs, labels in items:
        e_good, e_bad, counts = split_ece_by_correctness(probs, labels, cfg)
        good.append(e_good)
        bad.append(e_bad)
        n_good += counts["correct"]
        n_bad += counts["incorrect"]
    return {
        "ece_correct": _mean_present(good),
        "ece_incorrect": _mean_present(bad),
        "counts": {"correct": n_good, "incorrect": n_bad},
    }


def dataset_regional_ece(items, boundary=BoundaryConfig(), cfg=BinningConfig(), masks=None):
    """Boundary vs non-boundary ECE per image, with boxplot summaries.

    ``masks`` optionally maps image id to a precomputed boundary mask; by
    default the mask comes from the image's own labels.
    """
    inside, outside = [], []
    for image_id, probs, labels in items:
        mask = masks[image_id] if masks is not None else boundary_mask(labels, boundary)
        e_in, e_out = regional_ece(probs, labels, mask, cfg)
        inside.append(e_in)
        outside.append(e_out)

    def summary(values):
        present = [v for v in values if v is not None]
        if not present:
            return None
        return vars(ece_boxplot_stats(present))

    return {
        "radius": boundary.radius,
        "ece_boundary": _mean_present(inside),
        "ece_non_boundary": _mean_present(outside),
        "boundary_stats": summary(inside),
        "non_boundary_stats": summary(outside),
    }
