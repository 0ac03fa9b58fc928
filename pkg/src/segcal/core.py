"""Dense per-pixel tensors and the elementary probabilistic operations.

Arrays follow one layout everywhere: logits and probabilities are ``(..., K)``
with the class axis last (``(H, W, K)`` for an image, ``(N, K)`` for a flat
pixel batch); label maps are integer arrays of the leading shape with
``IGNORE`` marking void pixels.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InputError, NonFiniteInput, NonPositiveTemperature

IGNORE = 0xFFFF
PROB_FLOOR = 1e-12

CORRECT = 1
INCORRECT = 0
IGNORED = -1


@dataclass(frozen=True)
class SegImage:
    """One image: float32 logits ``(H, W, K)`` and uint16 labels ``(H, W)``."""

    image_id: int
    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float32)
        labels = np.asarray(self.labels)
        if logits.ndim != 3 or labels.ndim != 2:
            raise DimensionMismatch("logits must be (H, W, K) and labels (H, W)")
        h, w, k = logits.shape
        if h < 1 or w < 1 or k < 2:
            raise InputError(f"need H, W >= 1 and K >= 2, got {logits.shape}")
        if labels.shape != (h, w):
            raise DimensionMismatch(f"labels {labels.shape} do not match logits {logits.shape}")
        if not np.isfinite(logits).all():
            raise NonFiniteInput(f"image {self.image_id} has non-finite logits")
        if labels.size and labels.min() < 0:
            raise InputError("labels must be non-negative")
        labels = labels.astype(np.uint16)
        bad = (labels != IGNORE) & (labels >= k)
        if bad.any():
            raise InputError(f"image {self.image_id} has labels >= K={k}")
        logits.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    @property
    def num_classes(self):
        return self.logits.shape[-1]

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class Prediction:
    predicted: np.ndarray
    confidence: np.ndarray


def softmax_with_temperature(logits, temperature=1.0):
    """Softmax of ``logits / temperature`` over the last axis, in float64."""
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NonFiniteInput("logits contain NaN or Inf")
    x = (z - z.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature=1.0):
    z = np.asarray(logits, dtype=np.float64) / temperature
    x = z - z.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def argmax_predict(probs):
    """Predicted class (lowest index on ties) and its probability."""
    probs = np.asarray(probs)
    predicted = probs.argmax(axis=-1)
    confidence = np.take_along_axis(probs, predicted[..., None], axis=-1)[..., 0]
    return Prediction(predicted, confidence)


def correctness_mask(pred, labels):
    """Ternary mask: ``CORRECT`` (1), ``INCORRECT`` (0) or ``IGNORED`` (-1)."""
    predicted = pred.predicted if isinstance(pred, Prediction) else np.asarray(pred)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise DimensionMismatch(f"prediction {predicted.shape} vs labels {labels.shape}")
    mask = np.where(predicted == labels, CORRECT, INCORRECT).astype(np.int8)
    mask[labels == IGNORE] = IGNORED
    return mask


def pixel_entropy(probs):
    """``-c log c`` of the max-class confidence ``c`` (natural log)."""
    conf = np.asarray(probs, dtype=np.float64).max(axis=-1)
    return -conf * np.log(np.maximum(conf, PROB_FLOOR))


def valid_pixels(labels):
    return np.asarray(labels) != IGNORE
