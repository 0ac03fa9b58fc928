"""Three-layer MLP that flags mispredicted pixels from their probability vector."""
from dataclasses import dataclass
import logging

import numpy as np

from .optim import AdamWConfig, adamw_fit, minimize_scalar
from .errors import DegenerateLabels, DimensionMismatch

log = logging.getLogger(__name__)

LARGE_TEMPERATURE = 1e10
T1_SEARCH = (1.0, 20.0)


@dataclass
class MlpSelector:
    """Layer sizes ``[K, H1, H2, 1]``, ReLU hidden units, sigmoid output.

    The output is the probability that a pixel is *mispredicted*; scores above
    ``threshold`` flag the pixel as incorrect.
    """

    sizes: tuple
    params: np.ndarray
    sorted_input: bool = False
    threshold: float = 0.5

    @classmethod
    def init(cls, num_classes, hidden=(128, 64), seed=0, sorted_input=False, zero_output=False):
        sizes = (num_classes, *hidden, 1)
        rng = np.random.default_rng(seed)
        chunks = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_output:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            chunks += [w.ravel(), np.zeros(fan_out)]
        return cls(tuple(sizes), np.concatenate(chunks), sorted_input)

    def layers(self, params=None):
        params = self.params if params is None else params
        out, pos = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = params[pos:pos + fan_out]
            pos += fan_out
            out.append((w, b))
        return out

    def features(self, probs):
        x = np.asarray(probs, dtype=np.float64).reshape(-1, np.shape(probs)[-1])
        if x.shape[1] != self.sizes[0]:
            raise DimensionMismatch(f"selector expects {self.sizes[0]} classes, got {x.shape[1]}")
        if self.sorted_input:
            x = -np.sort(-x, axis=1)
        return x

    def forward(self, probs, params=None):
        """Misprediction score in (0, 1) for each probability vector."""
        lead = np.shape(probs)[:-1]
        h = self.features(probs)
        layers = self.layers(params)
        for w, b in layers[:-1]:
            h = np.maximum(h @ w + b, 0.0)
        w, b = layers[-1]
        return _sigmoid((h @ w + b)[:, 0]).reshape(lead)

    def flag_incorrect(self, probs):
        return self.forward(probs) > self.threshold

    def loss_and_grad(self, params, x, t):
        """Mean BCE and its gradient w.r.t. the flat parameter vector."""
        layers = self.layers(params)
        acts, pre = [x], []
        h = x
        for w, b in layers[:-1]:
            a = h @ w + b
            pre.append(a)
            h = np.maximum(a, 0.0)
            acts.append(h)
        w, b = layers[-1]
        logit = (h @ w + b)[:, 0]
        loss = _bce_from_logits(logit, t)
        # d(mean BCE)/d logit = (sigmoid - t) / n
        delta = ((_sigmoid(logit) - t) / len(t))[:, None]
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            grads.append((delta.sum(axis=0), acts[i].T @ delta))
            if i:
                delta = (delta @ w.T) * (pre[i - 1] > 0)
        flat = []
        for gb, gw in reversed(grads):
            flat += [gw.ravel(), gb]
        return loss, np.concatenate(flat)

    def to_json(self):
        return {
            "sizes": list(self.sizes),
            "sorted_input": self.sorted_input,
            "threshold": self.threshold,
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in self.layers()],
        }

    @classmethod
    def from_json(cls, doc):
        chunks = []
        for layer in doc["layers"]:
            chunks += [np.asarray(layer["weight"], dtype=np.float64).ravel(), np.asarray(layer["bias"], dtype=np.float64)]
        return cls(tuple(doc["sizes"]), np.concatenate(chunks), bool(doc["sorted_input"]), float(doc["threshold"]))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _bce_from_logits(logit, t):
    # log(1 + e^x) - t x, stable for large |x|
    return float(np.mean(np.logaddexp(0.0, logit) - t * logit))


@dataclass
class SelectorMetrics:
    detection_accuracy: float
    accuracy: float
    threshold: float = 0.5

    def to_json(self):
        return {"detection_accuracy": self.detection_accuracy, "accuracy": self.accuracy, "threshold": self.threshold}


def selector_metrics(flags, is_incorrect, threshold=0.5):
    flags = np.asarray(flags, dtype=bool).ravel()
    bad = np.asarray(is_incorrect, dtype=bool).ravel()
    detection = float(flags[bad].mean()) if bad.any() else 0.0
    return SelectorMetrics(detection, float((flags == bad).mean()) if bad.size else 0.0, threshold)


def balanced_batches(is_incorrect, batch_size):
    """Each batch draws half its pixels from each class, cycling seeded permutations.

    An epoch visits as many pixels as the pool holds.
    """
    bad = np.flatnonzero(is_incorrect)
    good = np.flatnonzero(~np.asarray(is_incorrect, dtype=bool))
    n = len(bad) + len(good)
    half = max(1, batch_size // 2)
    n_batches = max(1, -(-n // (2 * half)))

    def draw(pool, count, rng):
        reps = -(-count // len(pool))
        return np.concatenate([rng.permutation(pool) for _ in range(reps)])[:count]

    def sample(epoch, rng):
        a = draw(bad, n_batches * half, rng).reshape(n_batches, half)
        b = draw(good, n_batches * (batch_size - half), rng).reshape(n_batches, batch_size - half)
        return list(np.concatenate([a, b], axis=1))

    return sample


def selector_train(probs, is_incorrect, cfg=AdamWConfig(), hidden=(128, 64), sorted_input=False,
                   val=None, max_pixels=2_000_000):
    """Train a selector on ``(probability vector, is_incorrect)`` pairs.

    ``val`` is an optional ``(probs, is_incorrect)`` pair; metrics are computed
    on it when given, otherwise on the training pixels. Returns
    ``(selector, metrics, trace)``.
    """
    x = np.asarray(probs, dtype=np.float64).reshape(-1, np.shape(probs)[-1])
    t = np.asarray(is_incorrect, dtype=bool).ravel()
    if t.all() or not t.any():
        raise DegenerateLabels("selector training needs both correct and mispredicted pixels")
    if len(t) > max_pixels:
        keep = np.sort(np.random.default_rng(cfg.seed).choice(len(t), max_pixels, replace=False))
        x, t = x[keep], t[keep]
        if t.all() or not t.any():
            raise DegenerateLabels("subsampled selector pool lost a class")
    selector = MlpSelector.init(x.shape[1], hidden, cfg.seed, sorted_input)
    feats = selector.features(x)
    target = t.astype(np.float64)

    def grad_fn(params, batch):
        return selector.loss_and_grad(params, feats[batch], target[batch])

    fit = adamw_fit(selector.params, grad_fn, balanced_batches(t, cfg.batch_size), cfg)
    selector.params = fit.params
    vx, vt = (x, t) if val is None else (val[0], np.asarray(val[1], dtype=bool).ravel())
    metrics = selector_metrics(selector.flag_incorrect(vx), vt, selector.threshold)
    return selector, metrics, fit.trace


def choose_temperatures(metrics, t1_objective=None):
    """Temperatures ``(T1, T2)`` from the selector's misprediction recall.

    A recall above 0.5 smooths flagged pixels all the way (T1 = 1e10); below
    0.35 the unflagged pixels are softened with T2 = 2. Otherwise T2 = 1 and T1
    is fitted by golden-section on ``t1_objective`` (validation ECE as a
    function of T1) over ``[max(1, T2), 20]``.
    """
    acc = metrics.detection_accuracy
    t2 = 2.0 if acc < 0.35 else 1.0
    if acc > 0.5:
        return LARGE_TEMPERATURE, t2
    lo = max(T1_SEARCH[0], t2)
    if t1_objective is None:
        log.warning("no objective for T1; using the lower search bound")
        return lo, t2
    return minimize_scalar(t1_objective, (lo, T1_SEARCH[1]), tol=1e-3), t2


def selector_accuracy_sweep(dataset, rates, t1=LARGE_TEMPERATURE, t2=1.0, seed=0, binning=None):
    """ECE of selective scaling driven by synthetic selectors of known recall.

    For each rate ``r`` the selector flags exactly ``floor(r * n_incorrect)``
    true mispredictions and no correct pixel. Flagged sets are nested across
    rates because they are prefixes of one seeded permutation. Returns
    ``[(rate, ece), ...]`` sorted by rate.
    """
    from .calibrators import apply_selective
    from .core import softmax_with_temperature
    from .metrics import BinningConfig, dataset_ece

    binning = binning or BinningConfig()
    wrong = []
    for img in dataset.images:
        pred = softmax_with_temperature(img.logits).argmax(axis=-1)
        valid = img.labels != 0xFFFF
        wrong.append((pred != img.labels) & valid)
    sizes = [w.size for w in wrong]
    flat_wrong = np.flatnonzero(np.concatenate([w.ravel() for w in wrong]))
    order = np.random.default_rng(seed).permutation(flat_wrong)
    offsets = np.cumsum([0] + sizes)

    results = []
    for rate in sorted(float(r) for r in rates):
        if not 0 <= rate <= 1:
            raise ValueError(f"rates must lie in [0, 1], got {rate}")
        chosen = np.zeros(offsets[-1], dtype=bool)
        chosen[order[:int(np.floor(rate * len(order)))]] = True
        items = []
        for i, img in enumerate(dataset.images):
            flags = chosen[offsets[i]:offsets[i + 1]].reshape(img.shape)
            items.append((img.image_id, apply_selective(img.logits, flags, t1, t2), img.labels))
        results.append((rate, dataset_ece(items, binning).dataset_ece))
    return results
