"""Losses, golden-section search, AdamW and finite-difference gradient checks."""
from dataclasses import dataclass, field
import json
import math

import numpy as np

from .core import IGNORE, PROB_FLOOR
from .errors import AllPixelsIgnored, EmptyInput, InputError, InvalidBounds, LengthMismatch, NonFiniteGradient

INV_PHI = (math.sqrt(5) - 1) / 2


def nll_loss(probs, labels):
    """Mean ``-log p_y`` over non-ignored pixels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    flat = probs.reshape(-1, probs.shape[-1])
    keep = labels != IGNORE
    if not keep.any():
        raise AllPixelsIgnored()
    p_y = flat[keep, labels[keep].astype(np.int64)]
    return float(-np.log(np.maximum(p_y, PROB_FLOOR)).mean())


def binary_cross_entropy(scores, targets):
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if s.size != t.size:
        raise LengthMismatch(f"{s.size} scores vs {t.size} targets")
    if s.size == 0:
        raise EmptyInput("binary_cross_entropy needs at least one sample")
    s = np.clip(s, PROB_FLOOR, 1 - PROB_FLOOR)
    return float(-(t * np.log(s) + (1 - t) * np.log1p(-s)).mean())


def minimize_scalar(f, bounds, tol=1e-5, max_iter=500):
    """Golden-section search on ``[lo, hi]``; returns the argmin.

    f is only evaluated inside the bounds. The endpoints are compared against
    the interior result so monotone objectives pin to the boundary exactly.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not lo < hi or not (math.isfinite(lo) and math.isfinite(hi)):
        raise InvalidBounds(f"need finite lo < hi, got {bounds}")
    a, b = lo, hi
    x1 = b - INV_PHI * (b - a)
    x2 = a + INV_PHI * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - INV_PHI * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + INV_PHI * (b - a)
            f2 = f(x2)
    x_best, f_best = (x1, f1) if f1 <= f2 else (x2, f2)
    f_lo, f_hi = f(lo), f(hi)
    if f_lo < f_best and f_lo <= f_hi:
        return lo
    if f_hi < f_best:
        return hi
    return x_best


@dataclass(frozen=True)
class AdamWConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-6
    batch_size: int = 20
    epochs: int = 40
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InputError("weight decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise InputError("batch_size must be >= 1 and epochs >= 0")


def shuffled_batches(n, batch_size):
    """Default sampler: one seeded permutation per epoch cut into batches."""
    def sample(epoch, rng):
        order = rng.permutation(n)
        return [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return sample


@dataclass
class FitResult:
    params: np.ndarray
    trace: list = field(default_factory=list)
    steps: int = 0


def adamw_fit(params, grad_fn, sampler, cfg=AdamWConfig(), val_fn=None):
    """AdamW with decoupled weight decay over a flat parameter vector.

    ``grad_fn(params, batch) -> (loss, grad)``; ``sampler`` is either a sample
    count (shuffled mini-batches) or ``sampler(epoch, rng) -> batches``.
    The trace holds one ``{"epoch", "loss", "val_loss"}`` row per epoch, where
    loss is the mean mini-batch loss of that epoch.
    """
    if isinstance(sampler, (int, np.integer)):
        sampler = shuffled_batches(int(sampler), cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    p = np.array(params, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    b1, b2, lr, eps, wd = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon, cfg.weight_decay
    step = 0
    trace = []
    for epoch in range(cfg.epochs):
        losses = []
        for batch in sampler(epoch, rng):
            loss, g = grad_fn(p, batch)
            step += 1
            if not np.isfinite(g).all() or not math.isfinite(loss):
                raise NonFiniteGradient(step)
            losses.append(loss)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** step)
            v_hat = v / (1 - b2 ** step)
            p = p - lr * wd * p - lr * m_hat / (np.sqrt(v_hat) + eps)
        trace.append({
            "epoch": epoch + 1,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "val_loss": None if val_fn is None else float(val_fn(p)),
        })
    return FitResult(p, trace, step)


def write_loss_trace(path, trace):
    with open(path, "w") as fh:
        for row in trace:
            fh.write(json.dumps({"epoch": row["epoch"], "loss": row["loss"], "val_loss": row["val_loss"]}) + "\n")


@dataclass
class GradCheckReport:
    max_rel_error: float
    pairs: list

    @property
    def passed(self):
        return self.max_rel_error < 1e-4


def relative_error(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def finite_difference_check(loss_fn, grad_fn, params, epsilon=1e-4):
    """Compare ``grad_fn(params)`` against central differences of ``loss_fn``."""
    p = np.array(params, dtype=np.float64)
    analytic = np.asarray(grad_fn(p), dtype=np.float64).ravel()
    flat = p.ravel()
    pairs = []
    worst = 0.0
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = epsilon
        up = loss_fn((flat + step).reshape(p.shape))
        down = loss_fn((flat - step).reshape(p.shape))
        numeric = (up - down) / (2 * epsilon)
        pairs.append((float(analytic[i]), float(numeric)))
        worst = max(worst, relative_error(analytic[i], numeric))
    return GradCheckReport(worst, pairs)
