"""Independent reference computations used as test oracles.

Nothing here imports the code paths it checks: bins are found with explicit
interval tests, NLL uses scipy's logsumexp, neighbourhoods are scanned pixel
by pixel.
"""
import math

import numpy as np
from scipy.special import logsumexp

IGNORE = 0xFFFF


def direct_ece(confidences, correct, num_bins):
    """Equal-width ECE by looping over samples and testing lo < c <= hi."""
    counts = [0] * num_bins
    hits = [0.0] * num_bins
    confs = [0.0] * num_bins
    for c, ok in zip(confidences, correct):
        c = float(c)
        for i in range(num_bins):
            lo, hi = i / num_bins, (i + 1) / num_bins
            if (lo < c <= hi) or (i == 0 and c <= lo) or (i == num_bins - 1 and c > hi):
                counts[i] += 1
                hits[i] += 1.0 if ok else 0.0
                confs[i] += c
                break
    n = sum(counts)
    total = 0.0
    for count, h, s in zip(counts, hits, confs):
        if count:
            total += count / n * abs(h / count - s / count)
    return total


def scipy_nll(logits, labels, temperature):
    z = np.asarray(logits, dtype=np.float64) / temperature
    lse = logsumexp(z, axis=1)
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def grid_temperature(logits, labels, grid=None):
    grid = np.round(np.arange(0.1, 10.0001, 0.1), 10) if grid is None else grid
    values = [scipy_nll(logits, labels, t) for t in grid]
    return float(grid[int(np.argmin(values))])


def brute_boundary(labels, radius, connectivity=4):
    labels = np.asarray(labels)
    h, w = labels.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            if labels[y, x] == IGNORE:
                continue
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if connectivity == 4 and abs(dy) + abs(dx) > radius:
                        continue
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and labels[yy, xx] != IGNORE and labels[yy, xx] != labels[y, x]:
                        out[y, x] = True
    return out


def perceptron(x, t, epochs=1000):
    """Classic perceptron; returns training accuracy (1.0 iff it separated the data)."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    s = np.where(t, 1.0, -1.0)
    w = np.zeros(xb.shape[1])
    for _ in range(epochs):
        errors = 0
        for xi, si in zip(xb, s):
            if si * (xi @ w) <= 0:
                w += si * xi
                errors += 1
        if errors == 0:
            break
    return float(((xb @ w > 0) == t).mean())


def quantile_sorted(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def kink_free_selector_point(selector, features, rng, margin=1e-3, max_tries=200):
    """Redraw parameters until no hidden pre-activation lies within ``margin`` of 0.

    Central differences straddling a ReLU kink measure a one-sided slope, so a
    finite-difference check is only meaningful away from those points.
    """
    def draw():
        # He-scaled weights and small biases: the regime training operates in,
        # away from a saturated sigmoid whose tiny gradients sit at the
        # round-off floor of central differences
        chunks = []
        for fan_in, fan_out in zip(selector.sizes[:-1], selector.sizes[1:]):
            chunks += [rng.normal(0.0, math.sqrt(2.0 / fan_in), fan_in * fan_out), rng.normal(0.0, 0.1, fan_out)]
        return np.concatenate(chunks)

    for _ in range(max_tries):
        params = draw()
        h = features
        smooth = True
        pos = 0
        for fan_in, fan_out in zip(selector.sizes[:-2], selector.sizes[1:-1]):
            w = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            a = h @ w + params[pos:pos + fan_out]
            pos += fan_out
            smooth &= bool(np.all(np.abs(a) >= margin))
            h = np.maximum(a, 0.0)
        if smooth:
            return params
    raise RuntimeError("no kink-free parameter draw found")
