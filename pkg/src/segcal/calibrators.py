"""Post-hoc calibrators: fitted parameter types, ``apply_*`` maps and ``fit_*`` routines.

Every calibrator consumes raw logits with the class axis last and returns
probabilities of the same shape. Fitting always happens on non-ignored pixels
of a calibrator-training split; validation ECE is recomputed through
:mod:`segcal.metrics` on the validation split.
"""
from dataclasses import dataclass, field
import logging
import math
import time

import numpy as np

from .core import PROB_FLOOR, log_softmax, pixel_entropy, softmax_with_temperature
from .errors import (
    DegenerateLabels, DimensionMismatch, EmptyEnsemble, InputError, NonPositiveTemperature,
    ShapeMismatch, SplitMissing,
)
from .metrics import BinningConfig, dataset_ece
from .optim import AdamWConfig, adamw_fit, minimize_scalar
from .selector import LARGE_TEMPERATURE, MlpSelector, choose_temperatures, selector_train

log = logging.getLogger(__name__)

PARAMS_FORMAT = "segcal-params"
PARAMS_VERSION = 1
TEMPERATURE_BOUNDS = (0.05, 50.0)
METACAL_QUANTILES = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99)


# -- apply -----------------------------------------------------------------

def apply_temperature(logits, temperature):
    return softmax_with_temperature(logits, temperature)


def _check_vector(logits, *vectors):
    k = np.shape(logits)[-1]
    for v in vectors:
        if np.shape(v) != (k,):
            raise DimensionMismatch(f"expected length-{k} vector, got shape {np.shape(v)}")


def apply_vector(logits, w, b):
    """softmax(w * z + b) with per-class scale ``w`` and bias ``b``."""
    _check_vector(logits, w, b)
    z = np.asarray(logits, dtype=np.float64)
    return softmax_with_temperature(z * np.asarray(w) + np.asarray(b))


def clamped_log_probs(logits):
    return np.maximum(log_softmax(logits), math.log(PROB_FLOOR))


def apply_dirichlet(logits, W, b):
    """softmax(W . log softmax(z) + b), the linear parametrisation."""
    k = np.shape(logits)[-1]
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (k, k):
        raise DimensionMismatch(f"W must be {k}x{k}, got {W.shape}")
    _check_vector(logits, b)
    return softmax_with_temperature(clamped_log_probs(logits) @ W.T + np.asarray(b))


def apply_metacal_ext(logits, gamma, t_inner, t_fallback=LARGE_TEMPERATURE):
    """Entropy-gated temperature scaling.

    Pixels whose uncalibrated ``-c log c`` exceeds ``gamma`` get the large
    fallback temperature instead of a random prediction, so the predicted
    class survives.
    """
    if not (t_inner > 0 and t_fallback > 0):
        raise NonPositiveTemperature("meta-cal temperatures must be > 0")
    if t_fallback < t_inner:
        raise InputError("t_fallback must be >= t_inner")
    fire = pixel_entropy(softmax_with_temperature(logits)) > gamma
    inner = softmax_with_temperature(logits, t_inner)
    if not fire.any():
        return inner
    return np.where(fire[..., None], softmax_with_temperature(logits, t_fallback), inner)


def apply_selective(logits, flagged_incorrect, t1, t2):
    """softmax(z / T1) where the pixel is flagged incorrect, softmax(z / T2) elsewhere."""
    if not (t1 > 0 and t2 > 0):
        raise NonPositiveTemperature("selective temperatures must be > 0")
    flagged = np.asarray(flagged_incorrect, dtype=bool)
    if flagged.shape != np.shape(logits)[:-1]:
        raise DimensionMismatch(f"decision mask {flagged.shape} vs logits {np.shape(logits)}")
    sharp = softmax_with_temperature(logits, t2)
    if not flagged.any():
        return sharp
    return np.where(flagged[..., None], softmax_with_temperature(logits, t1), sharp)


def ensemble_average(members):
    if len(members) == 0:
        raise EmptyEnsemble("ensemble needs at least one member")
    arrays = [np.asarray(m, dtype=np.float64) for m in members]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeMismatch(f"member shapes differ: {shape} vs {a.shape}")
    total = np.zeros(shape)
    for a in arrays:
        total += a
    return total / len(arrays)


# -- parameter types -------------------------------------------------------

@dataclass
class Identity:
    method = "identity"

    def apply(self, logits):
        return softmax_with_temperature(logits)

    def payload(self):
        return {}


@dataclass
class Temperature:
    temperature: float
    method = "temperature"

    def __post_init__(self):
        if not self.temperature > 0:
            raise NonPositiveTemperature(f"temperature must be > 0, got {self.temperature}")

    def apply(self, logits):
        return apply_temperature(logits, self.temperature)

    def payload(self):
        return {"temperature": self.temperature}


@dataclass
class Vector:
    w: np.ndarray
    b: np.ndarray
    method = "vector"

    def apply(self, logits):
        return apply_vector(logits, self.w, self.b)

    def payload(self):
        return {"w": np.asarray(self.w).tolist(), "b": np.asarray(self.b).tolist()}


@dataclass
class Dirichlet:
    W: np.ndarray
    b: np.ndarray
    method = "dirichlet"

    def apply(self, logits):
        return apply_dirichlet(logits, self.W, self.b)

    def payload(self):
        return {"W": np.asarray(self.W).tolist(), "b": np.asarray(self.b).tolist()}


@dataclass
class MetaCalExt:
    gamma: float
    t_inner: float
    t_fallback: float = LARGE_TEMPERATURE
    method = "metacal"

    def __post_init__(self):
        if self.gamma < 0:
            raise InputError("gamma must be >= 0")

    def apply(self, logits):
        return apply_metacal_ext(logits, self.gamma, self.t_inner, self.t_fallback)

    def payload(self):
        gamma = "inf" if math.isinf(self.gamma) else self.gamma
        return {"gamma": gamma, "t_inner": self.t_inner, "t_fallback": self.t_fallback}


@dataclass
class Selective:
    selector: MlpSelector
    t1: float
    t2: float
    method = "selective"

    def __post_init__(self):
        if not (self.t1 > 0 and self.t2 > 0):
            raise NonPositiveTemperature("selective temperatures must be > 0")
        if self.t1 < self.t2:
            raise InputError(f"selective scaling needs T1 >= T2, got {self.t1} < {self.t2}")

    def apply(self, logits):
        flagged = self.selector.flag_incorrect(softmax_with_temperature(logits))
        return apply_selective(logits, flagged, self.t1, self.t2)

    def payload(self):
        return {"t1": self.t1, "t2": self.t2, "selector": self.selector.to_json()}


@dataclass
class Ensemble:
    members: int
    method = "ensemble"

    def apply(self, member_logits):
        if len(member_logits) != self.members:
            raise ShapeMismatch(f"expected {self.members} members, got {len(member_logits)}")
        return ensemble_average([softmax_with_temperature(z) for z in member_logits])

    def payload(self):
        return {"members": self.members}


def params_to_json(params, num_classes=None):
    doc = {"format": PARAMS_FORMAT, "version": PARAMS_VERSION, "method": params.method}
    if num_classes is not None:
        doc["num_classes"] = int(num_classes)
    doc.update(params.payload())
    return doc


def params_from_json(doc):
    """Rebuild calibrator parameters; malformed documents raise ``InputError``."""
    try:
        return _params_from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"malformed parameter document: {exc!r}") from exc


def _params_from_json(doc):
    if doc.get("format") != PARAMS_FORMAT:
        raise InputError("not a segcal parameter document")
    if doc.get("version") != PARAMS_VERSION:
        raise InputError(f"unsupported parameter version {doc.get('version')}")
    method = doc["method"]
    if method == "identity":
        return Identity()
    if method == "temperature":
        return Temperature(float(doc["temperature"]))
    if method == "vector":
        return Vector(np.asarray(doc["w"], dtype=np.float64), np.asarray(doc["b"], dtype=np.float64))
    if method == "dirichlet":
        return Dirichlet(np.asarray(doc["W"], dtype=np.float64), np.asarray(doc["b"], dtype=np.float64))
    if method == "metacal":
        return MetaCalExt(float(doc["gamma"]), float(doc["t_inner"]), float(doc["t_fallback"]))
    if method == "selective":
        return Selective(MlpSelector.from_json(doc["selector"]), float(doc["t1"]), float(doc["t2"]))
    if method == "ensemble":
        return Ensemble(int(doc["members"]))
    raise InputError(f"unknown calibrator method {method!r}")


# -- fitting ---------------------------------------------------------------

SCALING_ADAMW = AdamWConfig(learning_rate=0.01, weight_decay=0.0, batch_size=2048, epochs=30)


@dataclass(frozen=True)
class FitConfig:
    binning: BinningConfig = BinningConfig()
    temperature_bounds: tuple = TEMPERATURE_BOUNDS
    temperature_tol: float = 1e-4
    scaling_adamw: AdamWConfig = SCALING_ADAMW
    dirichlet_l2: float = 1e-3
    selector_adamw: AdamWConfig = AdamWConfig()
    selector_hidden: tuple = (128, 64)
    selector_sorted_input: bool = False
    selector_max_pixels: int = 2_000_000
    identity_fallback: bool = True
    seed: int = 0

    def with_seed(self, seed):
        from dataclasses import replace
        return replace(
            self, seed=seed,
            scaling_adamw=replace(self.scaling_adamw, seed=seed),
            selector_adamw=replace(self.selector_adamw, seed=seed),
        )


@dataclass
class FitReport:
    params: object
    train_nll_before: float
    train_nll_after: float
    val_ece_before: float = None
    val_ece_after: float = None
    wall_time: float = 0.0
    details: dict = field(default_factory=dict)

    def to_json(self, num_classes=None):
        """Deterministic payload; wall time is deliberately left out."""
        return {
            "method": self.params.method,
            "params": params_to_json(self.params, num_classes),
            "train_nll_before": self.train_nll_before,
            "train_nll_after": self.train_nll_after,
            "val_ece_before": self.val_ece_before,
            "val_ece_after": self.val_ece_after,
            "details": self.details,
        }


def calibrate(params, dataset):
    """Yield ``(image_id, probs, labels)`` for every image after calibration."""
    for img in dataset.images:
        yield img.image_id, params.apply(img.logits), img.labels


def evaluate_ece(params, dataset, binning=BinningConfig()):
    return dataset_ece(calibrate(params, dataset), binning)


def _flat(dataset):
    z, y = dataset.flat()
    if len(y) == 0:
        from .errors import AllPixelsIgnored
        raise AllPixelsIgnored()
    return z.astype(np.float64), y


def _mean_nll(log_probs, y):
    return float(-log_probs[np.arange(len(y)), y].mean())


def temperature_nll(z, y, temperature):
    return _mean_nll(log_softmax(z, temperature), y)


def temperature_nll_grad(z, y, temperature):
    """d NLL / d T = mean(z_y - E_p[z]) / T^2."""
    p = softmax_with_temperature(z, temperature)
    z_y = z[np.arange(len(y)), y]
    return float(((z_y - (p * z).sum(axis=1)) / temperature ** 2).mean())


def _finish(params, train, val, cfg, started, details, nll_before, nll_after):
    report = FitReport(params, nll_before, nll_after, details=details)
    if val is not None and len(val):
        report.val_ece_before = evaluate_ece(Identity(), val, cfg.binning).dataset_ece
        report.val_ece_after = evaluate_ece(params, val, cfg.binning).dataset_ece
        if cfg.identity_fallback and report.val_ece_after > report.val_ece_before:
            log.warning("%s fit raised validation ECE (%.4f > %.4f); falling back to identity",
                        params.method, report.val_ece_after, report.val_ece_before)
            report.details = dict(details, fallback_from=params.method)
            report.params = Identity()
            report.val_ece_after = report.val_ece_before
            report.train_nll_after = nll_before
    report.wall_time = time.perf_counter() - started
    return report


def fit_temperature(train, val=None, cfg=FitConfig()):
    """Single temperature minimising mean training NLL by golden-section search."""
    started = time.perf_counter()
    z, y = _flat(train)
    t = minimize_scalar(lambda T: temperature_nll(z, y, T), cfg.temperature_bounds, cfg.temperature_tol)
    return _finish(Temperature(t), train, val, cfg, started, {},
                   temperature_nll(z, y, 1.0), temperature_nll(z, y, t))


def _softmax_xent(u, y):
    """Mean cross-entropy of logits ``u`` and ``(p - onehot) / n``."""
    lp = log_softmax(u)
    g = np.exp(lp)
    g[np.arange(len(y)), y] -= 1.0
    return _mean_nll(lp, y), g / len(y)


def vector_loss_grad(params, z, y):
    k = z.shape[1]
    w, b = params[:k], params[k:]
    loss, g = _softmax_xent(z * w + b, y)
    return loss, np.concatenate([(g * z).sum(axis=0), g.sum(axis=0)])


def dirichlet_loss_grad(params, q, y, l2):
    """NLL of softmax(W q + b) plus ``l2`` times the squared off-diagonal of W."""
    k = q.shape[1]
    W = params[:k * k].reshape(k, k)
    b = params[k * k:]
    loss, g = _softmax_xent(q @ W.T + b, y)
    off = W * (1.0 - np.eye(k))
    loss += l2 * float((off ** 2).sum())
    dW = g.T @ q + 2 * l2 * off
    return loss, np.concatenate([dW.ravel(), g.sum(axis=0)])


def _fit_adamw(loss_grad, init, n, cfg):
    def grad_fn(p, batch):
        return loss_grad(p, batch)

    fit = adamw_fit(init, grad_fn, n, cfg.scaling_adamw)
    full = np.arange(n)
    before = loss_grad(init, full)[0]
    after = loss_grad(fit.params, full)[0]
    # never return something worse than the starting point on the training split
    if after > before:
        return init.copy(), fit.trace
    return fit.params, fit.trace


def fit_vector(train, val=None, cfg=FitConfig()):
    """Per-class scale and bias by AdamW on training NLL, starting from w=1, b=0."""
    started = time.perf_counter()
    z, y = _flat(train)
    k = z.shape[1]
    init = np.concatenate([np.ones(k), np.zeros(k)])
    p, trace = _fit_adamw(lambda p, idx: vector_loss_grad(p, z[idx], y[idx]), init, len(y), cfg)
    w, b = p[:k], p[k:] - p[k:].mean()
    params = Vector(w, b)
    return _finish(params, train, val, cfg, started, {"trace": trace},
                   vector_loss_grad(init, z, y)[0], vector_loss_grad(p, z, y)[0])


def fit_dirichlet(train, val=None, cfg=FitConfig()):
    """Linear-parametrised Dirichlet map from W=I, b=0 with off-diagonal L2."""
    started = time.perf_counter()
    z, y = _flat(train)
    q = clamped_log_probs(z)
    k = z.shape[1]
    init = np.concatenate([np.eye(k).ravel(), np.zeros(k)])
    l2 = cfg.dirichlet_l2
    p, trace = _fit_adamw(lambda p, idx: dirichlet_loss_grad(p, q[idx], y[idx], l2), init, len(y), cfg)
    W, b = p[:k * k].reshape(k, k), p[k * k:]
    params = Dirichlet(W, b - b.mean())
    nll = lambda p: _mean_nll(log_softmax(q @ p[:k * k].reshape(k, k).T + p[k * k:]), y)
    return _finish(params, train, val, cfg, started, {"trace": trace}, nll(init), nll(p))


def fit_metacal_ext(train, val, cfg=FitConfig()):
    """Inner temperature by NLL, entropy gate by validation-ECE sweep over quantiles."""
    started = time.perf_counter()
    if val is None or len(val) == 0:
        raise SplitMissing("meta-cal needs a non-empty validation split to choose gamma")
    t_inner = fit_temperature(train, None, cfg).params.temperature
    z, y = _flat(train)
    entropy = pixel_entropy(softmax_with_temperature(z))
    best = None
    for q in sorted(METACAL_QUANTILES, reverse=True):
        gamma = float(np.quantile(entropy, q))
        ece = evaluate_ece(MetaCalExt(gamma, t_inner), val, cfg.binning).dataset_ece
        if best is None or ece < best[0]:
            best = (ece, q, gamma)
    _, quantile, gamma = best
    params = MetaCalExt(gamma, t_inner)
    lp = np.log(np.maximum(params.apply(z), PROB_FLOOR))
    return _finish(params, train, val, cfg, started, {"gamma_quantile": quantile},
                   temperature_nll(z, y, 1.0), _mean_nll(lp, y))


def _incorrect(z, y):
    return z.argmax(axis=1) != y


def fit_selective(train, val, cfg=FitConfig()):
    """Train the misprediction selector, then pick T1/T2 from its validation recall."""
    started = time.perf_counter()
    z, y = _flat(train)
    probs = softmax_with_temperature(z)
    wrong = _incorrect(z, y)
    if not wrong.any():
        raise DegenerateLabels(
            "training split has no mispredictions; selective scaling is undefined, use temperature scaling")
    if val is None or len(val) == 0 or not _incorrect(*_flat(val)).any():
        log.warning("validation split missing or without mispredictions; measuring the selector on training pixels")
        check_set, vz, vy = train, z, y
    else:
        check_set = val
        vz, vy = _flat(val)
    selector, metrics, trace = selector_train(
        probs, wrong, cfg.selector_adamw, cfg.selector_hidden, cfg.selector_sorted_input,
        val=(softmax_with_temperature(vz), _incorrect(vz, vy)), max_pixels=cfg.selector_max_pixels,
    )
    decisions = [selector.flag_incorrect(softmax_with_temperature(img.logits)) for img in check_set]

    def objective(t1, t2):
        items = ((img.image_id, apply_selective(img.logits, flags, t1, t2), img.labels)
                 for img, flags in zip(check_set, decisions))
        return dataset_ece(items, cfg.binning).dataset_ece

    acc = metrics.detection_accuracy
    t2_guess = 2.0 if acc < 0.35 else 1.0
    t1, t2 = choose_temperatures(metrics, lambda t1: objective(t1, t2_guess))
    params = Selective(selector, t1, t2)
    lp = np.log(np.maximum(apply_selective(z, selector.flag_incorrect(probs), t1, t2), PROB_FLOOR))
    details = {"selector": metrics.to_json(), "trace": trace}
    return _finish(params, train, val, cfg, started, details, temperature_nll(z, y, 1.0), _mean_nll(lp, y))


FITTERS = {
    "temp": lambda train, val, cfg: fit_temperature(train, val, cfg),
    "vector": lambda train, val, cfg: fit_vector(train, val, cfg),
    "dirichlet": lambda train, val, cfg: fit_dirichlet(train, val, cfg),
    "metacal": lambda train, val, cfg: fit_metacal_ext(train, val, cfg),
    "selective": lambda train, val, cfg: fit_selective(train, val, cfg),
}
