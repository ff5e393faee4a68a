"""No-reference image quality metrics and their 3-way sectional aggregation.

Every metric sees 2D sections rescaled from [0, 1] to [0, 255]. A volume's
score for a metric is the mean of its xy, xz and yz axis means, and each axis
mean is the plain mean over that axis' sections.
"""

import csv
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from scipy.special import gamma as gamma_fn
from scipy.special import softmax

from sectioning import ALL_AXES, extract_sections

logger = logging.getLogger(__name__)

MSCN_SIGMA = 7.0 / 6.0
MSCN_RADIUS = 3
MSCN_C = 1.0
VARIANCE_FLOOR = 1e-8
BRISQUE_FEATURE_DIM = 36
IFQ_PATCH = 84
IFQ_LEVELS = 11

# Moment-ratio lookup shared by the GGD and AGGD fits.
_SHAPE_GRID = np.arange(0.2, 10.001, 0.001)
_GGD_RATIO = gamma_fn(1.0 / _SHAPE_GRID) * gamma_fn(3.0 / _SHAPE_GRID) / gamma_fn(2.0 / _SHAPE_GRID) ** 2
_AGGD_RATIO = gamma_fn(2.0 / _SHAPE_GRID) ** 2 / (gamma_fn(1.0 / _SHAPE_GRID) * gamma_fn(3.0 / _SHAPE_GRID))
_PAIR_SHIFTS = ((0, 1), (1, 0), (1, 1), (-1, 1))


class MetricError(RuntimeError):
    """A metric failed on a section; carries the axis and 1-based section index when known."""

    def __init__(self, message, axis=None, index=None):
        where = ""
        if axis is not None:
            where = f" ({axis.value} section {index})"
        super().__init__(f"{message}{where}")
        self.axis = axis
        self.index = index


def to_metric_range(section):
    return np.asarray(section, dtype=np.float64) * 255.0


# --- BRISQUE ---------------------------------------------------------------


def mscn_coefficients(img):
    """(I - mu) / (sigma + C) with a 7x7 Gaussian window (std 7/6) and C = 1."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 7:
        raise MetricError(f"MSCN needs a 2D image of at least 7x7, got {img.shape}")
    truncate = MSCN_RADIUS / MSCN_SIGMA
    mu = ndimage.gaussian_filter(img, MSCN_SIGMA, mode="nearest", truncate=truncate)
    mu_sq = ndimage.gaussian_filter(img * img, MSCN_SIGMA, mode="nearest", truncate=truncate)
    sigma = np.sqrt(np.abs(mu_sq - mu * mu))
    return (img - mu) / (sigma + MSCN_C)


def ggd_fit(x):
    """Symmetric generalized Gaussian fit by moment matching: (shape, variance, degenerate)."""
    x = np.ravel(x)
    variance = float(np.mean(x * x))
    degenerate = variance < VARIANCE_FLOOR
    variance = max(variance, VARIANCE_FLOOR)
    mean_abs = max(float(np.mean(np.abs(x))), math.sqrt(VARIANCE_FLOOR))
    rho = variance / mean_abs ** 2
    shape = float(_SHAPE_GRID[np.argmin(np.abs(rho - _GGD_RATIO))])
    return shape, variance, degenerate


@dataclass(frozen=True)
class AggdParams:
    shape: float
    mean: float
    left_var: float
    right_var: float
    degenerate: bool = False


def aggd_fit(x):
    """Asymmetric generalized Gaussian fit by moment matching."""
    x = np.ravel(np.asarray(x, dtype=np.float64))
    left, right = x[x < 0], x[x > 0]
    degenerate = left.size == 0 or right.size == 0
    left_var = max(float(np.mean(left * left)) if left.size else 0.0, VARIANCE_FLOOR)
    right_var = max(float(np.mean(right * right)) if right.size else 0.0, VARIANCE_FLOOR)
    degenerate = degenerate or left_var == VARIANCE_FLOOR or right_var == VARIANCE_FLOOR
    left_std, right_std = math.sqrt(left_var), math.sqrt(right_var)
    gamma_hat = left_std / right_std
    second = max(float(np.mean(x * x)), VARIANCE_FLOOR)
    r_hat = float(np.mean(np.abs(x))) ** 2 / second
    r_hat_norm = r_hat * (gamma_hat ** 3 + 1) * (gamma_hat + 1) / (gamma_hat ** 2 + 1) ** 2
    shape = float(_SHAPE_GRID[np.argmin((_AGGD_RATIO - r_hat_norm) ** 2)])
    const = math.sqrt(gamma_fn(1.0 / shape) / gamma_fn(3.0 / shape))
    mean = (right_std - left_std) * (gamma_fn(2.0 / shape) / gamma_fn(1.0 / shape)) * const
    return AggdParams(shape, float(mean), left_var, right_var, degenerate)


@dataclass(frozen=True, eq=False)
class BrisqueFeatures:
    values: np.ndarray
    degenerate: bool = False


def _half_scale(img):
    h, w = img.shape
    resized = Image.fromarray(img.astype(np.float32)).resize((max(1, w // 2), max(1, h // 2)), Image.BICUBIC)
    return np.asarray(resized, dtype=np.float64)


def brisque_features(img):
    """18 natural-scene statistics at full and half resolution."""
    img = np.asarray(img, dtype=np.float64)
    features, degenerate = [], False
    for scale in range(2):
        mscn = mscn_coefficients(img)
        shape, variance, flat = ggd_fit(mscn)
        degenerate = degenerate or flat
        features.extend([shape, variance])
        for du, dv in _PAIR_SHIFTS:
            shifted = np.roll(np.roll(mscn, du, axis=0), dv, axis=1)
            params = aggd_fit(mscn * shifted)
            degenerate = degenerate or params.degenerate
            features.extend([params.shape, params.mean, params.left_var, params.right_var])
        if scale == 0:
            img = _half_scale(img)
    return BrisqueFeatures(np.array(features, dtype=np.float64), degenerate)


@dataclass(frozen=True, eq=False)
class BrisqueModel:
    kernel: str
    rho: float
    feature_min: np.ndarray
    feature_max: np.ndarray
    gamma: float = 0.05
    support_vectors: np.ndarray = None
    coefficients: np.ndarray = None
    weights: np.ndarray = None

    def __post_init__(self):
        if self.kernel not in ("rbf", "linear"):
            raise ValueError(f"Unknown BRISQUE kernel '{self.kernel}'")
        for name in ("feature_min", "feature_max"):
            if np.shape(getattr(self, name)) != (BRISQUE_FEATURE_DIM,):
                raise ValueError(f"{name} must hold {BRISQUE_FEATURE_DIM} values")
        if self.kernel == "rbf":
            if self.support_vectors is None or len(self.support_vectors) == 0:
                raise ValueError("rbf BRISQUE model needs support vectors")
            if np.shape(self.support_vectors)[1] != BRISQUE_FEATURE_DIM:
                raise ValueError(f"Support vectors must have {BRISQUE_FEATURE_DIM} components")
        elif np.shape(self.weights) != (BRISQUE_FEATURE_DIM,):
            raise ValueError(f"linear BRISQUE model needs {BRISQUE_FEATURE_DIM} weights")

    def scale(self, values):
        span = self.feature_max - self.feature_min
        span = np.where(span == 0, 1.0, span)
        return -1.0 + 2.0 * (values - self.feature_min) / span

    def predict(self, values):
        x = self.scale(np.asarray(values, dtype=np.float64))
        if self.kernel == "rbf":
            dist = np.sum((self.support_vectors - x) ** 2, axis=1)
            raw = float(np.exp(-self.gamma * dist) @ self.coefficients) - self.rho
        else:
            raw = float(self.weights @ x) - self.rho
        return min(100.0, max(0.0, raw))


def load_brisque_model(path):
    """Read a BRISQUE regressor from its plain-text model file."""
    if not os.path.exists(path):
        raise MetricError(f"BRISQUE model file not found: {path}")
    values = {"gamma": 0.05}
    support, coefs = [], []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, *rest = line.split()
            try:
                if key == "kernel":
                    values["kernel"] = rest[0]
                elif key in ("gamma", "rho"):
                    values[key] = float(rest[0])
                elif key in ("feature_min", "feature_max", "weights"):
                    values[key] = np.array([float(v) for v in rest])
                elif key == "sv":
                    coefs.append(float(rest[0]))
                    support.append([float(v) for v in rest[1:]])
                else:
                    raise ValueError(f"unknown key '{key}'")
            except (IndexError, ValueError) as e:
                raise MetricError(f"Malformed BRISQUE model {path} line {line_no}: {e}")
    try:
        return BrisqueModel(
            kernel=values.get("kernel", "rbf"),
            rho=values["rho"],
            feature_min=values["feature_min"],
            feature_max=values["feature_max"],
            gamma=values["gamma"],
            support_vectors=np.array(support) if support else None,
            coefficients=np.array(coefs) if coefs else None,
            weights=values.get("weights"),
        )
    except (KeyError, ValueError) as e:
        raise MetricError(f"Incomplete BRISQUE model {path}: {e}")


def brisque_score(img, model):
    """BRISQUE quality in [0, 100]; lower is better."""
    return model.predict(brisque_features(img).values)


# --- Microscopy IFQ --------------------------------------------------------


def focus_probabilities(logits):
    """Softmax over the defocus levels of each row of an (n, 11) logit array."""
    return softmax(np.asarray(logits, dtype=np.float64), axis=-1)


def expected_focus_level(logits):
    """Sum over l of l * p(l) per row, from logits."""
    logits = np.asarray(logits, dtype=np.float64)
    weights = np.exp(logits - logits.max(axis=-1, keepdims=True))
    levels = np.arange(logits.shape[-1], dtype=np.float64)
    return (weights @ levels) / weights.sum(axis=-1)


def _nearest_multiple(n, patch):
    return max(1, int(math.floor(n / patch + 0.5))) * patch


def ifq_patches(img, patch=IFQ_PATCH):
    """Resize to the nearest multiple of the patch size and cut non-overlapping patches."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    th, tw = _nearest_multiple(h, patch), _nearest_multiple(w, patch)
    if (th, tw) != (h, w):
        tensor = torch.from_numpy(img)[None, None]
        img = F.interpolate(tensor, size=(th, tw), mode="bilinear", align_corners=False, antialias=False)[0, 0].numpy()
    return img.reshape(th // patch, patch, tw // patch, patch).swapaxes(1, 2).reshape(-1, patch, patch)


def microscopy_ifq(img, classifier):
    """Mean expected defocus level over 84x84 patches, in [0, 10]; lower is better."""
    if classifier is None:
        raise MetricError("Microscopy IFQ needs a focus classifier")
    patches = ifq_patches(img)
    logits = np.asarray(classifier.logits(patches), dtype=np.float64)
    if logits.shape != (len(patches), IFQ_LEVELS):
        raise MetricError(f"Focus classifier returned {logits.shape}, expected ({len(patches)}, {IFQ_LEVELS})")
    return float(np.mean(expected_focus_level(logits)))


class LaplacianFocusClassifier:
    """Deterministic stand-in for a trained defocus classifier.

    Maps the log variance of each patch's Laplacian to a continuous level and
    emits logits peaked at that level. Not a learned model.
    """

    def __init__(self, sharp_log_var=8.0, step=0.6, sharpness=2.0):
        self.sharp_log_var = sharp_log_var
        self.step = step
        self.sharpness = sharpness

    def continuous_level(self, patch):
        log_var = math.log(float(np.var(ndimage.laplace(np.asarray(patch, dtype=np.float64)))) + 1e-12)
        return min(IFQ_LEVELS - 1.0, max(0.0, (self.sharp_log_var - log_var) / self.step))

    def logits(self, patches):
        levels = np.arange(IFQ_LEVELS, dtype=np.float64)
        return np.stack([-self.sharpness * (levels - self.continuous_level(p)) ** 2 for p in patches])


class TorchScriptFocusClassifier:
    """Serialized defocus classifier: (n, 1, 84, 84) patches in [0, 1] -> (n, 11) logits."""

    def __init__(self, path):
        if not os.path.exists(path):
            raise MetricError(f"Focus classifier model not found: {path}")
        self.path = path
        self.model = torch.jit.load(path, map_location="cpu")
        self.model.eval()

    def logits(self, patches):
        batch = torch.from_numpy(np.asarray(patches, dtype=np.float32) / 255.0).unsqueeze(1)
        with torch.no_grad():
            return self.model(batch).double().numpy()


# --- Metric adapters -------------------------------------------------------


class MetricAdapter:
    name = "metric"
    lower_is_better = True
    valid_range = (-math.inf, math.inf)

    def score(self, img):
        raise NotImplementedError

    def __call__(self, img):
        value = float(self.score(img))
        if not math.isfinite(value):
            raise MetricError(f"{self.name} returned a non-finite score")
        return value


class ConstantMetric(MetricAdapter):
    def __init__(self, value, name="constant"):
        self.value = float(value)
        self.name = name

    def score(self, img):
        return self.value


class MeanIntensityMetric(MetricAdapter):
    name = "mean_intensity"
    lower_is_better = False
    valid_range = (0.0, 255.0)

    def score(self, img):
        return float(np.mean(img))


class BrisqueMetric(MetricAdapter):
    name = "brisque"
    valid_range = (0.0, 100.0)

    def __init__(self, model):
        self.model = model
        self.degenerate_sections = 0
        self._lock = threading.Lock()

    def score(self, img):
        features = brisque_features(img)
        if features.degenerate:
            with self._lock:
                self.degenerate_sections += 1
        return self.model.predict(features.values)


class MicroscopyIfqMetric(MetricAdapter):
    name = "microscopy_ifq"
    valid_range = (0.0, IFQ_LEVELS - 1.0)

    def __init__(self, classifier):
        self.classifier = classifier

    def score(self, img):
        return microscopy_ifq(img, self.classifier)


class TorchScriptMetric(MetricAdapter):
    """External scalar quality model, e.g. OG-IQA: (1, 1, h, w) image -> scalar."""

    def __init__(self, path, name="og_iqa", valid_range=(-1.0, 1.0), lower_is_better=True):
        if not os.path.exists(path):
            raise MetricError(f"{name} model not found: {path}")
        self.path = path
        self.name = name
        self.valid_range = tuple(valid_range)
        self.lower_is_better = lower_is_better
        self.model = torch.jit.load(path, map_location="cpu")
        self.model.eval()

    def score(self, img):
        tensor = torch.from_numpy(np.asarray(img, dtype=np.float32))[None, None]
        with torch.no_grad():
            return float(self.model(tensor).reshape(-1)[0])


# --- 3-way aggregation -----------------------------------------------------


@dataclass
class VolumeQuality:
    metric: str
    section_scores: dict
    axis_means: dict
    score: float
    flags: list = field(default_factory=list)


def _score_axis(volume, axis, metric, workers):
    stack = extract_sections(volume, axis)

    def score(index):
        try:
            return metric(to_metric_range(stack.sections[index]))
        except Exception as e:
            raise MetricError(f"{metric.name} failed: {e}", axis, index + 1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(score, range(stack.count)))
    return [score(k) for k in range(stack.count)]


def volume_quality_3way(volume, metric, workers=1):
    """Score every section on all three axes, average per axis, then average the axis means."""
    degenerate_before = getattr(metric, "degenerate_sections", 0)
    section_scores, axis_means = {}, {}
    for axis in ALL_AXES:
        scores = _score_axis(volume, axis, metric, workers)
        section_scores[axis.value] = scores
        axis_means[axis.value] = sum(scores) / len(scores)
    score = sum(axis_means[a.value] for a in ALL_AXES) / len(ALL_AXES)
    flags = []
    if getattr(metric, "degenerate_sections", 0) > degenerate_before:
        flags.append("degenerate")
    logger.info(
        f"{metric.name}: xy={axis_means['xy']:.4f} xz={axis_means['xz']:.4f} yz={axis_means['yz']:.4f} 3way={score:.4f}"
    )
    return VolumeQuality(metric.name, section_scores, axis_means, score, flags)


@dataclass
class QualityReport:
    """Methods x metrics table of 3-way scores."""

    rows: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def add(self, method, quality):
        self.rows.setdefault(method, {})[quality.metric] = quality
        if quality.metric not in self.metrics:
            self.metrics.append(quality.metric)

    def value(self, method, metric):
        quality = self.rows.get(method, {}).get(metric)
        return quality.score if quality else float("nan")

    def table(self):
        return [[self.value(method, metric) for metric in self.metrics] for method in self.rows]

    def to_csv(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            header = ["method"]
            for metric in self.metrics:
                header += [metric, f"{metric}_xy", f"{metric}_xz", f"{metric}_yz"]
            writer.writerow(header)
            for method, qualities in self.rows.items():
                row = [method]
                for metric in self.metrics:
                    quality = qualities.get(metric)
                    if quality is None:
                        row += [""] * 4
                    else:
                        row += [repr(quality.score)] + [repr(quality.axis_means[a.value]) for a in ALL_AXES]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path):
        """Rebuild a report (axis means and 3-way scores only) from to_csv output."""
        report = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            report.metrics = [header[k] for k in range(1, len(header), 4)]
            for row in reader:
                report.rows[row[0]] = {}
                for m, metric in enumerate(report.metrics):
                    cells = row[1 + 4 * m:5 + 4 * m]
                    if not cells or cells[0] == "":
                        continue
                    axis_means = {a.value: float(c) for a, c in zip(ALL_AXES, cells[1:])}
                    report.rows[row[0]][metric] = VolumeQuality(metric, {}, axis_means, float(cells[0]))
        return report

    def to_text(self):
        headers = ["Method"] + [f"3-Way {m}" for m in self.metrics]
        body = [
            [method] + [f"{self.value(method, m):.4f}" for m in self.metrics]
            for method in self.rows
        ]
        widths = [max(len(str(r[i])) for r in [headers] + body) for i in range(len(headers))]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(headers, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in body]
        for method, message in self.errors.items():
            lines.append(f"! {method}: {message}")
        return "\n".join(lines) + "\n"


def evaluate_volumes(volumes, metrics, workers=1, best_effort=False, metadata=None):
    """Score each named volume with each metric.

    ``volumes`` is a mapping or a list of (name, Volume) pairs. With
    ``best_effort`` a failing metric is logged and left out of its row.
    """
    items = volumes.items() if isinstance(volumes, dict) else volumes
    report = QualityReport(metadata=dict(metadata or {}))
    for metric in metrics:
        if metric.name not in report.metrics:
            report.metrics.append(metric.name)
    for method, volume in items:
        report.rows.setdefault(method, {})
        for metric in metrics:
            try:
                report.add(method, volume_quality_3way(volume, metric, workers))
            except MetricError as e:
                if not best_effort:
                    raise
                logger.error(f"Error scoring {method} with {metric.name}: {e}")
                report.errors[f"{method}/{metric.name}"] = str(e)
    return report


# --- Alignment -------------------------------------------------------------


def _centroids(img):
    img = np.asarray(img, dtype=np.float64)
    mask = img > img.mean() + img.std()
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.zeros((0, img.ndim))
    return np.array(ndimage.center_of_mass(mask, labels, range(1, count + 1)))


def object_centroid_displacement(a, b):
    """Mean distance from each bright object's centroid in ``a`` to the nearest one in ``b``.

    Objects are connected components above mean + 1 std. Returns nan when ``a``
    has no objects and inf when ``b`` has none.
    """
    ca, cb = _centroids(a), _centroids(b)
    if len(ca) == 0:
        return float("nan")
    if len(cb) == 0:
        return float("inf")
    dist = np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(axis=-1))
    return float(dist.min(axis=1).mean())
