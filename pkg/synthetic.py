"""Synthetic fluorescence phantoms with depth-dependent degradation."""

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from volume_io import Volume, VolumeError

logger = logging.getLogger(__name__)

BLUR_LEVELS = 8


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    n_ellipsoids: int = 30
    n_tubes: int = 6
    sigma_min: float = 0.5
    sigma_max: float = 3.0
    photons: float = 200.0
    decay_tau: float = 96.0
    seed: int = 0

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise VolumeError(f"Phantom shape must be three positive dims, got {self.shape}")
        if self.sigma_min < 0 or self.sigma_max < self.sigma_min:
            raise VolumeError(f"Need 0 <= sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.n_ellipsoids < 0 or self.n_tubes < 0:
            raise VolumeError("Object counts must be >= 0")

    def to_dict(self):
        return {**asdict(self), "shape": list(self.shape)}


def _add_ellipsoids(data, rng, count):
    grid = np.indices(data.shape, dtype=np.float32)
    low = 1.5
    high = max(low + 0.5, min(data.shape) / 8.0)
    for _ in range(count):
        center = [rng.uniform(0, n) for n in data.shape]
        radii = rng.uniform(low, high, size=3)
        brightness = rng.uniform(0.5, 1.0)
        dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
        data[dist <= 1.0] = np.maximum(data[dist <= 1.0], brightness)


def _add_tubes(data, rng, count):
    shape = np.array(data.shape)
    for _ in range(count):
        # Quadratic Bezier through three random control points.
        p0, p1, p2 = (rng.uniform(0, 1, size=3) * (shape - 1) for _ in range(3))
        t = np.linspace(0.0, 1.0, int(4 * shape.max()))[:, None]
        points = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        centerline = np.ones(data.shape, dtype=bool)
        idx = np.clip(np.rint(points).astype(int), 0, shape - 1)
        centerline[idx[:, 0], idx[:, 1], idx[:, 2]] = False
        radius = rng.uniform(0.8, 2.0)
        mask = ndimage.distance_transform_edt(centerline) <= radius
        data[mask] = np.maximum(data[mask], rng.uniform(0.6, 1.0))


def blur_sigmas(spec):
    """Per-z blur sigma, linear in depth and quantized to a few levels."""
    depth = spec.shape[2]
    ramp = np.linspace(spec.sigma_min, spec.sigma_max, depth)
    if spec.sigma_max == spec.sigma_min:
        return ramp
    levels = np.linspace(spec.sigma_min, spec.sigma_max, BLUR_LEVELS)
    return levels[np.abs(ramp[:, None] - levels[None, :]).argmin(axis=1)]


def _depth_blur(data, sigmas):
    out = np.empty_like(data)
    for sigma in np.unique(sigmas):
        slices = np.nonzero(sigmas == sigma)[0]
        # Axial spread of the PSF is roughly twice the lateral one.
        blurred = ndimage.gaussian_filter(data, sigma=(sigma, sigma, 2 * sigma)) if sigma > 0 else data
        out[:, :, slices] = blurred[:, :, slices]
    return out


def _normalize(data):
    top = float(data.max())
    return data / top if top > 0 else data


def make_phantom(spec):
    """Return (clean, degraded) volumes for a phantom spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    clean = np.zeros(spec.shape, dtype=np.float32)
    _add_ellipsoids(clean, rng, spec.n_ellipsoids)
    _add_tubes(clean, rng, spec.n_tubes)

    degraded = _depth_blur(clean.astype(np.float64), blur_sigmas(spec))
    if spec.decay_tau > 0:
        z = np.arange(spec.shape[2], dtype=np.float64)
        degraded = degraded * np.exp(-z / spec.decay_tau)[None, None, :]
    if spec.photons > 0:
        degraded = rng.poisson(np.clip(degraded, 0, None) * spec.photons) / spec.photons
    logger.info(
        f"Generated phantom shape={spec.shape} ellipsoids={spec.n_ellipsoids} tubes={spec.n_tubes} seed={spec.seed}"
    )
    return Volume.from_array(_normalize(clean)), Volume.from_array(_normalize(degraded))
