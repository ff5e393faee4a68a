import numpy as np
import pytest

from synthetic import BLUR_LEVELS, PhantomSpec, blur_sigmas, make_phantom
from volume_io import VolumeError


def gradient_energy(section):
    gx, gy = np.gradient(section.astype(np.float64))
    return float((gx ** 2 + gy ** 2).sum() / max((section.astype(np.float64) ** 2).sum(), 1e-12))


class TestPhantom:
    def test_shapes_and_range(self):
        clean, degraded = make_phantom(PhantomSpec(shape=(24, 20, 16), n_ellipsoids=8, n_tubes=2))
        assert clean.shape == degraded.shape == (24, 20, 16)
        for volume in (clean, degraded):
            assert volume.data.min() >= 0.0
            assert volume.data.max() == pytest.approx(1.0)

    def test_deterministic(self):
        spec = PhantomSpec(shape=(16, 16, 16), n_ellipsoids=5, n_tubes=1, seed=4)
        first, second = make_phantom(spec), make_phantom(spec)
        np.testing.assert_array_equal(first[1].data, second[1].data)

    def test_seed_changes_volume(self):
        a = make_phantom(PhantomSpec(shape=(16, 16, 16), seed=1))[0]
        b = make_phantom(PhantomSpec(shape=(16, 16, 16), seed=2))[0]
        assert not np.array_equal(a.data, b.data)

    def test_deeper_slices_dimmer(self):
        spec = PhantomSpec(shape=(32, 32, 32), sigma_min=0.0, sigma_max=0.0, photons=0, decay_tau=8)
        _, degraded = make_phantom(spec)
        assert degraded.data[:, :, -8:].mean() < degraded.data[:, :, :8].mean()

    def test_deeper_slices_blurrier(self):
        spec = PhantomSpec(shape=(32, 32, 32), n_ellipsoids=60, photons=0, decay_tau=0, sigma_min=0.0)
        clean, degraded = make_phantom(spec)
        shallow = np.mean([gradient_energy(degraded.data[:, :, z]) for z in range(2, 8)])
        deep = np.mean([gradient_energy(degraded.data[:, :, z]) for z in range(24, 30)])
        assert deep < shallow

    def test_invalid(self):
        with pytest.raises(VolumeError):
            make_phantom(PhantomSpec(sigma_min=2.0, sigma_max=1.0))
        with pytest.raises(VolumeError):
            make_phantom(PhantomSpec(shape=(4, 4)))


class TestBlurSigmas:
    def test_quantized_and_increasing(self):
        sigmas = blur_sigmas(PhantomSpec(shape=(8, 8, 100)))
        assert len(np.unique(sigmas)) <= BLUR_LEVELS
        assert np.all(np.diff(sigmas) >= 0)
        assert sigmas[0] == 0.5 and sigmas[-1] == 3.0

    def test_constant_blur(self):
        assert np.all(blur_sigmas(PhantomSpec(shape=(4, 4, 5), sigma_min=1.0, sigma_max=1.0)) == 1.0)
