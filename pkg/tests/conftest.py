import numpy as np
import pytest

from bd3mg import blur, volume
from bd3mg.objective import Objective, RegParams


def make_instance(dims, kdims=(3, 3, 3), sigma=(0.6, 1.1), noise=0.05,
                  psf_seed=3, noise_seed=11, phantom_seed=7,
                  params=None) -> Objective:
    """Small degraded-phantom problem instance for tests."""
    dims = volume.Dims3(*dims)
    ranges = blur.ParamRanges(sigma1=sigma, sigma2=sigma, sigma3=sigma)
    psf = blur.generate_psf_stack(dims, blur.KernelDims(*kdims), ranges, psf_seed)
    truth = volume.phantom(dims, phantom_seed)
    y = volume.add_gaussian_noise(blur.apply_H(psf, truth), noise, noise_seed)
    return Objective(psf, y, params or RegParams())


@pytest.fixture
def tiny_obj():
    """6x6x4 instance for oracle-level comparisons."""
    return make_instance((6, 6, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(42)
