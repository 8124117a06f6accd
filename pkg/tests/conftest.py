import numpy as np
import pytest

from transem.simulation import (
    Ellipse,
    HotDisk,
    PhantomSpec,
    render_phantom,
    rng_for,
    simulate_scan,
)
from transem.system import ScannerGeometry2D, SystemModel


@pytest.fixture(scope="session")
def geom16():
    return ScannerGeometry2D(
        n_angles=12, n_bins=26, bin_spacing_mm=2.0, image_size=16, pixel_size_mm=2.0
    )


@pytest.fixture(scope="session")
def model16(geom16):
    return SystemModel(geom16, psf_fwhm_mm=0.0)


@pytest.fixture(scope="session")
def model16_psf(geom16):
    return SystemModel(geom16, psf_fwhm_mm=3.0)


@pytest.fixture(scope="session")
def geom_default():
    # the default desk geometry: 64x64 image, 60 angles x 95 bins
    return ScannerGeometry2D(
        n_angles=60, n_bins=95, bin_spacing_mm=2.0, image_size=64, pixel_size_mm=2.0
    )


@pytest.fixture(scope="session")
def model_default(geom_default):
    return SystemModel(geom_default, psf_fwhm_mm=0.0)


@pytest.fixture(scope="session")
def phantom16(geom16):
    spec = PhantomSpec(
        ellipses=[
            Ellipse(0.0, 0.0, 13.0, 11.0, 0.3, 1.0),
            Ellipse(0.0, 0.0, 8.0, 7.0, 0.3, 0.5),
        ],
        hot_disks=[HotDisk(3.0, 2.0, 3.0, 2.0)],
    )
    image, mask = render_phantom(spec, geom16)
    return image, mask


@pytest.fixture(scope="session")
def scan16(phantom16, model16):
    image, _ = phantom16
    return simulate_scan(image, model16, 2e4, 0.2, rng_for(7, 0))


@pytest.fixture(scope="session")
def scan16_psf(phantom16, model16_psf):
    image, _ = phantom16
    return simulate_scan(image, model16_psf, 2e4, 0.2, rng_for(7, 1))
