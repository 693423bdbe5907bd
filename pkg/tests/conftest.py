import numpy as np
import pytest

from cinestrain.geometry import LabelMask, Volume3D
from cinestrain.phantom import PhantomConfig, make_phantom


def small_config(**overrides):
    """Phantom sized for unit tests: same structure, ~5x fewer voxels."""
    kw = dict(
        dims=(48, 48, 8),
        spacing=(2.0, 2.0, 8.0),
        r_in=9.0,
        r_out=15.0,
        c_max=35.0,
        shelf_radius=36.0,
        taper_radius=44.0,
        phases=6,
        seed=0,
    )
    kw.update(overrides)
    return PhantomConfig(**kw)


@pytest.fixture(scope="session")
def small_phantom():
    return make_phantom(small_config())


@pytest.fixture(scope="session")
def default_phantom():
    return make_phantom(PhantomConfig())


def random_volume(rng, dims=(7, 6, 5), spacing=(1.5, 2.0, 3.0), origin=(-4.0, 1.0, 2.5)):
    data = rng.standard_normal(dims)
    return Volume3D(dims, spacing, origin, np.eye(3), data)


def random_mask(rng, dims=(7, 6, 5), spacing=(1.5, 2.0, 3.0), origin=(-4.0, 1.0, 2.5)):
    labels = rng.integers(0, 4, size=dims).astype(np.uint8)
    return LabelMask(dims, spacing, origin, np.eye(3), labels)


def measured_step_grad(fn, arr, flat, h):
    """Central difference respecting float32 parameter storage.

    The array element is replaced by float32(base +/- h); the denominator is
    the realized float64 difference, so quantization of the step does not
    pollute the quotient.
    """
    base = float(arr.flat[flat])
    up = np.float32(base + h)
    dn = np.float32(base - h)
    lp = fn(up)
    lm = fn(dn)
    return (lp - lm) / (float(up) - float(dn))
