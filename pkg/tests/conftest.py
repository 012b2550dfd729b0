import glob
import os

import numpy as np
import pytest

from msls.io import load_image, load_kernel

DATA = os.path.join(os.path.dirname(__file__), "data")
DESK_IMAGES = ("camera", "astronaut", "coffee", "chelsea", "rocket")
DESK_KERNELS = (15, 19, 23, 27)


def desk_image(name):
    return load_image(os.path.join(DATA, "desk", f"{name}.png"))


def desk_kernel(size):
    return load_kernel(os.path.join(DATA, "desk", f"motion{size}.kernel.txt"))


def data_image(name):
    return load_image(os.path.join(DATA, name))


def natural_512():
    return [load_image(f) for f in sorted(glob.glob(os.path.join(DATA, "*512.png")))]


@pytest.fixture(scope="session")
def camera():
    return desk_image("camera")


@pytest.fixture(scope="session")
def small_camera(camera):
    return camera[64:192, 64:192].copy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
