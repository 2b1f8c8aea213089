from __future__ import annotations

import numpy as np
import pytest

from oabev.camera import Camera, CameraPose, CameraRig, Intrinsics
from oabev.config import PipelineConfig
from oabev.pipeline import run_pipeline


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def intr() -> Intrinsics:
    return Intrinsics(f_x=100.0, f_y=90.0, c_x=32.0, c_y=24.0, width=64, height=48)


@pytest.fixture
def cam(intr: Intrinsics) -> Camera:
    return Camera(intr, CameraPose.identity())


@pytest.fixture
def forward_cam(intr: Intrinsics) -> Camera:
    """Camera at the ego origin looking along +x (ego), 1 m above ground."""
    return Camera(intr, CameraPose.looking_along(0.0, (0.0, 0.0, 1.0)))


@pytest.fixture
def forward_rig(forward_cam: Camera) -> CameraRig:
    return CameraRig((forward_cam,))


@pytest.fixture(scope="session")
def oracle_run():
    return run_pipeline(PipelineConfig(mode="oracle-depth"))


@pytest.fixture(scope="session")
def decoded_run():
    return run_pipeline(PipelineConfig(mode="decoded-depth"))
