"""Shared builders for the test suite."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from splatbook.model import CameraView, GaussianScene


def identity_camera(width=64, height=64, focal=50.0, view_id=0):
    """Camera at the origin looking down +z with the pixel grid centered."""
    return CameraView(
        view_id=str(view_id),
        width=width,
        height=height,
        fx=focal,
        fy=focal,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        rotation=(1.0, 0.0, 0.0, 0.0),
        translation=(0.0, 0.0, 0.0),
    )


def random_scene(rng, n, spread=1.0, depth_range=(2.0, 6.0), scale_range=(0.05, 0.25),
                 opacity_range=(0.3, 0.95)):
    """Isotropic-ish random scene in front of the identity camera."""
    centers = np.empty((n, 3), dtype=np.float64)
    centers[:, 0] = rng.uniform(-spread, spread, n)
    centers[:, 1] = rng.uniform(-spread, spread, n)
    centers[:, 2] = rng.uniform(depth_range[0], depth_range[1], n)
    scales = rng.uniform(scale_range[0], scale_range[1], (n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = rng.uniform(opacity_range[0], opacity_range[1], n)
    return GaussianScene.from_params(centers, scales, quats, opacities)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
