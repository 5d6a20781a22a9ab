import numpy as np
import pytest

from splatattn.scene import Camera, GaussianCloud


def random_cloud(rng, n, spread=0.6, scale=(0.12, 0.3), opacity=(0.3, 0.9)):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        rotations=q,
        scales=rng.uniform(*scale, (n, 3)),
        opacities=rng.uniform(*opacity, n),
        colors=rng.uniform(0, 1, (n, 3)),
        attn_weights=rng.uniform(0, 1, n),
    )


def front_camera(res=32, focal=32.0, dist=4.0):
    return Camera(eye=[0.0, 0.0, dist], look_at=[0.0, 0.0, 0.0], focal=focal, resolution=(res, res))


def single(position=(0.0, 0.0, 0.0), scale=0.2, opacity=0.5, color=(0.2, 0.4, 0.6), attn=0.0):
    return GaussianCloud(
        positions=[position], rotations=[[1.0, 0, 0, 0]], scales=[[scale] * 3],
        opacities=[opacity], colors=[color], attn_weights=[attn],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return front_camera()
