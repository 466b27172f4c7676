"""Shared scene/camera generators for the test suite."""

import numpy as np

from scene4d.scene import Camera, Gaussian3D, GaussianScene, MotionScaffold


def default_camera(width=64, height=64, focal=70.0, eye=(0.0, 0.0, -6.0)):
    return Camera.look_at(eye, (0.0, 0.0, 0.0), width=width, height=height,
                          focal=focal)


def random_splat_scene(seed, n=None, feature_dim=4, frames=1,
                       include_culled=True):
    """Static random scene for rasterizer equivalence runs."""
    rng = np.random.default_rng(seed)
    if n is None:
        n = int(rng.integers(20, 201))
    scaffold = MotionScaffold.identity(1, frames)
    gaussians = []
    for i in range(n):
        pos = rng.uniform([-2.5, -2.5, -1.5], [2.5, 2.5, 1.5])
        if include_culled and rng.uniform() < 0.03:
            pos[2] = rng.uniform(-9.0, -6.5)  # behind the default camera
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        gaussians.append(
            Gaussian3D(
                mean=pos,
                scale=rng.uniform(0.05, 0.5, size=3),
                rotation=q,
                opacity=float(rng.uniform(0.1, 0.95)),
                color=rng.uniform(0.0, 1.0, size=3),
                feature=rng.normal(0.0, 1.0, size=feature_dim),
                label=None,
                node_bindings=((0, 1.0),),
            )
        )
    return GaussianScene(
        gaussians=tuple(gaussians),
        scaffold=scaffold,
        background_color=rng.uniform(0.0, 0.3, size=3),
        feature_dim=feature_dim,
    )
