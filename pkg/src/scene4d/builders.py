"""Procedural scene builders.

Stand-in for video-based reconstruction: each catalog object becomes a seeded
cluster of Gaussians bound (K=1) to its own scaffold node, which follows a
linear or bouncing trajectory. Labels are set from the object tag so tests
and the synthetic encoder can recover ground truth; nothing downstream of
distillation may read them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SceneBuildError
from .scene import Gaussian3D, GaussianScene, MotionScaffold

CATALOG = ("ball", "cube", "car-box", "fish-ellipsoid", "ground-plane")

# per-kind (x, y, z) half-extent multipliers applied to ObjectSpec.size
_KIND_SHAPE = {
    "cube": (1.0, 1.0, 1.0),
    "car-box": (1.6, 0.5, 0.7),
    "fish-ellipsoid": (1.4, 0.5, 0.35),
}


@dataclass(frozen=True)
class ObjectSpec:
    kind: str
    tag: str = ""
    color: tuple[float, float, float] = (0.8, 0.2, 0.2)
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    count: int = 100
    size: float = 1.0
    bounce: bool = False
    gravity: float = 0.2
    floor: float = 0.0

    def resolved_tag(self) -> str:
        return self.tag or self.kind


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    frame_count: int
    seed: int = 0
    feature_dim: int = 16
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))


def bouncing_height(y0: float, vy: float, gravity: float, floor: float,
                    t: float) -> float:
    """Height at time t under ballistic motion with elastic floor bounces.

    Sequential event-driven arcs: advance arc by arc, solving each impact
    time in closed form. Restitution is 1 (elastic).
    """
    if gravity <= 0:
        return y0 + vy * t
    y, v, now = y0, vy, 0.0
    if y < floor:
        raise SceneBuildError("bouncing object starts below the floor")
    while True:
        # impact time for y + v*dt - g/2*dt^2 = floor (positive root)
        disc = v * v + 2.0 * gravity * (y - floor)
        dt_hit = (v + math.sqrt(disc)) / gravity
        if t - now < dt_hit:
            dt = t - now
            return y + v * dt - 0.5 * gravity * dt * dt
        now += dt_hit
        y = floor
        v = gravity * dt_hit - v  # reflected impact speed, restitution 1
        if dt_hit <= 1e-12:
            # resting contact; stop iterating
            return floor


def _object_positions(obj: ObjectSpec, frame_count: int) -> np.ndarray:
    start = np.asarray(obj.start, dtype=np.float64)
    vel = np.asarray(obj.velocity, dtype=np.float64)
    frames = np.arange(frame_count, dtype=np.float64)
    pos = start[None, :] + frames[:, None] * vel[None, :]
    if obj.bounce:
        pos[:, 1] = [
            bouncing_height(start[1], vel[1], obj.gravity, obj.floor, t)
            for t in frames
        ]
    return pos


def _sample_points(rng: np.random.Generator, obj: ObjectSpec) -> np.ndarray:
    n = obj.count
    if obj.kind == "ball":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = obj.size * np.cbrt(rng.uniform(size=(n, 1)))
        return d * r
    if obj.kind == "ground-plane":
        pts = np.zeros((n, 3))
        pts[:, 0] = rng.uniform(-4 * obj.size, 4 * obj.size, size=n)
        pts[:, 2] = rng.uniform(-4 * obj.size, 4 * obj.size, size=n)
        pts[:, 1] = rng.normal(0.0, 0.02, size=n)
        return pts
    half = np.array(_KIND_SHAPE[obj.kind]) * obj.size
    if obj.kind == "cube" or obj.kind == "car-box":
        return rng.uniform(-half, half, size=(n, 3))
    # fish-ellipsoid: uniform in the ellipsoid
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = np.cbrt(rng.uniform(size=(n, 1)))
    return d * r * half


def _sample_scales(rng: np.random.Generator, obj: ObjectSpec) -> np.ndarray:
    if obj.kind == "ground-plane":
        s = np.empty((obj.count, 3))
        s[:, 0] = rng.uniform(0.6, 1.2, size=obj.count) * obj.size
        s[:, 1] = 0.02
        s[:, 2] = rng.uniform(0.6, 1.2, size=obj.count) * obj.size
        return s
    base = 0.15 * obj.size
    return base * rng.uniform(0.6, 1.4, size=(obj.count, 3))


def build_demo_scene(spec: SceneSpec) -> GaussianScene:
    """Build a deterministic labeled scene from a catalog spec."""
    if spec.frame_count < 2:
        raise SceneBuildError(f"frame_count must be >= 2, got {spec.frame_count}")
    if not spec.objects:
        raise SceneBuildError("scene spec names no objects")
    for obj in spec.objects:
        if obj.kind not in CATALOG:
            raise SceneBuildError(
                f"unknown object kind {obj.kind!r}; catalog: {', '.join(CATALOG)}"
            )
        if obj.count < 1:
            raise SceneBuildError("object count must be positive")

    rng = np.random.default_rng(spec.seed)
    n_obj = len(spec.objects)
    translations = np.zeros((n_obj, spec.frame_count, 3))
    for i, obj in enumerate(spec.objects):
        if obj.kind == "ground-plane":
            continue  # static
        pos = _object_positions(obj, spec.frame_count)
        translations[i] = pos - pos[0]
    scaffold = MotionScaffold.from_translations(translations)

    gaussians: list[Gaussian3D] = []
    for i, obj in enumerate(spec.objects):
        points = _sample_points(rng, obj) + np.asarray(obj.start, dtype=np.float64)
        scales = _sample_scales(rng, obj)
        quats = rng.normal(size=(obj.count, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        opacities = rng.uniform(0.35, 0.65, size=obj.count)
        features = rng.normal(0.0, 0.02, size=(obj.count, spec.feature_dim))
        for k in range(obj.count):
            gaussians.append(
                Gaussian3D(
                    mean=points[k],
                    scale=scales[k],
                    rotation=quats[k],
                    opacity=float(opacities[k]),
                    color=np.asarray(obj.color, dtype=np.float64),
                    feature=features[k],
                    label=obj.resolved_tag(),
                    node_bindings=((i, 1.0),),
                )
            )
    return GaussianScene(
        gaussians=tuple(gaussians),
        scaffold=scaffold,
        background_color=np.asarray(spec.background, dtype=np.float64),
        feature_dim=spec.feature_dim,
    )


def desk_scene_spec(frame_count: int = 8, seed: int = 7,
                    feature_dim: int = 16) -> SceneSpec:
    """The two-object reference scene used by distillation and editing tests."""
    return SceneSpec(
        objects=(
            ObjectSpec(
                kind="ball", tag="ball", color=(0.85, 0.15, 0.1),
                start=(-3.0, 1.2, 0.0), velocity=(0.7, 0.0, 0.0),
                count=100, size=1.0,
            ),
            ObjectSpec(
                kind="cube", tag="cube", color=(0.1, 0.3, 0.85),
                start=(2.5, -1.0, 1.0), velocity=(-0.4, 0.1, 0.0),
                count=100, size=1.0,
            ),
        ),
        frame_count=frame_count,
        seed=seed,
        feature_dim=feature_dim,
    )
