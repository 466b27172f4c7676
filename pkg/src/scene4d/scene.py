"""Dynamic 3D Gaussian scene representation.

A scene is a set of anisotropic 3D Gaussians bound to a motion scaffold: a
graph of nodes carrying one rigid transform per frame. Warping a Gaussian to
a frame blends its bound nodes' transforms; rendering a frame warps the whole
scene first. All types are immutable values; every operation returns a fresh
value and never mutates its inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import BindingError, FrameRangeError, SceneValidationError

SCENE_FORMAT_VERSION = 1

_QUAT_TOL = 1e-6
_WEIGHT_TOL = 1e-6


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z convention)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise SceneValidationError("zero-norm quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b: rotation b followed by rotation a."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic Gaussian: geometry, appearance, and a latent feature.

    ``label`` is ground-truth metadata used only by tests and the synthetic
    feature encoder; the editor selects Gaussians via features, never labels.
    ``node_bindings`` are (scaffold node id, weight) pairs; weights must be
    nonnegative and sum to one.
    """

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    feature: np.ndarray
    label: str | None = None
    node_bindings: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mean", _freeze(self.mean))
        object.__setattr__(self, "scale", _freeze(self.scale))
        object.__setattr__(self, "rotation", _freeze(self.rotation))
        object.__setattr__(self, "color", _freeze(self.color))
        object.__setattr__(self, "feature", _freeze(self.feature))
        object.__setattr__(
            self,
            "node_bindings",
            tuple((int(n), float(w)) for n, w in self.node_bindings),
        )
        if self.mean.shape != (3,):
            raise SceneValidationError(f"mean must be a 3-vector, got {self.mean.shape}")
        if self.scale.shape != (3,) or np.any(self.scale <= 0):
            raise SceneValidationError("scale components must be positive")
        if self.rotation.shape != (4,):
            raise SceneValidationError("rotation must be a quaternion (w,x,y,z)")
        if abs(np.linalg.norm(self.rotation) - 1.0) > _QUAT_TOL:
            raise SceneValidationError("rotation quaternion must be unit norm")
        if not 0.0 <= self.opacity <= 1.0:
            raise SceneValidationError(f"opacity must be in [0,1], got {self.opacity}")
        if self.color.shape != (3,):
            raise SceneValidationError("color must be an RGB 3-vector")
        if self.node_bindings:
            weights = np.array([w for _, w in self.node_bindings])
            if np.any(weights < 0):
                raise SceneValidationError("binding weights must be nonnegative")
            if abs(weights.sum() - 1.0) > _WEIGHT_TOL:
                raise SceneValidationError("binding weights must sum to 1")

    def covariance(self) -> np.ndarray:
        """3x3 covariance R diag(scale^2) R^T (positive semidefinite by construction)."""
        r = quat_to_matrix(self.rotation)
        return r @ np.diag(self.scale**2) @ r.T


@dataclass(frozen=True)
class MotionScaffold:
    """Graph of nodes, each carrying one rigid transform per frame.

    ``rotations`` has shape (nodes, frames, 4) and ``translations``
    (nodes, frames, 3). Edges are advisory topology; they are validated but
    not used by the linear-blend warp.
    """

    rotations: np.ndarray
    translations: np.ndarray
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rotations", _freeze(self.rotations))
        object.__setattr__(self, "translations", _freeze(self.translations))
        object.__setattr__(
            self, "edges", tuple((int(a), int(b)) for a, b in self.edges)
        )
        if self.rotations.ndim != 3 or self.rotations.shape[2] != 4:
            raise SceneValidationError("rotations must have shape (nodes, frames, 4)")
        if self.translations.shape != self.rotations.shape[:2] + (3,):
            raise SceneValidationError("translations must have shape (nodes, frames, 3)")
        if self.frame_count < 1:
            raise SceneValidationError("scaffold needs at least one frame")
        norms = np.linalg.norm(self.rotations, axis=2)
        if np.any(np.abs(norms - 1.0) > _QUAT_TOL):
            raise SceneValidationError("all scaffold quaternions must be unit norm")
        for a, b in self.edges:
            if not (0 <= a < self.node_count and 0 <= b < self.node_count):
                raise SceneValidationError(f"edge ({a},{b}) references a missing node")

    @property
    def node_count(self) -> int:
        return self.rotations.shape[0]

    @property
    def frame_count(self) -> int:
        return self.rotations.shape[1]

    @classmethod
    def identity(cls, node_count: int, frame_count: int) -> "MotionScaffold":
        rot = np.zeros((node_count, frame_count, 4))
        rot[..., 0] = 1.0
        return cls(rotations=rot, translations=np.zeros((node_count, frame_count, 3)))

    @classmethod
    def from_translations(cls, translations: np.ndarray,
                          edges: Iterable[tuple[int, int]] = ()) -> "MotionScaffold":
        translations = np.asarray(translations, dtype=np.float64)
        rot = np.zeros(translations.shape[:2] + (4,))
        rot[..., 0] = 1.0
        return cls(rotations=rot, translations=translations, edges=tuple(edges))

    def transform(self, node: int, frame: int) -> tuple[np.ndarray, np.ndarray]:
        return self.rotations[node, frame], self.translations[node, frame]


@dataclass(frozen=True)
class GaussianScene:
    gaussians: tuple[Gaussian3D, ...]
    scaffold: MotionScaffold
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    feature_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "gaussians", tuple(self.gaussians))
        object.__setattr__(self, "background_color", _freeze(self.background_color))
        if self.background_color.shape != (3,):
            raise SceneValidationError("background_color must be RGB")
        for i, g in enumerate(self.gaussians):
            if g.feature.shape != (self.feature_dim,):
                raise SceneValidationError(
                    f"gaussian {i} feature has length {g.feature.shape[0]}, "
                    f"expected {self.feature_dim}"
                )
            for node, _ in g.node_bindings:
                if not 0 <= node < self.scaffold.node_count:
                    raise SceneValidationError(
                        f"gaussian {i} is bound to missing scaffold node {node}"
                    )

    def __len__(self) -> int:
        return len(self.gaussians)

    @property
    def frame_count(self) -> int:
        return self.scaffold.frame_count

    def features(self) -> np.ndarray:
        """(N, D) matrix of per-Gaussian features."""
        if not self.gaussians:
            return np.zeros((0, self.feature_dim))
        return np.stack([g.feature for g in self.gaussians])

    def labels(self) -> list[str | None]:
        return [g.label for g in self.gaussians]

    def with_gaussians(self, gaussians: Sequence[Gaussian3D]) -> "GaussianScene":
        return replace(self, gaussians=tuple(gaussians))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera transform.

    Camera frame is x-right / y-down / z-forward; a point X_w projects through
    X_c = R @ X_w + t, pixel = (fx*x/z + cx, fy*y/z + cy).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _freeze(self.rotation))
        object.__setattr__(self, "translation", _freeze(self.translation))
        if self.fx <= 0 or self.fy <= 0:
            raise SceneValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise SceneValidationError("image must be at least 1x1")
        if self.rotation.shape != (3, 3):
            raise SceneValidationError("rotation must be 3x3")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-6:
            raise SceneValidationError("rotation must be orthonormal")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, width: int, height: int,
                focal: float, cx: float | None = None, cy: float | None = None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        z = target - eye
        zn = np.linalg.norm(z)
        if zn == 0:
            raise SceneValidationError("eye and target coincide")
        z = z / zn
        y = -up + np.dot(up, z) * z  # image y points opposite the up vector
        yn = np.linalg.norm(y)
        if yn < 1e-12:
            raise SceneValidationError("up vector is parallel to the view direction")
        y = y / yn
        x = np.cross(y, z)
        r = np.stack([x, y, z])
        return cls(
            fx=focal, fy=focal,
            cx=width / 2.0 if cx is None else cx,
            cy=height / 2.0 if cy is None else cy,
            width=width, height=height,
            rotation=r, translation=-r @ eye,
        )

    def image_axes_world(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space directions of increasing image x and image y."""
        return self.rotation[0].copy(), self.rotation[1].copy()


def orbit_camera(center, radius: float, azimuth_deg: float, elevation_deg: float,
                 *, width: int, height: int, focal: float) -> Camera:
    """Camera on a sphere around ``center``; azimuth 0 looks from -z toward +z."""
    center = np.asarray(center, dtype=np.float64)
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    offset = np.array(
        [np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)]
    )
    return Camera.look_at(center + radius * offset, center,
                          width=width, height=height, focal=focal)


# ---------------------------------------------------------------------------
# warp
# ---------------------------------------------------------------------------

def warp_gaussian(g: Gaussian3D, scaffold: MotionScaffold, frame: int) -> Gaussian3D:
    """Warp one Gaussian to ``frame``.

    The mean is the binding-weighted blend of each bound node's transform
    applied to the mean; the rotation is composed with the highest-weight
    node's frame rotation (ties resolved toward the lowest node id). Scale,
    opacity, color, and feature are unchanged.
    """
    if not 0 <= frame < scaffold.frame_count:
        raise FrameRangeError(
            f"frame {frame} outside [0, {scaffold.frame_count})"
        )
    if not g.node_bindings:
        raise BindingError("gaussian has no scaffold bindings")
    mean = np.zeros(3)
    for node, w in g.node_bindings:
        q, t = scaffold.transform(node, frame)
        mean += w * (quat_to_matrix(q) @ g.mean + t)
    best_node = max(g.node_bindings, key=lambda nw: (nw[1], -nw[0]))[0]
    node_q = scaffold.rotations[best_node, frame]
    rotation = quat_normalize(quat_multiply(node_q, g.rotation))
    return replace(g, mean=mean, rotation=rotation)


def warp_scene(scene: GaussianScene, frame: int) -> GaussianScene:
    """Warp every Gaussian to ``frame``; the input scene is untouched."""
    warped = tuple(warp_gaussian(g, scene.scaffold, frame) for g in scene.gaussians)
    return scene.with_gaussians(warped)


# ---------------------------------------------------------------------------
# serialization (versioned JSON; field order fixed for reproducible hashing)
# ---------------------------------------------------------------------------

def scene_to_dict(scene: GaussianScene) -> dict:
    nodes = []
    for n in range(scene.scaffold.node_count):
        nodes.append(
            [
                {
                    "q": list(scene.scaffold.rotations[n, f]),
                    "t": list(scene.scaffold.translations[n, f]),
                }
                for f in range(scene.scaffold.frame_count)
            ]
        )
    gaussians = []
    for g in scene.gaussians:
        item = {
            "mean": list(g.mean),
            "scale": list(g.scale),
            "rot": list(g.rotation),
            "opacity": g.opacity,
            "color": list(g.color),
            "feature": list(g.feature),
        }
        if g.label is not None:
            item["label"] = g.label
        item["bindings"] = [[n, w] for n, w in g.node_bindings]
        gaussians.append(item)
    return {
        "version": SCENE_FORMAT_VERSION,
        "feature_dim": scene.feature_dim,
        "background_color": list(scene.background_color),
        "scaffold": {
            "frame_count": scene.scaffold.frame_count,
            "nodes": nodes,
            "edges": [list(e) for e in scene.scaffold.edges],
        },
        "gaussians": gaussians,
    }


def scene_from_dict(data: dict) -> GaussianScene:
    if data.get("version") != SCENE_FORMAT_VERSION:
        raise SceneValidationError(f"unsupported scene version {data.get('version')}")
    sc = data["scaffold"]
    node_entries = sc["nodes"]
    if node_entries:
        rot = np.array([[f["q"] for f in node] for node in node_entries])
        trans = np.array([[f["t"] for f in node] for node in node_entries])
    else:
        rot = np.zeros((0, sc["frame_count"], 4))
        trans = np.zeros((0, sc["frame_count"], 3))
    scaffold = MotionScaffold(
        rotations=rot, translations=trans,
        edges=tuple(tuple(e) for e in sc.get("edges", [])),
    )
    if scaffold.node_count and scaffold.frame_count != sc["frame_count"]:
        raise SceneValidationError("scaffold frame_count mismatch")
    gaussians = [
        Gaussian3D(
            mean=g["mean"], scale=g["scale"], rotation=g["rot"],
            opacity=g["opacity"], color=g["color"], feature=g["feature"],
            label=g.get("label"),
            node_bindings=tuple((int(n), float(w)) for n, w in g["bindings"]),
        )
        for g in data["gaussians"]
    ]
    return GaussianScene(
        gaussians=tuple(gaussians),
        scaffold=scaffold,
        background_color=np.asarray(data["background_color"], dtype=np.float64),
        feature_dim=int(data["feature_dim"]),
    )


def scene_to_json(scene: GaussianScene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def scene_from_json(text: str) -> GaussianScene:
    return scene_from_dict(json.loads(text))


def scene_hash(scene: GaussianScene) -> str:
    return hashlib.sha256(scene_to_json(scene).encode("utf-8")).hexdigest()


def save_scene(scene: GaussianScene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scene_to_json(scene))


def load_scene(path) -> GaussianScene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_json(fh.read())
