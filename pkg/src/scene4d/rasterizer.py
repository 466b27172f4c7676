"""Software Gaussian splatter.

Renders RGB, feature, alpha, and depth maps from a warped scene. Splats are
projected through a pinhole camera with a first-order covariance Jacobian,
evaluated exactly inside their 3-sigma screen-space rectangle (the rectangle
is part of the splat response definition, shared with the reference
compositor), depth-sorted with index tie-breaks, and alpha-composited front
to back. Features composite with exactly the weights used for color.

``rasterize_reference`` is the independent per-pixel oracle: it walks every
pixel over every surviving splat with exact transmittance and no early-out;
equivalence against it pins the fast path's semantics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import RenderError
from .scene import Camera, Gaussian3D, GaussianScene, warp_scene

NEAR_PLANE = 0.01
COV_EPS = 0.1  # px^2 regularizer added to projected covariance
EARLY_STOP = 1e-4  # transmittance below which a pixel stops compositing


@dataclass(frozen=True)
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


@dataclass
class RenderOutput:
    rgb: np.ndarray       # (H, W, 3) in [0, 1]
    feature_map: np.ndarray  # (H, W, D)
    alpha: np.ndarray     # (H, W)
    depth: np.ndarray     # (H, W), alpha-normalized where alpha > 1e-6


def project(g: Gaussian3D, cam: Camera,
            near: float = NEAR_PLANE) -> ProjectedSplat | None:
    """Pinhole projection of one Gaussian; None when culled behind the camera."""
    mean_c = cam.rotation @ g.mean + cam.translation
    z = mean_c[2]
    if z <= near:
        return None
    x, y = mean_c[0], mean_c[1]
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    cov_world = g.covariance()
    cov_cam = cam.rotation @ cov_world @ cam.rotation.T
    j = np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )
    cov2d = j @ cov_cam @ j.T + COV_EPS * np.eye(2)
    return ProjectedSplat(mean2d=mean2d, cov2d=cov2d, depth=float(z))


def _splat_arrays(gaussians, cam, features):
    """Project, cull, and depth-sort (ties by input index)."""
    kept = []
    for idx, g in enumerate(gaussians):
        p = project(g, cam)
        if p is not None:
            kept.append((idx, g, p))
    if not kept:
        return None
    order = np.lexsort((
        np.array([idx for idx, _, _ in kept]),
        np.array([p.depth for _, _, p in kept]),
    ))
    kept = [kept[i] for i in order]
    means = np.stack([p.mean2d for _, _, p in kept])
    covs = np.stack([p.cov2d for _, _, p in kept])
    depths = np.array([p.depth for _, _, p in kept])
    opac = np.array([g.opacity for _, g, _ in kept])
    colors = np.stack([g.color for _, g, _ in kept])
    feats = np.stack([features[idx] for idx, _, _ in kept])
    indices = np.array([idx for idx, _, _ in kept])
    # analytic 2x2 inverses
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(covs)
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    radii = 3.0 * np.sqrt(np.stack([a, c], axis=1))
    return means, inv, depths, opac, colors, feats, indices, radii


def _rect(mean, radius, width, height):
    """Inclusive pixel-index bounds of the 3-sigma rectangle (sample at +0.5)."""
    x0 = max(0, int(np.floor(mean[0] - radius[0] - 0.5)))
    x1 = min(width - 1, int(np.ceil(mean[0] + radius[0] - 0.5)))
    y0 = max(0, int(np.floor(mean[1] - radius[1] - 0.5)))
    y1 = min(height - 1, int(np.ceil(mean[1] + radius[1] - 0.5)))
    return x0, x1, y0, y1


def rasterize(scene: GaussianScene, frame: int, cam: Camera, *,
              features: np.ndarray | None = None,
              early_stop: float = EARLY_STOP) -> RenderOutput:
    out, _ = _rasterize_impl(scene, frame, cam, features=features,
                             early_stop=early_stop, collect_weights=False)
    return out


def rasterize_with_weights(scene: GaussianScene, frame: int, cam: Camera, *,
                           features: np.ndarray | None = None,
                           early_stop: float = EARLY_STOP
                           ) -> tuple[RenderOutput, np.ndarray]:
    """Render and also return the (H*W, N) compositing weight matrix.

    Row p holds w_j for every input Gaussian j at pixel p (row-major pixels);
    the same weights the color pass used.
    """
    out, weights = _rasterize_impl(scene, frame, cam, features=features,
                                   early_stop=early_stop, collect_weights=True)
    return out, weights


def _rasterize_impl(scene, frame, cam, *, features, early_stop, collect_weights):
    warped = warp_scene(scene, frame)
    h, w = cam.height, cam.width
    if features is None:
        features = warped.features()
    else:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != len(warped.gaussians):
            raise RenderError("feature override must cover every gaussian")
    d = features.shape[1] if features.ndim == 2 else scene.feature_dim

    rgb = np.zeros((h, w, 3))
    feat = np.zeros((h, w, d))
    alpha = np.zeros((h, w))
    depth_acc = np.zeros((h, w))
    transmittance = np.ones((h, w))
    weights = np.zeros((h * w, len(warped.gaussians))) if collect_weights else None

    arrays = _splat_arrays(warped.gaussians, cam, features)
    if arrays is not None:
        means, inv, depths, opac, colors, feats, indices, radii = arrays
        xs = np.arange(w) + 0.5
        ys = np.arange(h) + 0.5
        for j in range(len(depths)):
            x0, x1, y0, y1 = _rect(means[j], radii[j], w, h)
            if x1 < x0 or y1 < y0:
                continue
            dx = xs[x0:x1 + 1] - means[j, 0]
            dy = ys[y0:y1 + 1] - means[j, 1]
            q = (inv[j, 0, 0] * dx[None, :] ** 2
                 + 2.0 * inv[j, 0, 1] * dy[:, None] * dx[None, :]
                 + inv[j, 1, 1] * dy[:, None] ** 2)
            a = opac[j] * np.exp(-0.5 * q)
            t_rect = transmittance[y0:y1 + 1, x0:x1 + 1]
            active = t_rect >= early_stop
            wgt = np.where(active, a * t_rect, 0.0)
            rgb[y0:y1 + 1, x0:x1 + 1] += wgt[:, :, None] * colors[j]
            feat[y0:y1 + 1, x0:x1 + 1] += wgt[:, :, None] * feats[j]
            alpha[y0:y1 + 1, x0:x1 + 1] += wgt
            depth_acc[y0:y1 + 1, x0:x1 + 1] += wgt * depths[j]
            if collect_weights:
                w3 = weights.reshape(h, w, -1)
                w3[y0:y1 + 1, x0:x1 + 1, indices[j]] = wgt
            transmittance[y0:y1 + 1, x0:x1 + 1] = np.where(
                active, t_rect * (1.0 - a), t_rect
            )

    rgb += transmittance[:, :, None] * scene.background_color
    depth = np.where(alpha > 1e-6, depth_acc / np.maximum(alpha, 1e-300), 0.0)
    return RenderOutput(rgb=rgb, feature_map=feat, alpha=alpha, depth=depth), weights


def rasterize_reference(scene: GaussianScene, frame: int, cam: Camera, *,
                        features: np.ndarray | None = None) -> RenderOutput:
    """Brute-force per-pixel compositor: every pixel visits every surviving
    splat front to back with exact transmittance and no early-out."""
    warped = warp_scene(scene, frame)
    h, w = cam.height, cam.width
    if features is None:
        features = warped.features()
    else:
        features = np.asarray(features, dtype=np.float64)
    d = features.shape[1] if features.ndim == 2 else scene.feature_dim

    rgb = np.empty((h, w, 3))
    feat = np.zeros((h, w, d))
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    arrays = _splat_arrays(warped.gaussians, cam, features)
    if arrays is None:
        rgb[:] = scene.background_color
        return RenderOutput(rgb=rgb, feature_map=feat, alpha=alpha, depth=depth)

    means, inv, depths, opac, colors, feats, _, radii = arrays
    rect_x0 = np.floor(means[:, 0] - radii[:, 0] - 0.5)
    rect_x1 = np.ceil(means[:, 0] + radii[:, 0] - 0.5)
    rect_y0 = np.floor(means[:, 1] - radii[:, 1] - 0.5)
    rect_y1 = np.ceil(means[:, 1] + radii[:, 1] - 0.5)

    for py in range(h):
        sy = py + 0.5
        for px in range(w):
            sx = px + 0.5
            in_rect = ((rect_x0 <= px) & (px <= rect_x1)
                       & (rect_y0 <= py) & (py <= rect_y1))
            dx = sx - means[:, 0]
            dy = sy - means[:, 1]
            q = (inv[:, 0, 0] * dx * dx + 2.0 * inv[:, 0, 1] * dx * dy
                 + inv[:, 1, 1] * dy * dy)
            a = np.where(in_rect, opac * np.exp(-0.5 * q), 0.0)
            t_before = np.concatenate(([1.0], np.cumprod(1.0 - a)[:-1]))
            wgt = a * t_before
            rgb[py, px] = wgt @ colors + np.prod(1.0 - a) * scene.background_color
            feat[py, px] = wgt @ feats
            alpha[py, px] = wgt.sum()
            if alpha[py, px] > 1e-6:
                depth[py, px] = (wgt @ depths) / alpha[py, px]
    return RenderOutput(rgb=rgb, feature_map=feat, alpha=alpha, depth=depth)


def render_sequence(scene: GaussianScene, cams: list[Camera]) -> list[RenderOutput]:
    """Per-frame rasterize with one camera per frame."""
    if len(cams) != scene.frame_count:
        raise RenderError(
            f"{len(cams)} cameras for {scene.frame_count} frames"
        )
    return [rasterize(scene, f, cams[f]) for f in range(scene.frame_count)]


def repeat_camera(cam: Camera, frames: int) -> list[Camera]:
    return [cam] * frames


# ---------------------------------------------------------------------------
# image IO
# ---------------------------------------------------------------------------

def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def save_png(rgb: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(rgb)).save(path, format="PNG")


def save_pfm(rgb: np.ndarray, path) -> None:
    """32-bit float PFM, little-endian, bottom-to-top rows per the format."""
    data = np.asarray(rgb, dtype=np.float32)
    if data.ndim == 2:
        header, channels = b"Pf", 1
        data = data[:, :, None]
    elif data.ndim == 3 and data.shape[2] == 3:
        header, channels = b"PF", 3
    else:
        raise RenderError(f"PFM supports HxW or HxWx3, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise RenderError("not a PFM file")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        count = w * h * (3 if header == b"PF" else 1)
        raw = np.frombuffer(fh.read(count * 4),
                            dtype="<f4" if scale < 0 else ">f4")
    img = raw.reshape(h, w, -1)
    img = np.flipud(img)
    return img[:, :, 0] if header == b"Pf" else img


_FMAP_MAGIC = b"FMAP"


def save_feature_map(fmap: np.ndarray, path) -> None:
    """Raw float map: magic, version, H, W, D (u32 LE), then f32 row-major."""
    data = np.asarray(fmap, dtype="<f4")
    if data.ndim != 3:
        raise RenderError("feature map must be HxWxD")
    h, w, d = data.shape
    with open(path, "wb") as fh:
        fh.write(_FMAP_MAGIC)
        fh.write(struct.pack("<IIII", 1, h, w, d))
        fh.write(data.tobytes())


def load_feature_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _FMAP_MAGIC:
            raise RenderError("not a feature map file")
        version, h, w, d = struct.unpack("<IIII", fh.read(16))
        if version != 1:
            raise RenderError(f"unsupported feature map version {version}")
        return np.frombuffer(fh.read(h * w * d * 4), dtype="<f4").reshape(h, w, d).astype(np.float64)
