"""Trajectory planning: direction/speed -> keypoints -> per-frame boxes.

A GEN plan's direction becomes a straight keypoint path between entry and
exit margins (10% insets). Box centers are spaced by the nominal keypoint
displacement scaled by a velocity factor: a user hyperparameter ``lam``
times a speed-word multiplier, so fast prompts yield more widely spaced
boxes. Pixel boxes map onto the denoiser's patch grid by outward rounding,
so no covered pixel is ever dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TrajectoryError
from .parser import Direction, ExecutionPlan, Module, Speed

SPEED_MULTIPLIER = {Speed.SLOW: 0.5, Speed.NORMAL: 1.0, Speed.FAST: 1.5}

_MARGIN = 0.10


@dataclass(frozen=True)
class Trajectory:
    """Keypoints (x, y, t) with t strictly increasing; L >= 2."""

    keypoints: tuple[tuple[float, float, int], ...]
    frame_count: int
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(
            self, "keypoints",
            tuple((float(x), float(y), int(t)) for x, y, t in self.keypoints),
        )
        if len(self.keypoints) < 2:
            raise TrajectoryError("trajectory needs at least two keypoints")
        ts = [t for _, _, t in self.keypoints]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise TrajectoryError("keypoint times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.keypoints)


@dataclass(frozen=True)
class BBoxTrack:
    """One pixel-space box per frame: center (x, y) and half-extents (dx, dy)."""

    centers: tuple[tuple[float, float], ...]
    half_extents: tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        dx, dy = self.half_extents
        if dx <= 0 or dy <= 0:
            raise TrajectoryError("box half-extents must be positive")
        object.__setattr__(
            self, "centers",
            tuple((float(x), float(y)) for x, y in self.centers),
        )

    @property
    def frame_count(self) -> int:
        return len(self.centers)

    def bounds(self, frame: int) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) of the frame's box."""
        cx, cy = self.centers[frame]
        dx, dy = self.half_extents
        return cx - dx, cy - dy, cx + dx, cy + dy

    def to_dict(self) -> dict:
        return {
            "centers": [list(c) for c in self.centers],
            "half_extents": list(self.half_extents),
            "width": self.width,
            "height": self.height,
        }


@dataclass(frozen=True)
class GridBoxTrack:
    """Boxes in patch-cell coordinates, one per temporal patch cell.

    ``cells[i] = (x0, y0, x1, y1)`` are inclusive cell index ranges on the
    (grid_w, grid_h) attention grid; frames sharing a temporal patch have
    their boxes unioned.
    """

    cells: tuple[tuple[int, int, int, int], ...]
    grid_t: int
    grid_h: int
    grid_w: int
    padding: tuple[int, int, int] = (0, 0, 0)

    def cell_mask(self, i: int) -> np.ndarray:
        """Boolean (grid_h, grid_w) mask of cells covered at temporal cell i."""
        x0, y0, x1, y1 = self.cells[i]
        m = np.zeros((self.grid_h, self.grid_w), dtype=bool)
        m[y0:y1 + 1, x0:x1 + 1] = True
        return m


def plan_trajectory(plan: ExecutionPlan, width: int, height: int,
                    frame_count: int) -> Trajectory:
    """Linear keypoints from entry margin to exit margin, one per frame."""
    if plan.module is not Module.GEN:
        raise TrajectoryError("trajectories are planned for GEN plans only")
    if frame_count < 2:
        raise TrajectoryError(f"frame_count must be >= 2, got {frame_count}")
    d = plan.queries.direction
    x0, x1 = _MARGIN * width, (1.0 - _MARGIN) * width
    y0, y1 = _MARGIN * height, (1.0 - _MARGIN) * height
    cx, cy = width / 2.0, height / 2.0
    start_end = {
        Direction.LEFT_TO_RIGHT: ((x0, cy), (x1, cy)),
        Direction.RIGHT_TO_LEFT: ((x1, cy), (x0, cy)),
        Direction.UP: ((cx, y1), (cx, y0)),
        Direction.DOWN: ((cx, y0), (cx, y1)),
        Direction.TOWARD_CAMERA: ((cx, cy), (cx, cy)),
        Direction.AWAY: ((cx, cy), (cx, cy)),
    }
    (sx, sy), (ex, ey) = start_end[d]
    pts = []
    for f in range(frame_count):
        a = f / (frame_count - 1)
        pts.append((sx + a * (ex - sx), sy + a * (ey - sy), f))
    return Trajectory(keypoints=tuple(pts), frame_count=frame_count,
                      width=width, height=height)


def velocity(traj: Trajectory, i: int) -> float:
    """Displacement magnitude per unit time between keypoints i and i+1."""
    if not 0 <= i < len(traj) - 1:
        raise TrajectoryError(f"velocity index {i} outside [0, {len(traj) - 1})")
    x0, y0, t0 = traj.keypoints[i]
    x1, y1, t1 = traj.keypoints[i + 1]
    return math.hypot(x1 - x0, y1 - y0) / (t1 - t0)


def _per_frame_centers(traj: Trajectory) -> np.ndarray:
    """Resample keypoints to one center per frame (linear in t)."""
    xs = np.array([k[0] for k in traj.keypoints])
    ys = np.array([k[1] for k in traj.keypoints])
    ts = np.array([k[2] for k in traj.keypoints], dtype=float)
    frames = np.arange(traj.frame_count, dtype=float)
    return np.stack([np.interp(frames, ts, xs), np.interp(frames, ts, ys)], axis=1)


def allocate_boxes(traj: Trajectory, object_extent: tuple[float, float],
                   speed: Speed, lam: float = 1.0) -> BBoxTrack:
    """Boxes whose center steps are lam * sigma(speed) * nominal steps.

    With lam=1 and normal speed the centers equal the trajectory keypoints
    exactly. Centers are clamped so every box stays inside the image.
    """
    dx, dy = object_extent
    if lam <= 0:
        raise TrajectoryError(f"lambda must be positive, got {lam}")
    if dx <= 0 or dy <= 0:
        raise TrajectoryError("object extents must be positive")
    sigma = SPEED_MULTIPLIER[Speed(speed)]
    nominal = _per_frame_centers(traj)
    centers = np.empty_like(nominal)
    centers[0] = nominal[0]
    for f in range(1, len(nominal)):
        step = lam * sigma * (nominal[f] - nominal[f - 1])
        centers[f] = centers[f - 1] + step
    lo = np.array([min(dx, traj.width / 2.0), min(dy, traj.height / 2.0)])
    hi = np.array([max(traj.width - dx, traj.width / 2.0),
                   max(traj.height - dy, traj.height / 2.0)])
    clamped = np.clip(centers, lo, hi)
    return BBoxTrack(
        centers=tuple(map(tuple, clamped)),
        half_extents=(float(dx), float(dy)),
        width=traj.width, height=traj.height,
    )


def to_patch_grid(track: BBoxTrack, patch: tuple[int, int, int],
                  latent: tuple[int, int, int]) -> GridBoxTrack:
    """Map pixel boxes onto the (T/p_t, H/p_h, W/p_w) patch grid.

    Cell ranges are rounded outward (floor of box minima, containing cell of
    box maxima) so every pixel inside a pixel box lies inside its grid box.
    Frames sharing a temporal patch are unioned. Non-divisible shapes are
    padded up; the padding is recorded.
    """
    p_t, p_h, p_w = patch
    t_frames, lat_h, lat_w = latent
    if p_t <= 0 or p_h <= 0 or p_w <= 0:
        raise TrajectoryError("patch sizes must be positive")
    if track.frame_count != t_frames:
        raise TrajectoryError(
            f"track covers {track.frame_count} frames, latent has {t_frames}"
        )
    grid_t = -(-t_frames // p_t)
    grid_h = -(-lat_h // p_h)
    grid_w = -(-lat_w // p_w)
    padding = (grid_t * p_t - t_frames, grid_h * p_h - lat_h,
               grid_w * p_w - lat_w)

    cells: list[list[int]] = [[grid_w, grid_h, -1, -1] for _ in range(grid_t)]
    for f in range(track.frame_count):
        x0, y0, x1, y1 = track.bounds(f)
        gx0 = max(0, math.floor(x0 / p_w))
        gy0 = max(0, math.floor(y0 / p_h))
        gx1 = min(grid_w - 1, math.floor(x1 / p_w))
        gy1 = min(grid_h - 1, math.floor(y1 / p_h))
        if gx1 < gx0 or gy1 < gy0:
            continue
        ti = f // p_t
        c = cells[ti]
        c[0] = min(c[0], gx0)
        c[1] = min(c[1], gy0)
        c[2] = max(c[2], gx1)
        c[3] = max(c[3], gy1)
    for c in cells:
        if c[2] < c[0] or c[3] < c[1]:
            raise TrajectoryError("a temporal cell has no covered grid cells")
    return GridBoxTrack(
        cells=tuple((c[0], c[1], c[2], c[3]) for c in cells),
        grid_t=grid_t, grid_h=grid_h, grid_w=grid_w, padding=padding,
    )
