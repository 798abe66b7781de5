"""Coordinate math for the BEV pipeline.

Covers the grid-to-world mapping, pinhole projection of lifted reference
points into multi-camera views with hit masks, kernel-unfold index tables
for the LUT-based view transform, and planar ego-motion alignment of
historical BEV grids.

Conventions: the ego/world frame is x forward, y left, z up; cell (x, y)
refers to the cell corner, so the grid center cell maps to the origin.
Camera matrices follow the usual computer-vision layout (pixel = K(Rp + T),
camera z looking forward). Pixel coordinates are in feature-map units, and
a pixel is in bounds when it lies inside the closed rectangle
[0, w-1] x [0, h-1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NEAR_PLANE = 0.05

# Pixel magnitudes beyond this are meaningless (near-degenerate depth) and
# are squashed before rounding so the int cast cannot overflow.
_PIXEL_LIMIT = 1e6


class GeometryError(Exception):
    pass


@dataclass(frozen=True)
class BevGrid:
    height: int
    width: int
    cell_size: float
    anchor_heights: tuple[float, ...] = (0.0, 1.0)

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise GeometryError(f"grid must be at least 2x2, got {self.height}x{self.width}")
        if self.cell_size <= 0:
            raise GeometryError(f"cell size must be positive, got {self.cell_size}")
        if len(self.anchor_heights) < 1:
            raise GeometryError("at least one anchor height required")

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    @property
    def n_anchors(self) -> int:
        return len(self.anchor_heights)

    def cell_to_world(self, x: float, y: float) -> tuple[float, float]:
        """World-plane location of cell (x, y): ((x - W/2)s, (y - H/2)s)."""
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise GeometryError(f"cell ({x}, {y}) outside {self.width}x{self.height} grid")
        return ((x - self.width / 2.0) * self.cell_size, (y - self.height / 2.0) * self.cell_size)

    def world_to_cell(self, wx: float, wy: float) -> tuple[float, float]:
        return (wx / self.cell_size + self.width / 2.0, wy / self.cell_size + self.height / 2.0)

    def cell_centers_world(self) -> np.ndarray:
        """(H*W, 2) world coordinates of all cells, row-major (y major)."""
        xs = np.arange(self.width, dtype=np.float64)
        ys = np.arange(self.height, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)  # gx[y, x] = x
        wx = (gx - self.width / 2.0) * self.cell_size
        wy = (gy - self.height / 2.0) * self.cell_size
        return np.stack([wx.reshape(-1), wy.reshape(-1)], axis=1)


@dataclass(frozen=True)
class CameraView:
    intrinsics: np.ndarray  # 3x3, upper triangular, positive focal lengths
    rotation: np.ndarray  # 3x3 world->camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-5:
            raise GeometryError("rotation is not orthonormal within 1e-5")
        if np.abs(K[np.tril_indices(3, -1)]).max() > 1e-9:
            raise GeometryError("intrinsics must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")


@dataclass(frozen=True)
class CameraRig:
    views: tuple[CameraView, ...]
    image_size: tuple[int, int]  # (h, w) the intrinsics are expressed in

    @property
    def n_views(self) -> int:
        return len(self.views)

    def scaled_to(self, feat_size: tuple[int, int]) -> "CameraRig":
        """Rescale intrinsics from image units to feature-map units."""
        fh, fw = feat_size
        ih, iw = self.image_size
        if (fh, fw) == (ih, iw):
            return self
        sy, sx = fh / ih, fw / iw
        scale = np.diag([sx, sy, 1.0])
        views = tuple(
            CameraView(scale @ v.intrinsics, v.rotation, v.translation) for v in self.views
        )
        return CameraRig(views, (fh, fw))

    def to_json(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "views": [
                {
                    "K": v.intrinsics.reshape(-1).tolist(),
                    "R": v.rotation.reshape(-1).tolist(),
                    "T": v.translation.tolist(),
                }
                for v in self.views
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CameraRig":
        views = tuple(
            CameraView(
                np.asarray(v["K"], dtype=np.float64).reshape(3, 3),
                np.asarray(v["R"], dtype=np.float64).reshape(3, 3),
                np.asarray(v["T"], dtype=np.float64),
            )
            for v in doc["views"]
        )
        return cls(views, tuple(doc["image_size"]))

    @classmethod
    def load(cls, path: str | Path) -> "CameraRig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def project_points(view: CameraView, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project (n, 3) world points; returns pixel (n, 2) and depth (n,).

    Depth is clamped away from zero before the perspective divide so pixel
    coordinates stay finite; callers gate on the returned depth.
    """
    cam = points @ view.rotation.T + view.translation
    depth = cam[:, 2]
    safe = np.where(np.abs(depth) < 1e-9, np.where(depth < 0, -1e-9, 1e-9), depth)
    homo = cam @ view.intrinsics.T
    uv = homo[:, :2] / safe[:, None]
    uv = np.clip(uv, -_PIXEL_LIMIT, _PIXEL_LIMIT)
    return uv, depth


@dataclass(frozen=True)
class ProjectionResult:
    """Projection of every (cell, anchor) reference point into every view.

    Arrays are indexed [cell, view, anchor]; ``hit_views`` collapses anchors
    (a view is hit for a cell when any anchor lands inside it).
    """

    uv: np.ndarray  # (n_cells, n_views, n_anchors, 2) float32
    depth: np.ndarray  # (n_cells, n_views, n_anchors) float32
    hit: np.ndarray  # same shape, bool
    hit_views: np.ndarray  # (n_cells, n_views) bool
    feat_size: tuple[int, int]

    @property
    def n_hit_views(self) -> np.ndarray:
        return self.hit_views.sum(axis=1)


def project_reference_points(
    grid: BevGrid, rig: CameraRig, feat_size: tuple[int, int] | None = None
) -> ProjectionResult:
    """Lift each BEV cell to its anchor heights and project into all views."""
    if feat_size is None:
        feat_size = rig.image_size
    scaled = rig.scaled_to(feat_size)
    fh, fw = feat_size
    centers = grid.cell_centers_world()  # (n, 2)
    n = centers.shape[0]
    n_views, n_anchor = scaled.n_views, grid.n_anchors
    uv = np.zeros((n, n_views, n_anchor, 2), dtype=np.float32)
    depth = np.zeros((n, n_views, n_anchor), dtype=np.float32)
    hit = np.zeros((n, n_views, n_anchor), dtype=bool)
    for j, z in enumerate(grid.anchor_heights):
        pts = np.concatenate([centers, np.full((n, 1), z)], axis=1)
        for i, view in enumerate(scaled.views):
            px, d = project_points(view, pts)
            uv[:, i, j] = px.astype(np.float32)
            depth[:, i, j] = d.astype(np.float32)
            inside = (
                (px[:, 0] >= 0.0)
                & (px[:, 0] <= fw - 1.0)
                & (px[:, 1] >= 0.0)
                & (px[:, 1] <= fh - 1.0)
            )
            hit[:, i, j] = inside & (d > NEAR_PLANE)
    return ProjectionResult(uv, depth, hit, hit.any(axis=2), feat_size)


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def unfold_kernel_indices(
    proj: ProjectionResult, kh: int, kw: int, anchor: int = 0
) -> np.ndarray:
    """Flat feature-map indices of the kh x kw kernel around each projection.

    The projected point of the given anchor is rounded half-up to pixel
    coordinates; the kernel rows/columns are clamped into the feature map so
    every index is valid. Returns int32 (n_cells, n_views, kh*kw) indices
    into a row-major (h*w) feature map. The table depends only on grid and
    rig, so callers compute it once and reuse it.
    """
    if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
        raise GeometryError(f"kernel dims must be odd and >= 1, got {kh}x{kw}")
    fh, fw = proj.feat_size
    uv = proj.uv[:, :, anchor, :].astype(np.float64)
    cx = np.clip(_round_half_up(uv[..., 0]), 0, fw - 1).astype(np.int64)
    cy = np.clip(_round_half_up(uv[..., 1]), 0, fh - 1).astype(np.int64)
    dy = np.arange(kh) - kh // 2
    dx = np.arange(kw) - kw // 2
    ys = np.clip(cy[..., None] + dy[None, None, :], 0, fh - 1)  # (n, v, kh)
    xs = np.clip(cx[..., None] + dx[None, None, :], 0, fw - 1)  # (n, v, kw)
    flat = ys[..., :, None] * fw + xs[..., None, :]  # (n, v, kh, kw)
    return flat.reshape(flat.shape[0], flat.shape[1], kh * kw).astype(np.int32)


@dataclass(frozen=True)
class GridAlignment:
    """Inverse warp of the current grid into the previous frame's grid."""

    source_xy: np.ndarray  # (n_cells, 2) float32 continuous source cell coords
    valid: np.ndarray  # (n_cells,) bool
    corner_indices: np.ndarray  # (n_cells, 4) int32 flat indices, clamped
    corner_weights: np.ndarray  # (n_cells, 4) float32 bilinear weights


def align_history_grid(grid: BevGrid, ego_motion: tuple[float, float, float]) -> GridAlignment:
    """Map each current cell to its location in the previous frame's grid.

    ``ego_motion`` is (dx, dy, dyaw): the translation of the ego between the
    previous and current frame expressed in the previous frame, and the yaw
    increment. A world-fixed point with current-frame coordinates q has
    previous-frame coordinates R(dyaw) q + (dx, dy).
    """
    dx, dy, dyaw = ego_motion
    c, s = np.cos(dyaw), np.sin(dyaw)
    rot = np.array([[c, -s], [s, c]], dtype=np.float64)
    cur = grid.cell_centers_world()
    prev = cur @ rot.T + np.array([dx, dy])
    sx = prev[:, 0] / grid.cell_size + grid.width / 2.0
    sy = prev[:, 1] / grid.cell_size + grid.height / 2.0
    valid = (sx >= 0) & (sx <= grid.width - 1) & (sy >= 0) & (sy <= grid.height - 1)
    x0 = np.clip(np.floor(sx), 0, grid.width - 1).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, grid.height - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, grid.width - 1)
    y1 = np.minimum(y0 + 1, grid.height - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)
    fy = np.clip(sy - y0, 0.0, 1.0)
    idx = np.stack(
        [y0 * grid.width + x0, y0 * grid.width + x1, y1 * grid.width + x0, y1 * grid.width + x1],
        axis=1,
    ).astype(np.int32)
    w = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    ).astype(np.float32)
    return GridAlignment(
        np.stack([sx, sy], axis=1).astype(np.float32), valid, idx, w
    )


def invert_ego_motion(ego_motion: tuple[float, float, float]) -> tuple[float, float, float]:
    """The motion that undoes the given one (compose to identity)."""
    dx, dy, dyaw = ego_motion
    c, s = np.cos(dyaw), np.sin(dyaw)
    # inverse of q -> R q + t is q -> R^T (q - t)
    ix = -(c * dx + s * dy)
    iy = -(-s * dx + c * dy)
    return (float(ix), float(iy), float(-dyaw))
