"""Seeded synthetic multi-view driving scenes.

Sequences hold four keyframes (three history plus current, 0.5 s apart)
of constant-velocity objects plus per-step planar ego motion. Rendering
splats class-colored gaussian blobs at each object's projected pixel over
a smooth noise background; no occlusion model, blobs composite additively.

All randomness comes from an explicit splitmix64 + xoshiro256** generator
so regeneration from (seed, n_objects) is bit-stable across platforms.
Object lists are stored in the coordinate frame of the final (current)
keyframe; earlier frames are rendered from the ego poses recovered by
walking the per-step motion backwards.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraRig, CameraView, project_points

FRAME_COUNT = 4
FRAME_DT = 0.5
PRETRAIN_ID_BASE = 1_000_000

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """64-bit seed expander; also used to derive stream seeds."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """Reference xoshiro256** stream seeded through splitmix64."""

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        self.s = [sm.next() for _ in range(4)]

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (2.0**-53)
        return lo + (hi - lo) * u

    def randint(self, n: int) -> int:
        # rejection-free modulo is fine at these ranges
        return self.next_u64() % n

    def uniforms(self, count: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return np.array([self.uniform(lo, hi) for _ in range(count)], dtype=np.float64)


def derive_seed(*parts: int | str) -> int:
    """Stable 64-bit seed from a mixed tuple of ids and labels."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, int):
            h.update(b"i" + struct.pack("<Q", part & _MASK64))
        else:
            h.update(b"s" + str(part).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts: int | str) -> Xoshiro256StarStar:
    return Xoshiro256StarStar(derive_seed(*parts))


# ---------------------------------------------------------------------------
# Scene model
# ---------------------------------------------------------------------------

N_CLASSES = 3
WORLD_HALF_EXTENT = 8.0  # matches the default 16-cell, 1 m grid
_SPAWN_HALF_EXTENT = 6.0
_MAX_SPEED = 1.0

CLASS_COLORS = np.array(
    [[1.0, 0.05, 0.05], [0.05, 1.0, 0.05], [0.05, 0.05, 1.0]], dtype=np.float32
)


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: tuple[float, float, float]
    extents: tuple[float, float, float]  # (w, l, h)
    velocity: tuple[float, float]


@dataclass(frozen=True)
class SceneSequence:
    seed: int
    frames: tuple[tuple[SceneObject, ...], ...]  # FRAME_COUNT frames
    ego_motion: tuple[tuple[float, float, float], ...]  # 3 steps, (dx, dy, dyaw)

    @property
    def current_objects(self) -> tuple[SceneObject, ...]:
        return self.frames[-1]


def generate_sequence(seed: int, n_objects: int) -> SceneSequence:
    """Deterministic scene: objects in [1, 10], constant world velocities."""
    if not (1 <= n_objects <= 10):
        raise ValueError(f"n_objects must be in [1, 10], got {n_objects}")
    rng = rng_for("scene", seed)
    base: list[SceneObject] = []
    for _ in range(n_objects):
        cls = rng.randint(N_CLASSES)
        x = rng.uniform(-_SPAWN_HALF_EXTENT, _SPAWN_HALF_EXTENT)
        y = rng.uniform(-_SPAWN_HALF_EXTENT, _SPAWN_HALF_EXTENT)
        w = rng.uniform(0.8, 2.2)
        length = rng.uniform(0.8, 2.2)
        h = rng.uniform(0.8, 2.0)
        speed = rng.uniform(0.0, _MAX_SPEED)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        vx, vy = speed * np.cos(heading), speed * np.sin(heading)
        base.append(
            SceneObject(cls, (x, y, h / 2.0), (w, length, h), (float(vx), float(vy)))
        )
    frames = []
    for t in range(FRAME_COUNT):
        dt = t * FRAME_DT
        frames.append(
            tuple(
                SceneObject(
                    o.class_id,
                    (o.center[0] + o.velocity[0] * dt, o.center[1] + o.velocity[1] * dt, o.center[2]),
                    o.extents,
                    o.velocity,
                )
                for o in base
            )
        )
    motion = tuple(
        (rng.uniform(0.3, 0.9), rng.uniform(-0.15, 0.15), rng.uniform(-0.06, 0.06))
        for _ in range(FRAME_COUNT - 1)
    )
    return SceneSequence(seed, tuple(frames), motion)


def ego_poses(seq: SceneSequence) -> list[tuple[float, float, float]]:
    """World pose (px, py, yaw) of the ego at each frame; final frame is identity.

    Walking step t's motion forward takes frame t-1 coordinates to frame t;
    poses are recovered by composing the inverse steps backwards from the
    anchored current frame.
    """
    poses = [(0.0, 0.0, 0.0)] * FRAME_COUNT
    px, py, yaw = 0.0, 0.0, 0.0
    for t in range(FRAME_COUNT - 2, -1, -1):
        dx, dy, dyaw = seq.ego_motion[t]
        # previous pose: position steps back by R(yaw_prev) [dx, dy]
        yaw_prev = yaw - dyaw
        c, s = np.cos(yaw_prev), np.sin(yaw_prev)
        px, py = px - (c * dx - s * dy), py - (s * dx + c * dy)
        yaw = yaw_prev
        poses[t] = (float(px), float(py), float(yaw))
    return poses


def world_to_ego(points: np.ndarray, pose: tuple[float, float, float]) -> np.ndarray:
    """Express world points (n, 3) in the ego frame with the given pose."""
    px, py, yaw = pose
    c, s = np.cos(yaw), np.sin(yaw)
    shifted = points.copy()
    shifted[:, 0] -= px
    shifted[:, 1] -= py
    out = shifted.copy()
    out[:, 0] = c * shifted[:, 0] + s * shifted[:, 1]
    out[:, 1] = -s * shifted[:, 0] + c * shifted[:, 1]
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

IMAGE_SIZE = 32
_BG_GRID = 4
_BG_AMPLITUDE = 0.25


def _background(rng: Xoshiro256StarStar, size: int) -> np.ndarray:
    """Smooth noise: a low-res grid bilinearly upsampled to the image."""
    coarse = np.array(
        [[rng.uniform(0.0, _BG_AMPLITUDE) for _ in range(_BG_GRID * _BG_GRID)] for _ in range(3)],
        dtype=np.float32,
    ).reshape(3, _BG_GRID, _BG_GRID)
    t = np.linspace(0.0, _BG_GRID - 1.0, size)
    i0 = np.clip(np.floor(t).astype(np.int64), 0, _BG_GRID - 2)
    frac = (t - i0).astype(np.float32)
    rows = (
        coarse[:, i0, :] * (1 - frac)[None, :, None]
        + coarse[:, i0 + 1, :] * frac[None, :, None]
    )
    img = (
        rows[:, :, i0] * (1 - frac)[None, None, :]
        + rows[:, :, i0 + 1] * frac[None, None, :]
    )
    return np.ascontiguousarray(img.transpose(1, 2, 0))


def render_views(seq: SceneSequence, rig: CameraRig, frame: int) -> np.ndarray:
    """Render (n_views, h, w, 3) float32 rasters for one keyframe at the
    raster size the rig's intrinsics are expressed in."""
    if not (0 <= frame < FRAME_COUNT):
        raise ValueError(f"frame {frame} out of range")
    pose = ego_poses(seq)[frame]
    objs = seq.frames[frame]
    h, w = rig.image_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    out = np.zeros((rig.n_views, h, w, 3), dtype=np.float32)
    centers = np.array([o.center for o in objs], dtype=np.float64).reshape(-1, 3)
    ego_pts = world_to_ego(centers, pose) if len(objs) else centers
    blob_scale = w / float(IMAGE_SIZE)
    for v, view in enumerate(rig.views):
        img = _background(rng_for("bg", seq.seed, frame, v), w)
        if len(objs):
            uv, depth = project_points(view, ego_pts)
            for o, (u, vv), d in zip(objs, uv, depth):
                if d <= 0.05 or not (0 <= u <= w - 1 and 0 <= vv <= h - 1):
                    continue
                sigma = float(np.clip(8.0 / d, 1.0, 3.0)) * blob_scale
                blob = np.exp(-(((xs - u) ** 2 + (ys - vv) ** 2) / (2.0 * sigma**2)))
                img = img + blob[:, :, None] * CLASS_COLORS[o.class_id][None, None, :]
        out[v] = img
    return out


# ---------------------------------------------------------------------------
# Splits and export
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    pretrain: tuple[int, ...]
    finetune: tuple[int, ...]
    test: tuple[int, ...]

    def all_ids(self) -> tuple[int, ...]:
        return self.pretrain + self.finetune + self.test


def split_dataset(
    n: int, finetune_fraction: float, seed: int, n_pretrain: int = 16
) -> DatasetSplit:
    """Shuffle the n-sequence eval pool and split; pretrain ids live in a
    disjoint id range so the pools can never overlap."""
    if not (0.0 < finetune_fraction < 1.0):
        raise ValueError(f"finetune fraction must lie in (0, 1), got {finetune_fraction}")
    ids = list(range(n))
    rng = rng_for("split", seed)
    for i in range(n - 1, 0, -1):  # Fisher-Yates
        j = rng.randint(i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    k = int(round(finetune_fraction * n))
    pretrain = tuple(PRETRAIN_ID_BASE + i for i in range(n_pretrain))
    return DatasetSplit(pretrain, tuple(ids[:k]), tuple(ids[k:]))


def sequence_for_id(dataset_seed: int, seq_id: int, n_objects_range: tuple[int, int] = (2, 6)) -> SceneSequence:
    """Sequence belonging to a dataset: seed and object count derive from the id."""
    lo, hi = n_objects_range
    rng = rng_for("nobj", dataset_seed, seq_id)
    n_objects = lo + rng.randint(hi - lo + 1)
    return generate_sequence(derive_seed("dataset", dataset_seed, seq_id), n_objects)


def export_sequence(seq: SceneSequence, rig: CameraRig, directory: str | Path) -> None:
    """Write raw little-endian rasters plus ground truth for one sequence."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for t in range(FRAME_COUNT):
        frame_dir = root / f"frame-{t}"
        frame_dir.mkdir(exist_ok=True)
        views = render_views(seq, rig, t)
        for v in range(rig.n_views):
            (frame_dir / f"view-{v}.f32").write_bytes(
                views[v].astype("<f4").tobytes()
            )
    gt = {
        "seed": seq.seed,
        "ego_motion": [list(m) for m in seq.ego_motion],
        "frames": [
            [
                {
                    "class_id": o.class_id,
                    "center": list(o.center),
                    "extents": list(o.extents),
                    "velocity": list(o.velocity),
                }
                for o in frame
            ]
            for frame in seq.frames
        ],
    }
    (root / "gt.json").write_text(json.dumps(gt, indent=2))


def default_rig(n_views: int = 4, image_size: int = IMAGE_SIZE) -> CameraRig:
    """Outward-facing ring of cameras with 90-degree horizontal coverage."""
    views = []
    focal = (image_size - 1) / 2.0
    K = np.array([[focal, 0.0, focal], [0.0, focal, focal], [0.0, 0.0, 1.0]])
    for i in range(n_views):
        yaw = 2.0 * np.pi * i / n_views
        c, s = np.cos(yaw), np.sin(yaw)
        # camera axes in ego coords: x right, y down, z forward
        R = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        center = np.array([0.8 * c, 0.8 * s, 1.4])
        T = -R @ center
        views.append(CameraView(K, R, T))
    return CameraRig(tuple(views), (image_size, image_size))
