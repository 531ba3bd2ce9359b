"""SemanticKITTI I/O and spherical range-image projection."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
EMPTY = -1  # point_index sentinel for pixels without a point


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """N x 4 array of (x, y, z, intensity)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise GeometryError(f"points must be N x 4, got shape {pts.shape}")
        bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
        if bad.size:
            raise GeometryError(f"non-finite value in point {int(bad[0])}")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass(frozen=True)
class ProjectionConfig:
    width: int = 2048
    height: int = 64
    fov_up: float = math.radians(3.0)  # magnitude, radians
    fov_down: float = math.radians(25.0)  # magnitude, radians

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError("width and height must be >= 1")
        if self.fov_up < 0 or self.fov_down <= 0:
            raise GeometryError("need fov_up >= 0 and fov_down > 0")

    @property
    def fov(self) -> float:
        return abs(self.fov_up) + abs(self.fov_down)

    @classmethod
    def from_degrees(cls, width: int, height: int, fov_up_deg: float, fov_down_deg: float) -> "ProjectionConfig":
        return cls(int(width), int(height), math.radians(abs(fov_up_deg)), math.radians(abs(fov_down_deg)))


@dataclass(frozen=True)
class RangeImage:
    channels: np.ndarray  # h x w x 5: x, y, z, intensity, range
    valid: np.ndarray  # h x w bool
    point_index: np.ndarray  # h x w int64, EMPTY where invalid
    cfg: ProjectionConfig = field(default_factory=ProjectionConfig)

    @property
    def M(self) -> int:
        return int(self.valid.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def pixel_labels(self, point_labels: np.ndarray) -> np.ndarray:
        """Per-valid-pixel labels in row-major order, taken from the stored point."""
        return np.asarray(point_labels)[self.point_index[self.valid]]

    def label_grid(self, point_labels: np.ndarray, fill: int = -1) -> np.ndarray:
        grid = np.full(self.valid.shape, fill, dtype=np.int64)
        grid[self.valid] = self.pixel_labels(point_labels)
        return grid


def read_scan(path: str | os.PathLike) -> PointCloud:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 16:
        raise GeometryError(f"{path}: truncated record, {raw.size} bytes is not a multiple of 16")
    pts = raw.view(SCAN_DTYPE).reshape(-1, 4)
    bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
    if bad.size:
        raise GeometryError(f"{path}: non-finite value in point {int(bad[0])} (byte offset {16 * int(bad[0])})")
    return PointCloud(pts.astype(np.float64))


def write_scan(path: str | os.PathLike, cloud: PointCloud) -> None:
    np.ascontiguousarray(cloud.points, dtype=SCAN_DTYPE).tofile(os.fspath(path))


def read_labels(
    path: str | os.PathLike, count: int, known_ids: Optional[Iterable[int]] = None
) -> np.ndarray:
    """Semantic ids (low 16 bits) of a .label file; instance ids are dropped."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != 4 * count:
        raise GeometryError(f"{path}: {raw.size} bytes, expected {4 * count} for {count} points")
    words = raw.view(LABEL_DTYPE)
    sem = (words & 0xFFFF).astype(np.int64)
    if known_ids is not None:
        unknown = np.setdiff1d(np.unique(sem), np.fromiter(known_ids, dtype=np.int64))
        if unknown.size:
            raise GeometryError(f"{path}: unknown semantic id(s) {unknown.tolist()}")
    return sem


def write_labels(path: str | os.PathLike, semantic: np.ndarray, instance: Optional[np.ndarray] = None) -> None:
    sem = np.asarray(semantic, dtype=np.int64)
    if sem.size and (sem.min() < 0 or sem.max() > 0xFFFF):
        raise GeometryError("semantic ids must fit in 16 bits")
    words = sem.astype(np.uint32)
    if instance is not None:
        words |= (np.asarray(instance, dtype=np.uint32) & 0xFFFF) << 16
    words.astype(LABEL_DTYPE).tofile(os.fspath(path))


def pixel_coords(cloud: PointCloud, cfg: ProjectionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Integer (row, col) of every point: floor then clamp of the spherical mapping."""
    if len(cloud) == 0:
        raise GeometryError("cannot project an empty cloud")
    x, y, z = cloud.xyz.T
    r = np.sqrt(x * x + y * y + z * z)
    zero = np.flatnonzero(r == 0)
    if zero.size:
        raise GeometryError(f"point {int(zero[0])} has zero range")
    u = 0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.width
    v = (1.0 - (np.arcsin(np.clip(z / r, -1.0, 1.0)) + cfg.fov_down) / cfg.fov) * cfg.height
    col = np.clip(np.floor(u), 0, cfg.width - 1).astype(np.int64)
    row = np.clip(np.floor(v), 0, cfg.height - 1).astype(np.int64)
    return row, col


def project(cloud: PointCloud, cfg: ProjectionConfig = ProjectionConfig()) -> RangeImage:
    row, col = pixel_coords(cloud, cfg)
    xyz = cloud.xyz
    r = np.sqrt((xyz * xyz).sum(axis=1))
    n = len(cloud)
    flat = row * cfg.width + col
    # nearest range wins, ties to the smallest point index
    order = np.lexsort((np.arange(n), r, flat))
    first = np.ones(n, dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    winners = order[first]

    h, w = cfg.height, cfg.width
    channels = np.zeros((h * w, 5), dtype=np.float64)
    point_index = np.full(h * w, EMPTY, dtype=np.int64)
    channels[flat[winners], :3] = xyz[winners]
    channels[flat[winners], 3] = cloud.intensity[winners]
    channels[flat[winners], 4] = r[winners]
    point_index[flat[winners]] = winners
    valid = point_index != EMPTY
    for a in (channels, point_index, valid):
        a.setflags(write=False)
    return RangeImage(channels.reshape(h, w, 5), valid.reshape(h, w), point_index.reshape(h, w), cfg)


def backproject(per_pixel_labels: np.ndarray, image: RangeImage, cloud: PointCloud) -> np.ndarray:
    """Label every point with the label of the pixel it falls in, collision losers included."""
    grid = np.asarray(per_pixel_labels)
    if grid.shape != image.shape:
        raise GeometryError(f"label grid shape {grid.shape} does not match image {image.shape}")
    row, col = pixel_coords(cloud, image.cfg)
    return grid[row, col]
