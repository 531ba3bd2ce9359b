"""Deterministic ray-cast LiDAR scenes built from planes, boxes and vertical cylinders.

Class ids inside a scene are dataset (raw) semantic ids, so generated
frames go through exactly the same label mapping as real SemanticKITTI
files.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .geometry import PointCloud, write_labels, write_scan


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    cls: int
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass(frozen=True)
class Cylinder:
    cls: int
    center: tuple[float, float]
    radius: float
    z0: float
    z1: float


Primitive = Union[Box, Cylinder]


@dataclass(frozen=True)
class SensorModel:
    beams: int = 16
    azimuth_bins: int = 256
    fov_up_deg: float = 3.0
    fov_down_deg: float = 15.0  # magnitude
    max_range: float = 60.0
    noise_sigma: float = 0.0  # metres, applied along the ray

    def directions(self) -> np.ndarray:
        """Unit ray directions, beam-major; ray (i, j) lands on range-image pixel (i, j)."""
        fov = math.radians(self.fov_up_deg + self.fov_down_deg)
        elev = math.radians(self.fov_up_deg) - (np.arange(self.beams) + 0.5) * fov / self.beams
        az = np.pi * (1.0 - 2.0 * (np.arange(self.azimuth_bins) + 0.5) / self.azimuth_bins)
        el, a = np.meshgrid(elev, az, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    extent: float = 40.0  # half-width of the square ground patch
    ground_z: float = -1.73
    ground_class: int = 40
    primitives: tuple = ()
    sensor: SensorModel = field(default_factory=SensorModel)
    intensity: Mapping[int, float] = field(default_factory=dict)  # class -> mean remission
    intensity_noise: float = 0.05

    def validate(self, known_classes: Optional[Sequence[int]] = None) -> None:
        if self.sensor.noise_sigma < 0 or self.intensity_noise < 0:
            raise SceneError("noise must be non-negative")
        if self.ground_z >= 0:
            raise SceneError("ground plane must lie below the sensor")
        classes = {self.ground_class} | {p.cls for p in self.primitives}
        if known_classes is not None:
            unknown = classes - set(known_classes)
            if unknown:
                raise SceneError(f"scene uses class ids outside the taxonomy: {sorted(unknown)}")
        for p in self.primitives:
            if isinstance(p, Box):
                lo, hi = np.array(p.lo), np.array(p.hi)
                if (hi <= lo).any():
                    raise SceneError(f"degenerate box {p}")
                if (np.abs(np.concatenate([lo[:2], hi[:2]])) > self.extent).any():
                    raise SceneError(f"box outside scene extent: {p}")
                if (lo <= 0).all() and (hi >= 0).all():
                    raise SceneError("sensor origin lies inside a box")
            else:
                if p.radius <= 0 or p.z1 <= p.z0:
                    raise SceneError(f"degenerate cylinder {p}")
                if max(abs(p.center[0]), abs(p.center[1])) + p.radius > self.extent:
                    raise SceneError(f"cylinder outside scene extent: {p}")
                if math.hypot(*p.center) <= p.radius and p.z0 <= 0 <= p.z1:
                    raise SceneError("sensor origin lies inside a cylinder")


def _hit_box(d: np.ndarray, box: Box) -> np.ndarray:
    lo, hi = np.array(box.lo), np.array(box.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / d
        t2 = hi / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # rays parallel to a slab: inside iff the origin lies between the planes
    par = d == 0
    inside = (lo < 0) & (hi > 0)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def _hit_cylinder(d: np.ndarray, cyl: Cylinder) -> np.ndarray:
    cx, cy = cyl.center
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = -2.0 * (d[:, 0] * cx + d[:, 1] * cy)
    c = cx * cx + cy * cy - cyl.radius ** 2
    disc = b * b - 4 * a * c
    ok = (a > 0) & (disc >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a)
    z = t * d[:, 2]
    side = np.where(ok & (t > 0) & (z >= cyl.z0) & (z <= cyl.z1), t, np.inf)
    # top and bottom caps
    caps = np.full(len(d), np.inf)
    for zc in (cyl.z0, cyl.z1):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = zc / d[:, 2]
            x, y = tc * d[:, 0], tc * d[:, 1]
        in_disc = (d[:, 2] != 0) & (tc > 0) & ((x - cx) ** 2 + (y - cy) ** 2 <= cyl.radius ** 2)
        caps = np.minimum(caps, np.where(in_disc, tc, np.inf))
    return np.minimum(side, caps)


def _hit_ground(d: np.ndarray, ground_z: float, extent: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ground_z / d[:, 2]
        x, y = t * d[:, 0], t * d[:, 1]
    ok = d[:, 2] < 0
    ok &= (np.abs(x) <= extent) & (np.abs(y) <= extent)
    return np.where(ok, t, np.inf)


def cast_rays(spec: SceneSpec, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit distance, class and primitive index (-1 = ground) per ray; inf where missed."""
    best = _hit_ground(directions, spec.ground_z, spec.extent)
    cls = np.full(len(directions), spec.ground_class, dtype=np.int64)
    owner = np.full(len(directions), -1, dtype=np.int64)
    for i, prim in enumerate(spec.primitives):
        t = _hit_box(directions, prim) if isinstance(prim, Box) else _hit_cylinder(directions, prim)
        closer = t < best
        best = np.where(closer, t, best)
        cls = np.where(closer, prim.cls, cls)
        owner = np.where(closer, i, owner)
    best = np.where(best <= spec.sensor.max_range, best, np.inf)
    return best, cls, owner


def generate_scene(spec: SceneSpec, known_classes: Optional[Sequence[int]] = None) -> tuple[PointCloud, np.ndarray]:
    """Ray-cast one sweep; returns the cloud and per-point raw class ids."""
    spec.validate(known_classes)
    rng = np.random.default_rng([int(spec.seed), 7])
    d = spec.sensor.directions()
    t, cls, _ = cast_rays(spec, d)
    hit = np.isfinite(t)
    if not hit.any():
        raise SceneError("scene produced no returns")
    t, cls, d = t[hit], cls[hit], d[hit]
    if spec.sensor.noise_sigma > 0:
        t = np.maximum(t + rng.normal(0.0, spec.sensor.noise_sigma, size=t.shape), 1e-3)
    mean = np.array([spec.intensity.get(int(c), 0.5) for c in cls])
    inten = mean + (rng.normal(0.0, spec.intensity_noise, size=t.shape) if spec.intensity_noise > 0 else 0.0)
    pts = np.column_stack([d * t[:, None], np.clip(inten, 0.0, 1.0)])
    # match the float32 on-disk precision so in-memory and file round trips agree
    return PointCloud(pts.astype(np.float32).astype(np.float64)), cls


# ---------------------------------------------------------------- corpora

@dataclass(frozen=True)
class CorpusConfig:
    """Street-like scenes: road ground, building walls and poles (base); cars and persons (novel)."""

    seed: int = 0
    n_base: int = 40
    n_pool: int = 20
    n_eval: int = 20
    beams: int = 16
    azimuth_bins: int = 256
    fov_up_deg: float = 3.0
    fov_down_deg: float = 15.0
    max_range: float = 50.0
    noise_sigma: float = 0.02
    intensity_noise: float = 0.12
    road: int = 40
    building: int = 50
    pole: int = 80
    car: int = 10
    person: int = 30


SPLITS = ("base-train", "novel-pool", "eval")
SPLIT_SEQUENCES = {"base-train": "00", "novel-pool": "01", "eval": "02"}


def _street_scene(seed: int, cc: CorpusConfig) -> SceneSpec:
    rng = np.random.default_rng([int(seed), 11])
    prims: list[Primitive] = []
    extent = 40.0
    gz = -1.73
    # walls on both sides of the street, broken into segments
    for side in (-1, 1):
        y0 = side * rng.uniform(7.0, 12.0)
        x = -35.0
        while x < 35.0:
            length = rng.uniform(6.0, 15.0)
            if rng.random() < 0.8:
                thick = 0.6
                ylo, yhi = (y0, y0 + side * thick) if side > 0 else (y0 + side * thick, y0)
                prims.append(Box(cc.building, (x, min(ylo, yhi), gz), (min(x + length, 35.0), max(ylo, yhi), gz + rng.uniform(2.5, 6.0))))
            x += length + rng.uniform(1.0, 4.0)
        for _ in range(rng.integers(2, 5)):
            px = rng.uniform(-30.0, 30.0)
            py = y0 - side * rng.uniform(0.8, 2.0)
            prims.append(Cylinder(cc.pole, (px, py), rng.uniform(0.1, 0.25), gz, gz + rng.uniform(3.0, 6.0)))
    for _ in range(rng.integers(1, 5)):
        cx = rng.uniform(-25.0, 25.0)
        if abs(cx) < 4.0:
            cx += 8.0 * np.sign(cx or 1.0)
        cy = rng.choice([-1, 1]) * rng.uniform(2.0, 5.0)
        L, W, H = rng.uniform(3.8, 4.8), rng.uniform(1.6, 2.0), rng.uniform(1.3, 1.8)
        prims.append(Box(cc.car, (cx - L / 2, cy - W / 2, gz), (cx + L / 2, cy + W / 2, gz + H)))
    for _ in range(rng.integers(0, 4)):
        px = rng.uniform(-20.0, 20.0)
        if abs(px) < 2.0:
            px += 4.0
        py = rng.choice([-1, 1]) * rng.uniform(3.0, 7.0)
        prims.append(Cylinder(cc.person, (px, py), rng.uniform(0.25, 0.35), gz, gz + rng.uniform(1.6, 1.9)))
    sensor = SensorModel(cc.beams, cc.azimuth_bins, cc.fov_up_deg, cc.fov_down_deg, cc.max_range, cc.noise_sigma)
    intensity = {cc.road: 0.25, cc.building: 0.45, cc.pole: 0.55, cc.car: 0.5, cc.person: 0.35}
    return SceneSpec(int(seed), extent, gz, cc.road, tuple(prims), sensor, intensity, cc.intensity_noise)


def corpus_scene_seeds(cc: CorpusConfig) -> dict[str, list[int]]:
    """Disjoint per-frame scene seeds for the three splits."""
    counts = {"base-train": cc.n_base, "novel-pool": cc.n_pool, "eval": cc.n_eval}
    children = np.random.SeedSequence(cc.seed).spawn(len(SPLITS))
    out = {}
    for name, child in zip(SPLITS, children):
        out[name] = [int(s) for s in child.generate_state(counts[name], dtype=np.uint32)]
    return out


def corpus_scenes(cc: CorpusConfig) -> dict[str, list[SceneSpec]]:
    return {split: [_street_scene(s, cc) for s in seeds] for split, seeds in corpus_scene_seeds(cc).items()}


def write_corpus(root: str | os.PathLike, cc: CorpusConfig) -> dict:
    """Write scans/labels in SemanticKITTI layout: sequences/<seq>/{velodyne,labels}/NNNNNN.*"""
    root = os.fspath(root)
    index = {"config": asdict(cc), "splits": {}}
    for split, scenes in corpus_scenes(cc).items():
        seq = SPLIT_SEQUENCES[split]
        vel = os.path.join(root, "sequences", seq, "velodyne")
        lab = os.path.join(root, "sequences", seq, "labels")
        os.makedirs(vel, exist_ok=True)
        os.makedirs(lab, exist_ok=True)
        for i, spec in enumerate(scenes):
            cloud, cls = generate_scene(spec)
            write_scan(os.path.join(vel, f"{i:06d}.bin"), cloud)
            write_labels(os.path.join(lab, f"{i:06d}.label"), cls)
        index["splits"][split] = {"sequence": seq, "frames": len(scenes)}
    with open(os.path.join(root, "corpus.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return index
