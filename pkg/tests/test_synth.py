import os

import numpy as np
import pytest

from bgfss.geometry import PointCloud, ProjectionConfig, pixel_coords, project, read_labels, read_scan
from bgfss.synth import (
    Box, CorpusConfig, Cylinder, SceneError, SceneSpec, SensorModel, _hit_box, _hit_cylinder, cast_rays,
    generate_scene, write_corpus,
)


def test_primitive_hits_hand_examples():
    d = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    t = _hit_box(d, Box(10, (5.0, -1.0, -1.0), (7.0, 1.0, 1.0)))
    assert t[0] == 5.0 and np.isinf(t[1:]).all()
    assert _hit_cylinder(d, Cylinder(30, (5.0, 0.0), 1.0, -1.0, 1.0))[0] == 4.0
    # downward ray meets the top cap of a cylinder below the sensor
    assert _hit_cylinder(d, Cylinder(80, (0.0, 0.0), 1.0, -3.0, -1.0))[1] == 1.0


def test_ground_only_scene_lies_on_plane():
    sensor = SensorModel(beams=8, azimuth_bins=64, fov_up_deg=2.0, fov_down_deg=20.0)
    spec = SceneSpec(0, extent=40.0, ground_z=-1.73, sensor=sensor, intensity_noise=0.0)
    cloud, cls = generate_scene(spec)
    assert (cls == 40).all()
    assert np.allclose(cloud.points[:, 2], -1.73, atol=1e-6)
    assert (np.abs(cloud.points[:, :2]) <= 40.0 + 1e-5).all()
    assert (cloud.points[:, 3] == np.float32(0.5)).all()
    # only downward beams return
    downward = (sensor.directions()[:, 2] < 0).sum()
    assert len(cloud) <= downward


def test_rays_land_on_their_own_pixel():
    sensor = SensorModel(beams=16, azimuth_bins=256, fov_up_deg=3.0, fov_down_deg=15.0, max_range=1e9)
    d = sensor.directions() * 10.0
    pts = np.column_stack([d, np.zeros(len(d))])
    row, col = pixel_coords(PointCloud(pts), ProjectionConfig.from_degrees(256, 16, 3.0, 15.0))
    assert np.array_equal(row * 256 + col, np.arange(len(d)))


def test_car_box_owns_the_rays_that_hit_it_first():
    sensor = SensorModel(beams=16, azimuth_bins=256)
    car = Box(10, (6.0, -1.0, -1.73), (10.0, 1.0, -0.3))
    spec = SceneSpec(1, primitives=(car,), sensor=sensor)
    d = sensor.directions()
    t, cls, owner = cast_rays(spec, d)
    # every car return lies on the box surface and in front of the ground
    for i in np.flatnonzero(cls == 10):
        p = d[i] * t[i]
        assert (p >= np.array(car.lo) - 1e-9).all() and (p <= np.array(car.hi) + 1e-9).all()
        if d[i, 2] < 0:
            assert t[i] <= -1.73 / d[i, 2]
    assert (owner[cls == 10] == 0).all() and (cls == 10).sum() > 10


def test_determinism_and_validation():
    spec = SceneSpec(5, primitives=(Box(10, (5.0, -1.0, -1.73), (9.0, 1.0, 0.0)),),
                     sensor=SensorModel(noise_sigma=0.05))
    a, la = generate_scene(spec)
    b, lb = generate_scene(spec)
    assert np.array_equal(a.points, b.points) and np.array_equal(la, lb)
    with pytest.raises(SceneError, match="outside the taxonomy"):
        generate_scene(spec, known_classes=[40])
    with pytest.raises(SceneError, match="origin"):
        SceneSpec(0, primitives=(Box(10, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),)).validate()
    with pytest.raises(SceneError, match="degenerate"):
        SceneSpec(0, primitives=(Cylinder(30, (5.0, 0.0), 0.0, -1.0, 1.0),)).validate()


def test_write_corpus_layout_and_determinism(tmp_path):
    cc = CorpusConfig(seed=1, n_base=2, n_pool=1, n_eval=1)
    index = write_corpus(tmp_path / "a", cc)
    write_corpus(tmp_path / "b", cc)
    assert index["splits"]["base-train"] == {"sequence": "00", "frames": 2}
    for rel in ("sequences/00/velodyne/000001.bin", "sequences/02/labels/000000.label", "corpus.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    scan = read_scan(os.fspath(tmp_path / "a/sequences/00/velodyne/000000.bin"))
    labels = read_labels(os.fspath(tmp_path / "a/sequences/00/labels/000000.label"), len(scan))
    assert set(np.unique(labels)) <= {cc.road, cc.building, cc.pole, cc.car, cc.person}
    img = project(scan, ProjectionConfig.from_degrees(256, 16, 3.0, 15.0))
    assert img.M == len(scan)  # one ray per pixel, so no collisions
