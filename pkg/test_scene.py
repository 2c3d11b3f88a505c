import json

import numpy as np
import pytest

from fusioncert.defaults import VEHICLE_ALBEDO
from fusioncert.errors import SceneFormatError, SceneValidationError
from fusioncert.scene import (
    SceneSpec,
    generate,
    load,
    rasterize,
    save,
    scene_from_document,
    scene_id,
    scene_to_document,
)


class TestGenerate:
    def test_deterministic(self):
        spec = SceneSpec(vehicle_points=100, background_points=100, clutter_objects=2, seed=4)
        assert generate(spec).equals(generate(spec))

    def test_seed_matters(self):
        a = generate(SceneSpec(vehicle_points=100, background_points=100, seed=4))
        b = generate(SceneSpec(vehicle_points=100, background_points=100, seed=5))
        assert not np.array_equal(a.points, b.points)

    def test_no_background(self):
        scene = generate(SceneSpec(vehicle_points=50, background_points=0))
        assert scene.points.shape == (50, 3)
        assert list(scene.object_mask) == list(range(50))

    def test_vehicle_on_box_surface(self):
        scene = generate(SceneSpec(x=0.0, z=10.0, vehicle_l=4.0, vehicle_points=300, background_points=0))
        z = scene.points[:, 2]
        assert z.min() >= 8.0 - 1e-9 and z.max() <= 12.0 + 1e-9
        y = scene.points[:, 1]
        assert y.max() <= scene.gt.y + 1e-9 and y.min() >= scene.gt.y - scene.gt.h - 1e-9

    def test_gt_matches_spec(self):
        spec = SceneSpec(x=1.0, z=12.0, r=0.3)
        gt = generate(spec).gt
        assert (gt.x, gt.z, gt.r, gt.w, gt.h, gt.l) == (1.0, 12.0, 0.3, spec.vehicle_w, spec.vehicle_h, spec.vehicle_l)

    def test_clutter_is_background(self):
        scene = generate(SceneSpec(vehicle_points=100, background_points=0, clutter_objects=3, clutter_points=20))
        assert scene.points.shape[0] == 160
        assert scene.object_mask.size == 100

    def test_vehicle_behind_camera(self):
        with pytest.raises(ValueError):
            SceneSpec(z=3.0, vehicle_l=4.0)

    def test_image_size(self, golden_scene):
        assert golden_scene.image.shape == (64, 87)


class TestRasterize:
    def test_empty(self):
        camera = SceneSpec().camera()
        assert not rasterize(np.empty((0, 3)), np.empty(0), camera).any()

    def test_point_on_axis(self):
        camera = SceneSpec().camera()
        image = rasterize(np.array([[0.0, 0.0, 10.0]]), np.array([0.5]), camera)
        assert np.count_nonzero(image) == 1
        assert image[int(camera.cy), int(camera.cx)] == 0.5

    def test_nearest_point_wins(self):
        camera = SceneSpec().camera()
        points = np.array([[0.0, 0.0, 20.0], [0.0, 0.0, 10.0]])
        image = rasterize(points, np.array([0.3, 0.8]), camera)
        assert image[int(camera.cy), int(camera.cx)] == 0.8

    def test_tie_goes_to_lower_index(self):
        camera = SceneSpec().camera()
        points = np.array([[0.0, 0.0, 10.0], [0.0, 0.0, 10.0]])
        image = rasterize(points, np.array([0.3, 0.8]), camera)
        assert image[int(camera.cy), int(camera.cx)] == 0.3

    def test_behind_camera_skipped(self):
        camera = SceneSpec().camera()
        assert not rasterize(np.array([[0.0, 0.0, -5.0]]), np.array([1.0]), camera).any()

    def test_farther_never_covers_more(self, golden_scene):
        mask = golden_scene.object_mask
        vehicle = golden_scene.points[mask]
        ones = np.full(vehicle.shape[0], VEHICLE_ALBEDO)
        previous = None
        for dz in range(10):
            shifted = vehicle + np.array([0.0, 0.0, float(dz)])
            covered = np.count_nonzero(rasterize(shifted, ones, golden_scene.camera))
            if previous is not None:
                assert covered <= previous
            previous = covered


class TestFiles:
    def test_round_trip(self, tmp_path, small_scene):
        path = tmp_path / "scene.json"
        save(small_scene, path)
        assert load(path).equals(small_scene)

    def test_document_field_names(self, small_scene):
        doc = scene_to_document(small_scene)
        assert set(doc) == {"image", "points", "object_mask", "gt", "camera"}
        assert set(doc["gt"]) == {"x", "y", "z", "w", "h", "l", "r"}
        assert set(doc["camera"]) == {"fx", "fy", "cx", "cy", "width", "height"}

    def test_truncated(self, tmp_path, small_scene):
        path = tmp_path / "scene.json"
        save(small_scene, path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(SceneFormatError) as info:
            load(path)
        assert info.value.line == 1
        assert info.value.column is not None

    def test_invalid_utf8(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_bytes(b'{"image": []}\n  \xff\xfe')
        with pytest.raises(SceneFormatError, match="byte 16") as info:
            load(path)
        assert (info.value.line, info.value.column) == (2, 3)

    def test_nan_coordinate(self, tmp_path, small_scene):
        doc = scene_to_document(small_scene)
        doc["points"][3][1] = float("nan")
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SceneValidationError) as info:
            load(path)
        assert info.value.field.startswith("points.3")

    def test_missing_field(self, small_scene):
        doc = scene_to_document(small_scene)
        del doc["gt"]
        with pytest.raises(SceneValidationError, match="gt: required"):
            scene_from_document(doc)

    def test_mask_out_of_range(self, small_scene):
        doc = scene_to_document(small_scene)
        doc["object_mask"].append(10**6)
        with pytest.raises(SceneValidationError, match="object_mask"):
            scene_from_document(doc)

    def test_image_shape_checked(self, small_scene):
        doc = scene_to_document(small_scene)
        doc["image"] = doc["image"][:-1]
        with pytest.raises(SceneValidationError, match="image"):
            scene_from_document(doc)

    def test_scene_id(self):
        assert scene_id("data/scene_007.json") == "scene_007"
