"""Schema, serialization round-trips, resize and rasterization contracts."""

import numpy as np
import pytest

from pmode.data import (
    AnnotatedFrame,
    AnnotationRecord,
    DatasetManifest,
    DimensionLabel,
    FrameRecord,
    ReferentialIntegrityError,
    SchemaError,
    load_dataset,
    polygon_to_mask,
    resize_frame,
    save_dataset,
)

from conftest import make_frame


def two_frame_manifest():
    return DatasetManifest(
        camera_profile_id="cam-a",
        frames=[
            FrameRecord(id=0, file="frame_000000.png", width=128, height=128, frame_index=0),
            FrameRecord(id=1, file="frame_000001.png", width=128, height=128, frame_index=1),
        ],
        annotations=[
            AnnotationRecord(image_id=0, polygon=[[10.0, 10.0], [50.0, 10.0], [50.0, 30.0], [10.0, 30.0]],
                             width_m=4.0, height_m=1.5, occluded=False, track_id=0),
            AnnotationRecord(image_id=1, polygon=[[12.0, 11.0], [52.0, 11.0], [52.0, 31.0], [12.0, 31.0]],
                             width_m=4.0, height_m=1.5, occluded=True, track_id=0),
        ],
    )


class TestManifestIO:
    def test_round_trip_two_frames(self, tmp_path):
        m = two_frame_manifest()
        p = tmp_path / "ann.json"
        save_dataset(m, p)
        loaded = load_dataset(p)
        assert loaded == m
        assert len(loaded.frames) == 2
        assert all(loaded.frame_by_id(a.image_id) for a in loaded.annotations)

    def test_dangling_image_id_rejected(self, tmp_path):
        m = two_frame_manifest()
        m.annotations.append(AnnotationRecord(
            image_id=99, polygon=[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
            width_m=1.0, height_m=1.0, occluded=False, track_id=None))
        with pytest.raises(ReferentialIntegrityError, match="99"):
            m.validate()
        with pytest.raises(ReferentialIntegrityError):
            save_dataset(m, tmp_path / "bad.json")

    def test_duplicate_frame_id_rejected(self):
        m = two_frame_manifest()
        m.frames.append(m.frames[0])
        with pytest.raises(ReferentialIntegrityError):
            m.validate()

    def test_empty_manifest_round_trip(self, tmp_path):
        m = DatasetManifest(camera_profile_id="none")
        p = tmp_path / "empty.json"
        save_dataset(m, p)
        text = p.read_text()
        assert '"frames": []' in text and '"annotations": []' in text
        assert load_dataset(p) == m

    def test_save_is_byte_stable(self, tmp_path):
        m = two_frame_manifest()
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_dataset(m, p1)
        save_dataset(m, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_key_order_fixed(self, tmp_path):
        p = tmp_path / "ord.json"
        save_dataset(two_frame_manifest(), p)
        text = p.read_text()
        assert text.index('"camera_profile_id"') < text.index('"frames"') < text.index('"annotations"')
        assert text.index('"image_id"') < text.index('"polygon"') < text.index('"width_m"')

    def test_parse_failure_names_offender(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text('{"camera_profile_id": "x", "frames": [{"id": 0}], "annotations": []}')
        with pytest.raises(SchemaError, match=r"frames\[0\]"):
            load_dataset(p)

    def test_not_json(self, tmp_path):
        p = tmp_path / "nope.json"
        p.write_text("{{{{")
        with pytest.raises(SchemaError):
            load_dataset(p)


class TestTypes:
    def test_dimension_label_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            DimensionLabel(width_m=0.0, height_m=1.0)
        with pytest.raises(ValueError):
            DimensionLabel(width_m=1.0, height_m=float("nan"))

    def test_frame_rejects_out_of_bounds_polygon(self):
        poly = np.array([[10.0, 10.0], [70.0, 10.0], [10.0, 20.0]])  # x=70 >= W=64
        with pytest.raises(ValueError, match="within"):
            make_frame(h=64, w=64, polygons=[poly])

    def test_frame_rejects_misaligned_lists(self):
        with pytest.raises(ValueError, match="align"):
            make_frame(labels=[DimensionLabel(1.0, 1.0)] * 2)

    def test_frame_rejects_two_vertex_polygon(self):
        with pytest.raises(ValueError, match="vertices"):
            make_frame(polygons=[np.array([[0.0, 0.0], [1.0, 1.0]])])


class TestResize:
    def test_vertex_scaling_1920x1080_to_500(self):
        img = np.zeros((1080, 1920, 3), dtype=np.uint8)
        poly = np.array([[960.0, 540.0], [1000.0, 540.0], [960.0, 600.0]])
        frame = AnnotatedFrame(image=img, polygons=[poly],
                               labels=[DimensionLabel(4.0, 1.5)],
                               occluded_flags=[False])
        out = resize_frame(frame, (500, 500))
        np.testing.assert_allclose(out.polygons[0][0], [960 * 500 / 1920, 540 * 500 / 1080])
        np.testing.assert_allclose(out.polygons[0][0], [250.0, 250.0])
        assert out.image.shape == (500, 500, 3)

    def test_identity_target(self):
        frame = make_frame()
        out = resize_frame(frame, (frame.height, frame.width))
        for p, q in zip(frame.polygons, out.polygons):
            np.testing.assert_array_equal(p, q)

    def test_labels_resize_invariant(self):
        frame = make_frame(labels=[DimensionLabel(4.0, 1.5)])
        out = resize_frame(frame, (500, 500))
        assert out.labels[0] == DimensionLabel(4.0, 1.5)

    def test_round_trip_vertices_close(self, rng):
        frame = make_frame(h=64, w=48)
        out = resize_frame(resize_frame(frame, (97, 131)), (64, 48))
        for p, q in zip(frame.polygons, out.polygons):
            np.testing.assert_allclose(p, q, atol=1e-9)

    def test_rejects_zero_target(self):
        with pytest.raises(ValueError):
            resize_frame(make_frame(), (0, 10))


class TestPolygonToMask:
    def test_rectangle_exact_count(self):
        rect = [[10.0, 10.0], [20.0, 10.0], [20.0, 15.0], [10.0, 15.0]]
        mask = polygon_to_mask(rect, 32, 32)
        assert mask.sum() == 50

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            polygon_to_mask([[0.0, 0.0], [40.0, 0.0], [0.0, 5.0]], 32, 32)

    def test_full_frame_rectangle_all_ones(self):
        w_edge = np.nextafter(32.0, 0.0)
        rect = [[0.0, 0.0], [w_edge, 0.0], [w_edge, w_edge], [0.0, w_edge]]
        mask = polygon_to_mask(rect, 32, 32)
        assert mask.all()

    def test_degenerate_polygon_warns_and_is_empty(self):
        line = [[5.0, 5.0], [10.0, 10.0], [7.5, 7.5]]
        with pytest.warns(UserWarning, match="degenerate"):
            mask = polygon_to_mask(line, 32, 32)
        assert mask.sum() == 0

    def test_deterministic(self, rng):
        poly = rng.uniform(0, 64, size=(6, 2))
        a = polygon_to_mask(poly, 64, 64)
        b = polygon_to_mask(poly, 64, 64)
        assert np.array_equal(a, b)
