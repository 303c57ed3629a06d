import numpy as np
import orjson
import pytest
import torch
from PIL import Image

from PersonSearch.Dataset import ImageStore, iou, load_manifest, merge_manifests, save_manifest
from PersonSearch.Exceptions.Geometry import GeometryException
from PersonSearch.Exceptions.Manifest import ManifestException
from PersonSearch.ValidationModels.DataModel import (
    BoundingBox,
    DatasetManifest,
    MergeMode,
    PersonAnnotation,
    SceneRecord,
)


def box(x1, y1, x2, y2) -> BoundingBox:
    return BoundingBox(x1=x1, y1=y1, x2=x2, y2=y2)


def scene(ref: str, identities=(None,)) -> SceneRecord:
    return SceneRecord(
        image_ref=ref,
        width=100,
        height=100,
        annotations=tuple(PersonAnnotation(box=box(10, 10, 30, 60), identity=identity) for identity in identities),
    )


def write_lines(path, *lines) -> None:
    path.write_bytes(b"\n".join(orjson.dumps(line) for line in lines) + b"\n")


class TestIou:
    def test_analytic_overlap(self):
        assert iou(box(0, 0, 2, 2), box(1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_identical_boxes(self):
        assert iou(box(1, 2, 5, 9), box(1, 2, 5, 9)) == 1.0

    def test_disjoint_boxes(self):
        assert iou(box(0, 0, 1, 1), box(2, 2, 3, 3)) == 0.0

    def test_touching_boxes_do_not_overlap(self):
        assert iou(box(0, 0, 1, 1), box(1, 0, 2, 1)) == 0.0

    def test_symmetric_and_bounded_on_random_boxes(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            corners = rng.uniform(0, 50, size=(2, 2))
            sizes = rng.uniform(0.1, 30, size=(2, 2))
            a = box(*corners[0], *(corners[0] + sizes[0]))
            b = box(*corners[1], *(corners[1] + sizes[1]))
            assert iou(a, b) == pytest.approx(iou(b, a))
            assert 0.0 <= iou(a, b) <= 1.0
            assert iou(a, a) == pytest.approx(1.0)

    def test_degenerate_box_is_rejected(self):
        degenerate = BoundingBox.model_construct(x1=1.0, y1=1.0, x2=1.0, y2=4.0)
        with pytest.raises(GeometryException):
            iou(degenerate, box(0, 0, 2, 2))


class TestLoadManifest:
    def test_record_without_identity(self, tmp_path):
        path = tmp_path / "plain.jsonl"
        write_lines(path, {"image_ref": "a.png", "width": 64, "height": 64, "boxes": [{"x1": 1, "y1": 2, "x2": 10, "y2": 30}]})
        manifest = load_manifest(path)
        assert manifest.name == "plain"
        assert manifest.box_count == 1
        assert manifest.has_identities is False

    def test_record_with_identity(self, tmp_path):
        path = tmp_path / "labeled.jsonl"
        write_lines(
            path,
            {"image_ref": "a.png", "width": 64, "height": 64, "boxes": [{"x1": 1, "y1": 2, "x2": 10, "y2": 30, "id": "p01"}]},
        )
        manifest = load_manifest(path)
        assert manifest.has_identities is True
        assert list(manifest.identities()) == ["p01"]

    def test_inverted_box_names_the_record(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        write_lines(path, {"image_ref": "bad.png", "width": 64, "height": 64, "boxes": [{"x1": 10, "y1": 2, "x2": 5, "y2": 30}]})
        with pytest.raises(ManifestException, match="bad.png"):
            load_manifest(path)

    def test_box_outside_the_image(self, tmp_path):
        path = tmp_path / "outside.jsonl"
        write_lines(path, {"image_ref": "a.png", "width": 64, "height": 64, "boxes": [{"x1": 10, "y1": 2, "x2": 70, "y2": 30}]})
        with pytest.raises(ManifestException):
            load_manifest(path)

    def test_header_names_the_manifest_and_unknown_keys_are_ignored(self, tmp_path):
        path = tmp_path / "file.jsonl"
        write_lines(
            path,
            {"format": "person-search-manifest", "version": 1, "name": "domA-test", "origin": "lab"},
            {"image_ref": "a.png", "width": 64, "height": 64, "camera": 3, "boxes": []},
        )
        manifest = load_manifest(path)
        assert manifest.name == "domA-test"
        assert len(manifest.records) == 1

    def test_newer_version_is_rejected(self, tmp_path):
        path = tmp_path / "future.jsonl"
        write_lines(path, {"format": "person-search-manifest", "version": 2, "name": "x"})
        with pytest.raises(ManifestException, match="unsupported"):
            load_manifest(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "garbage.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(ManifestException, match=":1:"):
            load_manifest(path)

    def test_duplicate_image_refs(self, tmp_path):
        path = tmp_path / "twice.jsonl"
        line = {"image_ref": "a.png", "width": 64, "height": 64}
        write_lines(path, line, line)
        with pytest.raises(ManifestException):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestException, match="not found"):
            load_manifest(tmp_path / "absent.jsonl")

    def test_saved_manifest_reads_back(self, tmp_path):
        manifest = DatasetManifest(name="domA-reid", records=(scene("a.png", ("p1", None)), scene("b.png")))
        loaded = load_manifest(save_manifest(manifest, tmp_path / "out" / "m.jsonl"))
        assert loaded == manifest


class TestMerge:
    def test_cardinality(self):
        a = DatasetManifest(name="A", records=tuple(scene(f"a{i}.png") for i in range(3)))
        b = DatasetManifest(name="B", records=tuple(scene(f"b{i}.png") for i in range(5)))
        merged = merge_manifests([a, b], MergeMode.detection_only)
        assert len(merged.records) == 8
        assert merged.name == "A+B"

    def test_detection_only_strips_identities(self):
        labeled = DatasetManifest(name="A", records=(scene("a.png", ("p1", "p2")),))
        merged = merge_manifests([labeled], MergeMode.detection_only)
        assert merged.has_identities is False
        assert merged.box_count == 2

    def test_full_mode_namespaces_identities(self):
        a = DatasetManifest(name="A", records=(scene("a.png", ("p1",)),))
        b = DatasetManifest(name="B", records=(scene("b.png", ("p1", None)),))
        merged = merge_manifests([a, b], MergeMode.full)
        assert set(merged.identities()) == {"A/p1", "B/p1"}
        assert merged.records[1].annotations[1].identity is None

    def test_shared_image_ref(self):
        a = DatasetManifest(name="A", records=(scene("same.png"),))
        b = DatasetManifest(name="B", records=(scene("same.png"),))
        with pytest.raises(ManifestException, match="same.png"):
            merge_manifests([a, b], MergeMode.full)

    def test_nothing_to_merge(self):
        with pytest.raises(ManifestException):
            merge_manifests([], MergeMode.full)


class TestImageStore:
    def test_in_memory_pixels_become_chw_floats(self):
        store = ImageStore()
        pixels = np.zeros((5, 7, 3), dtype=np.uint8)
        pixels[..., 0] = 255
        store.put("red.png", pixels)
        image = store.load("red.png")
        assert image.shape == (3, 5, 7)
        assert image.dtype == torch.float32
        assert torch.all(image[0] == 1.0) and torch.all(image[1:] == 0.0)
        assert "red.png" in store

    def test_reads_png_from_disk(self, tmp_path):
        pixels = np.arange(4 * 6 * 3, dtype=np.uint8).reshape(4, 6, 3)
        (tmp_path / "sub").mkdir()
        Image.fromarray(pixels).save(tmp_path / "sub" / "x.png")
        store = ImageStore.for_manifest(tmp_path / "m.jsonl")
        image = store.load("sub/x.png")
        assert torch.equal(image, torch.from_numpy(pixels).permute(2, 0, 1).float() / 255.0)

    def test_missing_image(self, tmp_path):
        with pytest.raises(ManifestException):
            ImageStore(tmp_path).load("absent.png")
