import pytest
import torch
from conftest import TINY_BACKBONE, TINY_REID, tiny_model

from PersonSearch.Checkpoint import (
    load_cache,
    load_detection_checkpoint,
    load_joint,
    load_standalone_checkpoint,
    save_cache,
    save_detection_checkpoint,
    save_reid_checkpoint,
    save_standalone_checkpoint,
)
from PersonSearch.Exceptions.Model import ModelException
from PersonSearch.Exceptions.Training import StaleCacheException
from PersonSearch.Networks.Backbone import split_config
from PersonSearch.Networks.Model import StandaloneExtractor, state_checksum
from PersonSearch.ValidationModels.DataModel import BoundingBox
from PersonSearch.ValidationModels.Pipeline import FeatureCache


def test_variants_sharing_a_seed_share_detection_weights():
    assert tiny_model("J2").detection_checksum() == tiny_model("J4").detection_checksum()
    assert tiny_model("J3", seed=1).detection_checksum() != tiny_model("J3").detection_checksum()


def test_detection_and_reid_weights_never_alias():
    model = tiny_model("J3")
    detection = {id(parameter) for parameter in model.detection_parameters()}
    assert not detection & {id(parameter) for parameter in model.reid.parameters()}


def test_checksum_depends_on_names_and_values():
    tensor = torch.ones(2)
    assert state_checksum([("a", tensor)]) != state_checksum([("b", tensor)])
    assert state_checksum([("a", tensor)]) != state_checksum([("a", tensor * 2)])
    assert state_checksum([("a", tensor), ("b", tensor)]) == state_checksum([("b", tensor), ("a", tensor)])


def test_anchors_are_memoized():
    model = tiny_model()
    assert model.anchors(2, 2) is model.anchors(2, 2)
    assert len(model.anchors(2, 3)) == 2 * 3 * model.detect_config.anchors_per_cell


def test_standalone_crop_size(image):
    extractor = StandaloneExtractor(TINY_BACKBONE, TINY_REID)
    crops = extractor.crops(image, [BoundingBox(x1=0.5, y1=3.2, x2=20.7, y2=50.0), BoundingBox(x1=60, y1=60, x2=64, y2=64)])
    assert crops.shape == (2, 3, 32, 32)
    assert extractor.crops(image, []).shape == (0, 3, 32, 32)


class TestCheckpoints:
    def test_detection_round_trip(self, tmp_path):
        model = tiny_model("J2")
        path = save_detection_checkpoint(model, tmp_path / "checkpoints" / "detection.pt")
        loaded = load_detection_checkpoint(path)
        assert loaded.split == model.split
        assert loaded.detection_checksum() == model.detection_checksum()

    def test_reid_tail_is_stored_under_starred_names(self, tmp_path):
        path = save_reid_checkpoint(tiny_model("J3"), tmp_path / "reid.pt")
        state = torch.load(path, weights_only=True)["state"]
        assert set(state) == {"C4*", "C5*", "projection"}

    def test_joint_round_trip(self, tmp_path):
        model = tiny_model("J3")
        with torch.no_grad():
            for parameter in model.reid.parameters():
                parameter.add_(0.01)
        save_detection_checkpoint(model, tmp_path / "detection.pt")
        save_reid_checkpoint(model, tmp_path / "reid.pt")
        loaded = load_joint(tmp_path / "detection.pt", tmp_path / "reid.pt")
        assert loaded.reid_checksum() == model.reid_checksum()
        assert loaded.detection_checksum() == model.detection_checksum()

    def test_reid_trained_on_other_shared_weights(self, tmp_path):
        save_reid_checkpoint(tiny_model("J3"), tmp_path / "reid.pt")
        save_detection_checkpoint(tiny_model("J3", seed=1), tmp_path / "detection.pt")
        with pytest.raises(StaleCacheException):
            load_joint(tmp_path / "detection.pt", tmp_path / "reid.pt")

    def test_split_mismatch(self, tmp_path):
        save_reid_checkpoint(tiny_model("J2"), tmp_path / "reid.pt")
        save_detection_checkpoint(tiny_model("J3"), tmp_path / "detection.pt")
        with pytest.raises(ModelException, match="split"):
            load_joint(tmp_path / "detection.pt", tmp_path / "reid.pt")

    def test_wrong_kind(self, tmp_path):
        save_reid_checkpoint(tiny_model(), tmp_path / "reid.pt")
        with pytest.raises(ModelException, match="expected detection"):
            load_detection_checkpoint(tmp_path / "reid.pt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelException, match="Missing"):
            load_detection_checkpoint(tmp_path / "absent.pt")

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "detection.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ModelException):
            load_detection_checkpoint(path)

    def test_standalone_round_trip(self, tmp_path):
        extractor = StandaloneExtractor(TINY_BACKBONE, TINY_REID, seed=3)
        loaded = load_standalone_checkpoint(save_standalone_checkpoint(extractor, tmp_path / "standalone.pt"))
        assert loaded.checksum() == extractor.checksum()
        assert loaded.crop_size == (32, 32)

    def test_cache_round_trip(self, tmp_path):
        cache = FeatureCache(
            features=torch.rand(2, 8, 2, 2),
            identities=("a", "b"),
            image_refs=("x.png", "y.png"),
            boxes=(BoundingBox(x1=0, y1=0, x2=5, y2=9), BoundingBox(x1=1, y1=1, x2=6.5, y2=7)),
            split=split_config("J3"),
            shared_checksum="abc",
        )
        loaded = load_cache(save_cache(cache, tmp_path / "cache" / "features.pt"))
        assert torch.equal(loaded.features, cache.features)
        assert loaded.identities == cache.identities
        assert loaded.boxes == cache.boxes
        assert loaded.split == cache.split
        assert loaded.shared_checksum == "abc"
