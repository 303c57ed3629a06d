import pytest
import stamina
import structlog
import torch

from PersonSearch.Dataset import ImageStore
from PersonSearch.Networks.Backbone import split_config
from PersonSearch.Networks.Model import JointModel
from PersonSearch.Synth import gen_scene
from PersonSearch.ValidationModels.Backbone import BackboneConfig, SplitConfig
from PersonSearch.ValidationModels.DataModel import DatasetManifest
from PersonSearch.ValidationModels.Detect import DetectConfig
from PersonSearch.ValidationModels.Pipeline import (
    DetectionStepConfig,
    ReidStepConfig,
    TrainConfig,
)
from PersonSearch.ValidationModels.Reid import PKConfig, ReidConfig
from PersonSearch.ValidationModels.Synth import DomainSpec

TINY_BACKBONE = BackboneConfig(widths=(4, 8, 8, 12, 16), groups=4)
# score_thresh 0 keeps untrained heads producing boxes.
TINY_DETECT = DetectConfig(
    scales=(1.0,),
    ratios=(2.0, 3.0),
    head_width=8,
    head_depth=1,
    score_thresh=0.0,
    max_per_image=5,
)
TINY_REID = ReidConfig(embedding_dim=8, pool_height=2, pool_width=2, crop_height=32, crop_width=32)
TINY_TRAIN = TrainConfig(
    image_size=64,
    detection=DetectionStepConfig(epochs=2, batch_size=2, base_lr=1e-2),
    reid=ReidStepConfig(semi_hard_epochs=1, batch_hard_epochs=1, base_lr=1e-3, pk=PKConfig(P=2, K=2)),
    threads=1,
)
TINY_SPEC = DomainSpec(
    name="tiny",
    image_width=64,
    image_height=64,
    person_height=(24.0, 40.0),
    identity_pool=4,
    test_identity_pool=3,
)


@pytest.fixture(autouse=True)
def _quiet_retries():
    stamina.set_active(False)
    yield
    stamina.set_active(True)


@pytest.fixture(autouse=True)
def _quiet_logs():
    structlog.configure(wrapper_class=structlog.make_filtering_bound_logger(30))
    yield
    structlog.reset_defaults()


def synthetic_manifest(
    store: ImageStore,
    name: str = "tiny-reid",
    scenes: int = 6,
    people: int = 3,
    seed: int = 0,
    spec: DomainSpec = TINY_SPEC,
    identities: range | None = None,
) -> DatasetManifest:
    """
    Renders `scenes` in-memory scenes into `store` and returns their manifest.
    """
    records = []
    for index in range(scenes):
        record, pixels = gen_scene(
            spec, people, [seed, index], identity_indices=identities, image_ref=f"{name}/{index:03d}.png"
        )
        store.put(record.image_ref, pixels)
        records.append(record)
    return DatasetManifest(name=name, records=tuple(records))


def tiny_model(variant: str = "J3", seed: int = 0) -> JointModel:
    return JointModel(split_config(variant), TINY_BACKBONE, TINY_DETECT, TINY_REID, seed=seed).eval()


@pytest.fixture
def store() -> ImageStore:
    return ImageStore()


@pytest.fixture
def reid_manifest(store: ImageStore) -> DatasetManifest:
    return synthetic_manifest(store)


@pytest.fixture
def j3() -> SplitConfig:
    return split_config("J3")


@pytest.fixture
def image() -> torch.Tensor:
    return torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0))
