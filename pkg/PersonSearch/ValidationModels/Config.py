"""
Defines the run configuration consumed by the command-line interface.

A `RunConfig` is assembled from three layers: the pydantic defaults below, a YAML file and
command-line overrides. Only the `data`, `model` and `train` sections define an experiment;
their hash names the run directory, so changing evaluation or benchmark flags reuses the
trained artifacts.
"""

import hashlib
from enum import StrEnum
from typing import Self

import orjson
from pydantic import Field, model_validator

from PersonSearch.ValidationModels.Backbone import BackboneConfig, SplitVariant
from PersonSearch.ValidationModels.BaseModels import ConfigModel
from PersonSearch.ValidationModels.Detect import DetectConfig
from PersonSearch.ValidationModels.Evaluation import ProtocolKind
from PersonSearch.ValidationModels.Pipeline import TrainConfig
from PersonSearch.ValidationModels.Reid import ReidConfig
from PersonSearch.ValidationModels.Synth import BenchmarkSizes, DomainSpec

RUN_HASH_LENGTH: int = 12
HASHED_SECTIONS: tuple[str, ...] = ("data", "model", "train")


class TrainingRegime(StrEnum):
    """
    Enumeration of the detection-data regimes compared by `report`.
    """

    single = "single"
    aggregated = "aggregated"


class DataConfig(ConfigModel):
    """
    Where the data lives and which domains feed each training step.

    Attributes:
        root (str): Directory of the generated benchmark.
        domains (tuple[DomainSpec, ...]): Generated domains.
        sizes (BenchmarkSizes): Scene counts per domain.
        seed (int): Generator seed.
        detection_domains (tuple[str, ...]): Domains whose detection-only manifests are merged
            for the first training step.
        reid_domain (str): Domain whose identity-labeled training manifest feeds the cache.
    """

    root: str = "data"
    domains: tuple[DomainSpec, ...] = DomainSpec.reference_pair()
    sizes: BenchmarkSizes = BenchmarkSizes()
    seed: int = 0
    detection_domains: tuple[str, ...] = ("domA",)
    reid_domain: str = "domA"

    @model_validator(mode="after")
    def validate_domains(self) -> Self:
        names = [spec.name for spec in self.domains]
        if len(set(names)) != len(names):
            raise ValueError(f"Domain names must be unique, got {names}.")
        unknown = [
            name
            for name in (*self.detection_domains, self.reid_domain)
            if name not in names
        ]
        if unknown:
            raise ValueError(f"Unknown domains {unknown}; known domains are {names}.")
        if not self.detection_domains:
            raise ValueError("At least one detection domain is required.")
        return self

    @property
    def regime(self) -> TrainingRegime:
        return (
            TrainingRegime.aggregated
            if len(set(self.detection_domains)) > 1
            else TrainingRegime.single
        )

    def domain(self, name: str) -> DomainSpec:
        for spec in self.domains:
            if spec.name == name:
                return spec
        raise KeyError(name)


class ModelConfig(ConfigModel):
    """
    Architecture of the joint model and of the standalone extractor.
    """

    variant: SplitVariant = SplitVariant.J3
    backbone: BackboneConfig = BackboneConfig()
    detect: DetectConfig = DetectConfig()
    reid: ReidConfig = ReidConfig()


class EvalConfig(ConfigModel):
    """
    Evaluation protocol parameters.

    Attributes:
        domain (str | None): Test domain; None evaluates on the re-ID training domain.
        protocol (ProtocolKind): Default protocol of the `eval` command.
        gallery_sizes (tuple[int, ...]): Gallery sizes of the gallery protocol.
        k_values (tuple[int | None, ...]): Boxes-per-image caps of the sweep; None is uncapped.
        iou_thresh (float): Overlap above which a box matches a ground truth.
        seed (int): Seed of the gallery construction.
    """

    domain: str | None = None
    protocol: ProtocolKind = ProtocolKind.gallery
    gallery_sizes: tuple[int, ...] = (50,)
    k_values: tuple[int | None, ...] = (1, 3, 5, 10)
    iou_thresh: float = Field(default=0.5, gt=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def validate_parameters(self) -> Self:
        if not self.gallery_sizes or any(size <= 0 for size in self.gallery_sizes):
            raise ValueError(f"Gallery sizes must be positive, got {self.gallery_sizes}.")
        if not self.k_values or any(k is not None and k <= 0 for k in self.k_values):
            raise ValueError(f"Boxes-per-image caps must be positive, got {self.k_values}.")
        return self


class BenchConfig(ConfigModel):
    """
    Runtime benchmark grid.

    Attributes:
        batch_sizes (tuple[int, ...]): Images per forward batch.
        people_counts (tuple[int, ...]): People per fixture image.
        repetitions (int): Timed repetitions per cell.
        warmup (int): Discarded repetitions per cell.
        image_size (int): Side of the square fixture scenes.
        seed (int): Seed of the fixtures and of the untrained timing models.
    """

    batch_sizes: tuple[int, ...] = (1, 4, 8)
    people_counts: tuple[int, ...] = (5, 20)
    repetitions: int = Field(default=10, ge=10)
    warmup: int = Field(default=5, ge=0)
    image_size: int = Field(default=512, ge=64)
    seed: int = 0

    @classmethod
    def quick(cls) -> "BenchConfig":
        """
        A one-cell grid for smoke runs.
        """
        return cls(batch_sizes=(1,), people_counts=(5,), image_size=256)


class RunConfig(ConfigModel):
    """
    The complete configuration of an experiment run.
    """

    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    bench: BenchConfig = BenchConfig()

    @model_validator(mode="after")
    def validate_eval_domain(self) -> Self:
        if self.eval.domain is not None and self.eval.domain not in {
            spec.name for spec in self.data.domains
        }:
            raise ValueError(f"Unknown evaluation domain {self.eval.domain!r}.")
        return self

    @property
    def test_domain(self) -> str:
        return self.eval.domain or self.data.reid_domain

    def run_hash(self) -> str:
        """
        Returns the first hex digits of the SHA-256 of the experiment-defining sections,
        serialized as JSON with sorted keys.
        """
        payload = self.model_dump(mode="json", include=set(HASHED_SECTIONS))
        digest = hashlib.sha256(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS))
        return digest.hexdigest()[:RUN_HASH_LENGTH]
