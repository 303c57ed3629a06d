"""
Defines the models of the runtime benchmark: pipeline ids, timing points, the
joint-versus-disjoint speedup grid and the environment manifest stored next to it.
"""

from enum import StrEnum
from typing import Self

from pydantic import Field, model_validator

from PersonSearch.ValidationModels.BaseModels import FrozenModel, RecordModel

MIN_REPETITIONS: int = 10


class PipelineId(StrEnum):
    """
    Enumeration of the benchmarked pipelines.

    Attributes:
        Disj (str): Detector followed by a standalone extractor on image crops.
        J2 (str): Joint model sharing C1-C2.
        J3 (str): Joint model sharing C1-C3.
        J4 (str): Joint model sharing C1-C4.
    """

    Disj = "Disj"
    J2 = "J2"
    J3 = "J3"
    J4 = "J4"

    @property
    def is_joint(self) -> bool:
        return self is not PipelineId.Disj


class BenchPoint(RecordModel):
    """
    Per-person latency of one pipeline at one (batch, people) grid cell.

    Attributes:
        pipeline (PipelineId): The timed pipeline.
        batch_size (int): Images per forward batch.
        people_per_image (int): People embedded per image.
        mean_ms (float): Mean milliseconds per person over the timed repetitions.
        median_ms (float): Median milliseconds per person.
        std_ms (float): Standard deviation of the per-person milliseconds.
        repetitions (int): Timed repetitions, warmup excluded.
        flops_per_person (float): Analytic multiply-adds per person.
    """

    pipeline: PipelineId
    batch_size: int = Field(gt=0)
    people_per_image: int = Field(gt=0)
    mean_ms: float = Field(gt=0.0)
    median_ms: float = Field(gt=0.0)
    std_ms: float = Field(ge=0.0)
    repetitions: int = Field(ge=MIN_REPETITIONS)
    flops_per_person: float = Field(ge=0.0)

    @property
    def cell(self) -> tuple[int, int]:
        return (self.batch_size, self.people_per_image)


class SpeedupRatio(FrozenModel):
    """
    Disjoint over joint per-person time at one grid cell; above 1 means the joint model is faster.
    """

    pipeline: PipelineId
    batch_size: int
    people_per_image: int
    ratio: float = Field(gt=0.0)


class SpeedupReport(FrozenModel):
    """
    The timing grid of every pipeline and the ratios of each joint pipeline to `Disj`.

    Attributes:
        points (tuple[BenchPoint, ...]): One point per (pipeline, batch, people) cell.
        ratios (tuple[SpeedupRatio, ...]): One ratio per joint pipeline and grid cell.
    """

    points: tuple[BenchPoint, ...]
    ratios: tuple[SpeedupRatio, ...]

    @model_validator(mode="after")
    def validate_ratios(self) -> Self:
        if any(ratio.pipeline is PipelineId.Disj for ratio in self.ratios):
            raise ValueError("Ratios are taken for joint pipelines only.")
        return self

    @property
    def cells(self) -> int:
        return len(self.points)


class EnvironmentManifest(RecordModel):
    """
    The software and hardware context a benchmark was measured in.
    """

    python: str
    platform: str
    torch: str
    numpy: str
    device: str
    threads: int
    interop_threads: int
    mkldnn: bool
    openmp: bool
    debug_build: bool
