"""
Defines the header stored in every checkpoint and feature-cache file.
"""

from enum import StrEnum

from pydantic import Field

from PersonSearch.ValidationModels.Backbone import BackboneConfig, SplitConfig
from PersonSearch.ValidationModels.BaseModels import RecordModel
from PersonSearch.ValidationModels.Detect import DetectConfig
from PersonSearch.ValidationModels.Reid import ReidConfig

CHECKPOINT_FORMAT: str = "person-search-checkpoint"
CHECKPOINT_VERSION: int = 1


class ArtifactKind(StrEnum):
    """
    Enumeration of the artifacts written by the training pipeline.
    """

    detection = "detection"
    reid = "reid"
    standalone = "standalone"
    cache = "cache"


class CheckpointHeader(RecordModel):
    """
    Self-description of a checkpoint.

    Attributes:
        format (str): Always `person-search-checkpoint`.
        version (int): Container version.
        kind (ArtifactKind): What the file holds.
        split (SplitConfig | None): Split the weights were trained under; None for the
            standalone extractor.
        backbone (BackboneConfig): Stage widths of the weights.
        detect (DetectConfig): Detection head configuration.
        reid (ReidConfig): Re-ID branch configuration.
        seed (int): Initialization seed.
        checksums (dict[str, str]): SHA-256 of the weight groups (`shared`, `detection`,
            `reid`, `standalone`) the file carries or depends on.
    """

    format: str = CHECKPOINT_FORMAT
    version: int = Field(default=CHECKPOINT_VERSION, ge=1)
    kind: ArtifactKind
    split: SplitConfig | None = None
    backbone: BackboneConfig = BackboneConfig()
    detect: DetectConfig = DetectConfig()
    reid: ReidConfig = ReidConfig()
    seed: int = 0
    checksums: dict[str, str] = Field(default_factory=dict)
