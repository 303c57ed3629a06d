"""
Defines the core domain types of PersonSearch: boxes, annotations, scene records and
dataset manifests, together with the line records of the on-disk manifest format.

Boxes are corner-format floats in absolute pixels. Every other module converts at its own
boundary (feature-map coordinates for ROI pooling, anchor deltas for the detection head).

Manifest file format (UTF-8, one JSON object per line):

    {"format": "person-search-manifest", "version": 1, "name": "domA-train"}
    {"image_ref": "domA/train/00000.png", "width": 256, "height": 256,
     "boxes": [{"x1": 10.0, "y1": 20.0, "x2": 30.0, "y2": 70.0, "id": "p01"}]}

The header line is optional (the manifest is then named after the file stem), `id` is
optional per box and unknown keys are ignored everywhere.
"""

from enum import StrEnum
from typing import Self

from pydantic import Field, computed_field, field_validator, model_validator

from PersonSearch.ValidationModels.BaseModels import FrozenModel, RecordModel

MANIFEST_FORMAT: str = "person-search-manifest"
MANIFEST_VERSION: int = 1


class MergeMode(StrEnum):
    """
    Enumeration of the manifest aggregation modes.

    Attributes:
        detection_only (str): identity labels are stripped, boxes are kept.
        full (str): identity labels are kept, prefixed with the part's manifest name.
    """

    detection_only = "detection-only"
    full = "full"


class BoundingBox(FrozenModel):
    """
    An axis-aligned box in image pixels.

    Attributes:
        x1 (float): Left edge.
        y1 (float): Top edge.
        x2 (float): Right edge, strictly greater than `x1`.
        y2 (float): Bottom edge, strictly greater than `y1`.
    """

    x1: float = Field(allow_inf_nan=False)
    y1: float = Field(allow_inf_nan=False)
    x2: float = Field(allow_inf_nan=False)
    y2: float = Field(allow_inf_nan=False)

    @model_validator(mode="after")
    def validate_corners(self) -> Self:
        """
        Rejects inverted or zero-area boxes.

        Raises:
            ValueError: If `x2 <= x1` or `y2 <= y1`.
        """
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(
                f"Invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2}): corners must satisfy x1 < x2 and y1 < y2."
            )
        return self

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_sequence(cls, values: "list[float] | tuple[float, ...]") -> "BoundingBox":
        """
        Builds a box from an `(x1, y1, x2, y2)` sequence.
        """
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1=x1, y1=y1, x2=x2, y2=y2)


class PersonAnnotation(FrozenModel):
    """
    A person box, optionally labeled with an identity.

    Attributes:
        box (BoundingBox): The person box.
        identity (str | None): Opaque identity label; absent for detection-only annotations.
    """

    box: BoundingBox
    identity: str | None = Field(default=None, min_length=1)


class SceneRecord(FrozenModel):
    """
    One scene image and its annotations.

    Attributes:
        image_ref (str): Path of the image, relative to the manifest directory.
        width (int): Image width in pixels.
        height (int): Image height in pixels.
        annotations (tuple[PersonAnnotation, ...]): Person boxes inside the image.
    """

    image_ref: str = Field(min_length=1)
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    annotations: tuple[PersonAnnotation, ...] = ()

    @model_validator(mode="after")
    def validate_bounds(self) -> Self:
        """
        Ensures every box lies inside `[0, width] x [0, height]`.

        Raises:
            ValueError: If a box crosses the image border.
        """
        for index, annotation in enumerate(self.annotations):
            box = annotation.box
            if box.x1 < 0 or box.y1 < 0 or box.x2 > self.width or box.y2 > self.height:
                raise ValueError(
                    f"Box {index} ({box.x1}, {box.y1}, {box.x2}, {box.y2}) lies outside the "
                    f"{self.width}x{self.height} image."
                )
        return self

    @property
    def boxes(self) -> list[BoundingBox]:
        return [annotation.box for annotation in self.annotations]


class AnnotationRef(FrozenModel):
    """
    Points at one annotation of a manifest.

    Attributes:
        image_ref (str): The scene holding the annotation.
        index (int): Position of the annotation inside the scene record.
    """

    image_ref: str
    index: int = Field(ge=0)


class DatasetManifest(FrozenModel):
    """
    A named set of scene records, the unit of ingestion and aggregation.

    Attributes:
        name (str): The manifest name, used to namespace identities on merge.
        records (tuple[SceneRecord, ...]): The scenes, with unique `image_ref`s.
    """

    name: str = Field(min_length=1)
    records: tuple[SceneRecord, ...] = ()

    @field_validator("records")
    @classmethod
    def validate_unique_refs(
        cls, records: tuple[SceneRecord, ...]
    ) -> tuple[SceneRecord, ...]:
        """
        Rejects manifests holding the same `image_ref` twice.
        """
        seen: set[str] = set()
        for record in records:
            if record.image_ref in seen:
                raise ValueError(f"Duplicate image_ref {record.image_ref!r}.")
            seen.add(record.image_ref)
        return records

    @computed_field
    @property
    def has_identities(self) -> bool:
        """
        True iff at least one annotation carries an identity.
        """
        return any(
            annotation.identity is not None
            for record in self.records
            for annotation in record.annotations
        )

    @property
    def box_count(self) -> int:
        return sum(len(record.annotations) for record in self.records)

    def record(self, image_ref: str) -> SceneRecord:
        """
        Returns the record for `image_ref`.

        Raises:
            KeyError: If the manifest holds no such record.
        """
        for record in self.records:
            if record.image_ref == image_ref:
                return record
        raise KeyError(image_ref)

    def identities(self) -> dict[str, list[AnnotationRef]]:
        """
        Groups the identity-labeled annotations by identity, in manifest order.
        Unlabeled annotations are left out.
        """
        groups: dict[str, list[AnnotationRef]] = {}
        for record in self.records:
            for index, annotation in enumerate(record.annotations):
                if annotation.identity is not None:
                    groups.setdefault(annotation.identity, []).append(
                        AnnotationRef(image_ref=record.image_ref, index=index)
                    )
        return groups


class ManifestHeader(RecordModel):
    """
    Optional first line of a manifest file.
    """

    format: str
    version: int = MANIFEST_VERSION
    name: str


class BoxRecord(RecordModel):
    """
    One box entry of a manifest line.
    """

    x1: float
    y1: float
    x2: float
    y2: float
    id: str | None = None


class SceneLine(RecordModel):
    """
    One scene line of a manifest file.
    """

    image_ref: str
    width: int
    height: int
    boxes: list[BoxRecord] = Field(default_factory=list)

    def to_record(self) -> SceneRecord:
        return SceneRecord(
            image_ref=self.image_ref,
            width=self.width,
            height=self.height,
            annotations=tuple(
                PersonAnnotation(
                    box=BoundingBox(x1=box.x1, y1=box.y1, x2=box.x2, y2=box.y2),
                    identity=box.id,
                )
                for box in self.boxes
            ),
        )

    @classmethod
    def from_record(cls, record: SceneRecord) -> "SceneLine":
        return cls(
            image_ref=record.image_ref,
            width=record.width,
            height=record.height,
            boxes=[
                BoxRecord(
                    x1=annotation.box.x1,
                    y1=annotation.box.y1,
                    x2=annotation.box.x2,
                    y2=annotation.box.y2,
                    id=annotation.identity,
                )
                for annotation in record.annotations
            ],
        )

