"""
Defines the models of the synthetic data generator: domain descriptions, identity
signatures and benchmark sizes.

A domain fixes the scene statistics (background texture, person scale, noise, colour cast)
and the identity pool. Two domains differing only in those statistics give the
cross-dataset setting: the identity signature of index `i` is the same pattern in both,
rendered under shifted colours.
"""

from enum import StrEnum
from pathlib import Path
from typing import Self

from pydantic import Field, model_validator

from PersonSearch.ValidationModels.BaseModels import ConfigModel, FrozenModel
from PersonSearch.ValidationModels.DataModel import DatasetManifest


class StripeOrientation(StrEnum):
    """
    Enumeration of the stripe directions of an identity pattern.
    """

    horizontal = "horizontal"
    vertical = "vertical"
    diagonal = "diagonal"


class IdentitySignature(FrozenModel):
    """
    The visual signature of an identity.

    Attributes:
        hue (float): Base hue in [0, 1).
        stripe_frequency (float): Stripe cycles across the person box.
        orientation (StripeOrientation): Stripe direction, relative to the box.
    """

    hue: float = Field(ge=0.0, lt=1.0)
    stripe_frequency: float = Field(gt=0.0)
    orientation: StripeOrientation


class DomainSpec(ConfigModel):
    """
    Statistics of one synthetic domain.

    Attributes:
        name (str): Domain name; prefixes identity labels and image paths.
        image_width (int): Scene width in pixels.
        image_height (int): Scene height in pixels.
        background_level (float): Mean background intensity in [0, 1].
        background_contrast (float): Amplitude of the background texture.
        background_frequency (float): Texture cycles across the scene.
        person_height (tuple[float, float]): Range of person box heights in pixels.
        person_aspect (tuple[float, float]): Range of box width over height.
        identity_pool (int): Number of training identities.
        test_identity_pool (int): Number of held-out test identities.
        noise (float): Standard deviation of the additive pixel noise.
        hue_shift (float): Hue offset applied to every identity in this domain.
        color_cast (tuple[float, float, float]): Per-channel additive colour cast.
        unlabeled_fraction (float): Share of people rendered without an identity label.
        signature_seed (int): Seed of the identity signatures; domains sharing it share patterns.
    """

    name: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_]+$")
    image_width: int = Field(default=256, ge=32)
    image_height: int = Field(default=256, ge=32)
    background_level: float = Field(default=0.45, ge=0.0, le=1.0)
    background_contrast: float = Field(default=0.15, ge=0.0, le=0.5)
    background_frequency: float = Field(default=3.0, gt=0.0)
    person_height: tuple[float, float] = (40.0, 80.0)
    person_aspect: tuple[float, float] = (0.35, 0.5)
    identity_pool: int = Field(default=40, ge=2)
    test_identity_pool: int = Field(default=20, ge=2)
    noise: float = Field(default=0.04, ge=0.0, le=0.5)
    hue_shift: float = Field(default=0.0, ge=0.0, lt=1.0)
    color_cast: tuple[float, float, float] = (0.0, 0.0, 0.0)
    unlabeled_fraction: float = Field(default=0.0, ge=0.0, lt=1.0)
    signature_seed: int = 0

    @model_validator(mode="after")
    def validate_scales(self) -> Self:
        low, high = self.person_height
        if not 0 < low <= high:
            raise ValueError(f"Invalid person height range {self.person_height}.")
        if high > self.image_height:
            raise ValueError(
                f"Person height {high} exceeds the image height {self.image_height}."
            )
        aspect_low, aspect_high = self.person_aspect
        if not 0 < aspect_low <= aspect_high:
            raise ValueError(f"Invalid person aspect range {self.person_aspect}.")
        if high * aspect_high > self.image_width:
            raise ValueError(
                f"Person width {high * aspect_high} exceeds the image width {self.image_width}."
            )
        return self

    def identity_label(self, index: int) -> str:
        return f"{self.name}-{index:03d}"

    @property
    def train_identities(self) -> range:
        return range(self.identity_pool)

    @property
    def test_identities(self) -> range:
        return range(self.identity_pool, self.identity_pool + self.test_identity_pool)

    @classmethod
    def reference_pair(cls) -> tuple["DomainSpec", "DomainSpec"]:
        """
        The two bundled domains: a neutral one and a shifted one with a warmer cast, a
        darker finer background and stronger noise.
        """
        return (
            cls(name="domA"),
            cls(
                name="domB",
                background_level=0.3,
                background_contrast=0.25,
                background_frequency=7.0,
                person_height=(36.0, 72.0),
                noise=0.08,
                hue_shift=0.12,
                color_cast=(0.12, 0.02, -0.08),
                unlabeled_fraction=0.1,
            ),
        )


class BenchmarkSizes(ConfigModel):
    """
    Scene counts of a generated benchmark, per domain.

    Attributes:
        detection_scenes (int): Scenes of the detection-only training manifest.
        reid_scenes (int): Scenes of the identity-labeled training manifest.
        test_scenes (int): Scenes of the identity-labeled test manifest.
        min_people (int): Fewest people per scene.
        max_people (int): Most people per scene.
    """

    detection_scenes: int = Field(default=100, ge=1)
    reid_scenes: int = Field(default=100, ge=1)
    test_scenes: int = Field(default=60, ge=1)
    min_people: int = Field(default=2, ge=0)
    max_people: int = Field(default=5, ge=1)

    @model_validator(mode="after")
    def validate_people(self) -> Self:
        if self.min_people > self.max_people:
            raise ValueError(
                f"min_people ({self.min_people}) exceeds max_people ({self.max_people})."
            )
        return self


class DomainSplits(FrozenModel):
    """
    The three manifests generated for one domain.

    Attributes:
        domain (str): The domain name.
        root (Path): Directory the manifests and images live under.
        detection_train (DatasetManifest): Boxes without identities.
        reid_train (DatasetManifest): Identity-labeled training scenes.
        test (DatasetManifest): Identity-labeled scenes of held-out identities.
    """

    domain: str
    root: Path
    detection_train: DatasetManifest
    reid_train: DatasetManifest
    test: DatasetManifest
