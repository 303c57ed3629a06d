"""
Defines the models of the re-identification branch: embeddings, PK batch and triplet-loss
configuration, and the shape options of the embedding head.
"""

import math
from typing import Self

import numpy as np
import torch
from pydantic import Field, model_validator

from PersonSearch.ValidationModels.BaseModels import ConfigModel, FrozenModel

UNIT_NORM_TOLERANCE: float = 1e-5


class Embedding(FrozenModel):
    """
    An L2-normalized re-ID vector.

    Attributes:
        vector (tuple[float, ...]): The embedding, of unit Euclidean norm.
    """

    vector: tuple[float, ...] = Field(min_length=1)

    @model_validator(mode="after")
    def validate_norm(self) -> Self:
        if not all(math.isfinite(value) for value in self.vector):
            raise ValueError("Embedding entries must be finite.")
        norm = math.sqrt(sum(value * value for value in self.vector))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValueError(f"Embedding norm {norm} is not 1 within {UNIT_NORM_TOLERANCE}.")
        return self

    @property
    def dim(self) -> int:
        return len(self.vector)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vector, dtype=np.float64)

    @classmethod
    def from_tensor(cls, vector: torch.Tensor) -> "Embedding":
        return cls(vector=tuple(float(value) for value in vector.detach().cpu().tolist()))


class PKConfig(ConfigModel):
    """
    Shape of an identity-balanced batch.

    Attributes:
        P (int): Identities per batch.
        K (int): Shots per identity.
    """

    P: int = Field(default=32, ge=2)
    K: int = Field(default=4, ge=2)

    @property
    def batch_size(self) -> int:
        return self.P * self.K


class TripletConfig(ConfigModel):
    """
    Triplet-loss parameters. Distances are squared Euclidean on the embeddings.

    Attributes:
        margin (float): Hinge margin.
    """

    margin: float = Field(default=0.3, gt=0.0, allow_inf_nan=False)


class ReidConfig(ConfigModel):
    """
    Shape options of the re-ID branch and of the standalone extractor.

    Attributes:
        embedding_dim (int): Dimension D of the embeddings.
        pool_height (int): ROI-pooling output height.
        pool_width (int): ROI-pooling output width.
        crop_height (int): Height crops are resized to for the standalone extractor.
        crop_width (int): Width crops are resized to for the standalone extractor.
    """

    embedding_dim: int = Field(default=64, gt=0)
    pool_height: int = Field(default=4, ge=1)
    pool_width: int = Field(default=4, ge=1)
    crop_height: int = Field(default=128, ge=32)
    crop_width: int = Field(default=64, ge=32)
