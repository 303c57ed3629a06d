"""
Defines base models for Pydantic that enforce the validation rules shared by every
PersonSearch type.

The `FrozenModel` class forbids extra fields and mutation after construction. Domain values
(boxes, annotations, manifests, reports) are immutable once validated, which is what lets
every operation on them be a pure function and safe to share between threads.

The `RecordModel` class is used when parsing external files. It ignores unknown keys so that
manifests and reports written by a newer version of the library stay readable.

The `TensorModel` class allows `torch.Tensor` fields. Tensors are not validated by pydantic;
models that carry them check shapes in their own validators.
"""

from pydantic import BaseModel, ConfigDict


class FrozenModel(BaseModel):
    """
    A base model that forbids extra fields and mutation.

    Example:
        class Size(FrozenModel):
            width: int
            height: int

        # This will work:
        size = Size(width=64, height=64)

        # This will raise a validation error:
        # size = Size(width=64, height=64, depth=3)
    """

    model_config: ConfigDict = ConfigDict(extra="forbid", frozen=True)


class ConfigModel(BaseModel):
    """
    A base model for configuration sections: extra keys are rejected so that a typo in a
    config file or a `--set` flag fails loudly instead of being silently ignored.
    """

    model_config: ConfigDict = ConfigDict(extra="forbid", frozen=True)


class RecordModel(BaseModel):
    """
    A base model for records read from disk. Unknown fields are dropped.
    """

    model_config: ConfigDict = ConfigDict(extra="ignore", frozen=True)


class TensorModel(BaseModel):
    """
    A base model for immutable containers of tensors.
    """

    model_config: ConfigDict = ConfigDict(
        extra="forbid", frozen=True, arbitrary_types_allowed=True
    )
