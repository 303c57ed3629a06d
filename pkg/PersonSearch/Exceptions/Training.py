"""
Contains exceptions specific to the two-step training pipeline.
"""

from PersonSearch.Exceptions.Common import PersonSearchException


class TrainingException(PersonSearchException):
    """
    Raised when a training step cannot start or diverges.
    """

    pass


class StaleCacheException(TrainingException):
    """
    Raised when a feature cache does not match the frozen shared weights.
    """

    pass
