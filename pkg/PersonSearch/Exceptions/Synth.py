"""
Contains exceptions specific to the synthetic data generator.
"""

from PersonSearch.Exceptions.Common import PersonSearchException


class SynthException(PersonSearchException):
    """
    Raised when a scene cannot be generated.
    """

    pass
