"""
Contains exceptions specific to re-identification batches and losses.
"""

from PersonSearch.Exceptions.Common import PersonSearchException


class SamplingException(PersonSearchException):
    """
    Raised when a PK batch cannot be drawn.
    """

    pass


class TripletException(PersonSearchException):
    """
    Raised when a batch violates the triplet-loss preconditions.
    """

    pass
