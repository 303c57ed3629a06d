"""
Contains exceptions specific to the runtime benchmark.
"""

from PersonSearch.Exceptions.Common import PersonSearchException


class BenchException(PersonSearchException):
    """
    Raised when a timing cannot be trusted.
    """

    pass


class GridMismatchException(BenchException):
    """
    Raised when benchmark points do not cover a common (batch, people) grid.
    """

    pass
