"""
Contains exceptions specific to box geometry.
"""

from PersonSearch.Exceptions.Common import PersonSearchException


class GeometryException(PersonSearchException, ValueError):
    """
    Raised on degenerate boxes (zero area, non-finite coordinates).
    """

    pass
