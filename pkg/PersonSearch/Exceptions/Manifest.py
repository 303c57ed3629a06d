"""
Contains exceptions specific to dataset manifests.
"""

from PersonSearch.Exceptions.Common import PersonSearchException


class ManifestException(PersonSearchException):
    """
    Custom exception class for manifest loading, validation and aggregation errors.
    """

    pass
