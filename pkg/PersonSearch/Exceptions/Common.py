"""
Contains the root exception of the library.
"""


class PersonSearchException(Exception):
    """
    Base class for every error raised by PersonSearch.
    """

    pass


class ConfigException(PersonSearchException):
    """
    Raised when a run configuration cannot be resolved or validated.
    """

    pass


class LockException(PersonSearchException):
    """
    Raised when a lock file is held by another process.
    """

    pass
