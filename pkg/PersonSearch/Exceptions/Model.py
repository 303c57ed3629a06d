"""
Contains exceptions raised by the network modules and checkpoints.
"""

from PersonSearch.Exceptions.Common import PersonSearchException


class ModelException(PersonSearchException):
    """
    Raised on split, shape or channel mismatches and on unreadable checkpoints.
    """

    pass


class DetectionException(PersonSearchException):
    """
    Raised by the detection head utilities (invalid loss inputs, undefined AP).
    """

    pass
