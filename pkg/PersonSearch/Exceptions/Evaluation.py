"""
Contains exceptions specific to the evaluation protocols and report tables.
"""

from PersonSearch.Exceptions.Common import PersonSearchException


class EvaluationException(PersonSearchException):
    """
    Raised when a protocol cannot be scored.
    """

    pass


class ReportException(PersonSearchException):
    """
    Raised when reports from several runs cannot be laid out side by side.
    """

    pass
