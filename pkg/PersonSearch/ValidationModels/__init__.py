"""
This module serves as a namespace for the validation models used in the PersonSearch library.
Every domain value, configuration section and on-disk record is a pydantic model defined here,
so it is checked once at construction and can be trusted everywhere else.
"""
