"""
This module serves as a namespace for the various exceptions used in the PersonSearch library.
Every exception derives from `PersonSearchException`, so callers (the CLI in particular)
can separate library failures from programming errors with a single `except` clause.
"""
