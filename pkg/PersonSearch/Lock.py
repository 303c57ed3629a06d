"""
Provides the lock files guarding run directories and the benchmark harness.

A lock is a file created exclusively; it holds the owner's pid and is removed on release.
Acquisition is retried with backoff while another process holds the file. A lock whose
recorded pid is no longer running was left by a crash and is broken.

Usage:
    ```python
    from PersonSearch.Lock import file_lock

    with file_lock("runs/abc/.lock"):
        ...
    ```
"""

import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import stamina
import structlog

from PersonSearch.Exceptions.Common import LockException

logger = structlog.get_logger()


def _holder_is_gone(path: Path) -> bool:
    """
    Tells whether the pid recorded in the lock file `path` no longer runs.

    A file without a readable pid is still being written and counts as held.
    """
    try:
        pid = int(path.read_text().strip())
    except (FileNotFoundError, ValueError):
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return True
    except PermissionError:
        pass
    return False


@stamina.retry(on=LockException, attempts=5)
def _acquire(path: Path) -> None:
    """
    Creates `path` exclusively.

    Raises:
        PersonSearch.Exceptions.Common.LockException: If a running process holds the file.
    """
    flags = os.O_CREAT | os.O_EXCL | os.O_WRONLY
    try:
        descriptor = os.open(path, flags)
    except FileExistsError as exists_error:
        if not _holder_is_gone(path):
            logger.warning(f"Lock {path} is held by another process.")
            raise LockException(f"Lock {path} is held by another process.") from exists_error
        logger.warning(f"Breaking stale lock {path}.")
        path.unlink(missing_ok=True)
        try:
            descriptor = os.open(path, flags)
        except FileExistsError as race_error:
            logger.warning(f"Lock {path} is held by another process.")
            raise LockException(f"Lock {path} is held by another process.") from race_error
    with os.fdopen(descriptor, "w") as handle:
        handle.write(str(os.getpid()))


@contextmanager
def file_lock(path: str | Path) -> Iterator[Path]:
    """
    Holds the lock file `path` for the duration of the block.

    Raises:
        PersonSearch.Exceptions.Common.LockException: If the lock stays held through every retry.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _acquire(path)
    logger.debug(f"Acquired lock {path}.")
    try:
        yield path
    finally:
        path.unlink(missing_ok=True)
        logger.debug(f"Released lock {path}.")
