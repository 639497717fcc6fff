"""Miscellaneous functions.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import importlib.resources as resources
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Union

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_package_path(package: str = "archdoor") -> Path:
    """Get path to package directory in a src-layout"""
    return resources.files(f"{package}")


def get_asset_path(name: str) -> Path:
    """Path of a file bundled in `archdoor/assets`."""
    return Path(str(get_package_path())) / "assets" / name


def configure_logging(verbosity: int = 0) -> None:
    """Install one stream handler on the `archdoor` logger.

    `verbosity` < 0 shows warnings only, 0 shows info, > 0 shows debug.
    """
    if verbosity < 0:
        level = logging.WARNING
    elif verbosity == 0:
        level = logging.INFO
    else:
        level = logging.DEBUG
    logger = logging.getLogger("archdoor")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    logger.setLevel(level)


def progress_enabled(quiet: bool = False) -> bool:
    """Progress bars only on an interactive stderr."""
    return not quiet and sys.stderr.isatty()


@contextmanager
def atomic_write(path: Union[str, Path], mode: str = "w") -> Iterator:
    """Write `path` through a temporary sibling file renamed into place.

    Readers never see a half-written file; on error the target is untouched.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        encoding = None if "b" in mode else "utf-8"
        with os.fdopen(handle, mode, encoding=encoding) as stream:
            yield stream
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise


def default_output_dir() -> Path:
    """`ARCHDOOR_OUTPUT_DIR` or `./archdoor_output`."""
    return Path(os.environ.get("ARCHDOOR_OUTPUT_DIR", "archdoor_output"))


if __name__ == "__main__":
    print(get_package_path())
