import os
from pathlib import Path

from .config.logger import logger


def ensure_directory(path: Path) -> Path:
    """
    Creates a directory (and parents) if it does not already exist.

    Args:
        path (Path): The directory to create.

    Returns:
        Path: The same path, now guaranteed to be a directory.

    Raises:
        NotADirectoryError: If the path exists but is not a directory.
    """
    if path.exists() and not path.is_dir():
        logger.error(f"Error: '{path}' is not a directory.")
        raise NotADirectoryError(f"'{path}' is not a directory.")
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(path: Path, payload: bytes) -> Path:
    """
    Writes bytes so that readers see either the old file or the complete new one.

    Args:
        path (Path): Destination file.
        payload (bytes): Complete file contents.

    Returns:
        Path: The destination path.
    """
    staging = path.with_name(f".{path.name}.tmp")
    with open(staging, "wb") as handle:
        handle.write(payload)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(staging, path)
    return path


def read_corpus_bytes(path: Path) -> bytes:
    if not path.exists():
        logger.error(f"Error: Corpus file '{path}' does not exist.")
        raise FileNotFoundError(f"Corpus file '{path}' does not exist.")
    return path.read_bytes()
