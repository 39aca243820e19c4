"""Utility functions for artifact I/O."""

import csv
import hashlib
import io
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, List, Sequence, Union

import numpy as np
from PIL import Image

from .constants import LOCK_NAME
from .exceptions import ArtifactIOError, OutputLockedError

logger = logging.getLogger(__name__)


def sha256_hex(data: bytes, length: int = 16) -> str:
    """Short hex digest of some bytes.

    Args:
        data: Bytes to hash
        length: Number of hex characters to keep

    Returns:
        Truncated sha256 hex digest
    """
    return hashlib.sha256(data).hexdigest()[:length]


def atomic_write(path: Union[str, Path], data: bytes) -> Path:
    """Write bytes to a temporary sibling, then rename over the target.

    Args:
        path: Destination file
        data: Complete file contents

    Returns:
        The destination path

    Raises:
        ArtifactIOError: If the write or rename fails
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(tmp_name, path)
        except BaseException:
            Path(tmp_name).unlink(missing_ok=True)
            raise
    except OSError as e:
        raise ArtifactIOError(str(path), e)
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """UTF-8 text form of `atomic_write`."""
    return atomic_write(path, text.encode("utf-8"))


def csv_text(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    """Render rows as CSV with a header row and '\\n' line endings."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    """Atomically write a CSV file with a header row."""
    return atomic_write_text(path, csv_text(header, rows))


def read_csv(path: Union[str, Path]) -> List[dict]:
    """Read a CSV file written by `write_csv` into dict rows."""
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))
    except OSError as e:
        raise ArtifactIOError(str(path), e)


def append_csv_row(path: Union[str, Path], header: Sequence[str], row: Sequence[str]) -> None:
    """Append one row, writing the header first if the file is new."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            if new:
                writer.writerow(header)
            writer.writerow(row)
    except OSError as e:
        raise ArtifactIOError(str(path), e)


def image_to_bytes(image: np.ndarray) -> bytes:
    """Encode a [0,1] grayscale image as binary PGM (P5, maxval 255).

    Args:
        image: 2-D array with values in [0, 1]

    Returns:
        PGM file bytes
    """
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PPM")
    return buffer.getvalue()


def write_pgm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Atomically write a [0,1] grayscale image as binary PGM."""
    return atomic_write(path, image_to_bytes(image))


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a PGM file back to a float32 array in [0, 1]."""
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("L"), dtype=np.float32)
    except OSError as e:
        raise ArtifactIOError(str(path), e)
    return pixels / 255.0


@contextmanager
def output_lock(output_dir: Union[str, Path]) -> Iterator[Path]:
    """Hold an exclusive lock file in the output directory.

    Raises:
        OutputLockedError: If the lock file already exists
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    lock_path = output_dir / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLockedError(str(lock_path))
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        logger.debug(f"Acquired lock {lock_path}")
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)
        logger.debug(f"Released lock {lock_path}")
