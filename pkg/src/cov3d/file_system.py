"""
File system utilities for cov3d artifacts.
"""

import logging
import os
import uuid
from pathlib import Path
from typing import Union

import aiofiles

from cov3d.errors import Cov3DFileError

__all__ = [
    "create_path",
    "save_to_file",
    "save_to_file_sync",
    "output_exists",
]

logger = logging.getLogger(__name__)


def create_path(
    directory: Path | str,
    filename: str,
    extension: str | None = None,
    dir_exist_ok: bool = True,
    file_exist_ok: bool = False,
) -> Path:
    """
    Create a file path, creating parent directories as needed.

    Args:
        directory: Base directory for the file
        filename: Name of the file, may contain '/'-separated sub directories
        extension: Optional file extension (will override extension in filename if provided)
        dir_exist_ok: Whether to allow the directory to already exist
        file_exist_ok: Whether to allow the file to already exist

    Returns:
        Path object for the created file path

    Raises:
        Cov3DFileError: If directory creation fails or file already exists
    """
    if "/" in filename:
        parts = filename.split("/")
        directory = Path(directory).joinpath(*parts[:-1])
        filename = parts[-1]

    directory = Path(directory)
    name_part, ext_part = os.path.splitext(filename)
    if extension:
        ext_part = f".{extension.lstrip('.')}"

    full_path = directory / f"{name_part}{ext_part}"
    try:
        full_path.parent.mkdir(parents=True, exist_ok=dir_exist_ok)
    except OSError as e:
        raise Cov3DFileError(
            f"Failed to create directory {full_path.parent}: {e}"
        ) from e
    if full_path.exists() and not file_exist_ok:
        raise Cov3DFileError(
            f"File {full_path} already exists and file_exist_ok is False."
        )
    return full_path


def _temp_sibling(path: Path) -> Path:
    return path.with_name(f".{path.name}.{uuid.uuid4().hex[:8]}.tmp")


async def save_to_file(
    content: Union[str, bytes],
    path: Union[str, Path],
    file_exist_ok: bool = True,
) -> Path:
    """
    Asynchronously and atomically write text or bytes to `path`.

    The content goes to a temporary sibling first and is moved into place with
    `os.replace`, so readers never observe a partial file. Text is written as
    UTF-8 with LF line endings untouched.
    """
    target = Path(path)
    try:
        target = create_path(
            target.parent, target.name, file_exist_ok=file_exist_ok
        )
        tmp = _temp_sibling(target)
        mode = "wb" if isinstance(content, bytes) else "w"
        kwargs = {} if isinstance(content, bytes) else {"encoding": "utf-8", "newline": ""}
        async with aiofiles.open(tmp, mode=mode, **kwargs) as f:
            await f.write(content)
        os.replace(tmp, target)
        logger.debug(f"Saved {target}")
        return target
    except Cov3DFileError:
        raise
    except OSError as e:
        raise Cov3DFileError(f"Failed to save file {target}: {e}") from e


def save_to_file_sync(
    content: Union[str, bytes],
    path: Union[str, Path],
    file_exist_ok: bool = True,
) -> Path:
    """Synchronous twin of `save_to_file` for code paths outside an event loop."""
    target = Path(path)
    try:
        target = create_path(
            target.parent, target.name, file_exist_ok=file_exist_ok
        )
        tmp = _temp_sibling(target)
        if isinstance(content, bytes):
            tmp.write_bytes(content)
        else:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write(content)
        os.replace(tmp, target)
        return target
    except Cov3DFileError:
        raise
    except OSError as e:
        raise Cov3DFileError(f"Failed to save file {target}: {e}") from e


def output_exists(*paths: Union[str, Path]) -> bool:
    """True when every given output path already exists."""
    return bool(paths) and all(Path(p).exists() for p in paths)
