import hashlib
from pathlib import Path
from typing import Any

import numpy as np
import orjson
from pydantic import BaseModel as PydanticBaseModel

__all__ = ("canonical_form", "config_digest", "file_digest", "scan_digest")

# --- Canonical Representation Generator ---
_PRIMITIVE_TYPES = (str, int, float, bool, type(None))
_TYPE_MARKER_DICT = "dict"
_TYPE_MARKER_LIST = "list"
_TYPE_MARKER_TUPLE = "tuple"
_TYPE_MARKER_SET = "set"
_TYPE_MARKER_PYDANTIC = "model"  # Distinguishes dumped Pydantic models
_TYPE_MARKER_ARRAY = "array"

_CHUNK_SIZE = 1 << 20


def canonical_form(item: Any) -> Any:
    """
    Recursively converts a Python object into a stable, JSON-serializable
    representation. Logically identical inputs (dicts with different key
    orders, sets in different iteration orders) map to the same value, so the
    SHA-256 of its JSON encoding is stable across processes and machines.
    """
    if isinstance(item, _PRIMITIVE_TYPES):
        return item

    if isinstance(item, Path):
        return item.as_posix()

    if isinstance(item, PydanticBaseModel):
        return [_TYPE_MARKER_PYDANTIC, canonical_form(item.model_dump(mode="json"))]

    if isinstance(item, np.ndarray):
        return [
            _TYPE_MARKER_ARRAY,
            list(item.shape),
            str(item.dtype),
            hashlib.sha256(np.ascontiguousarray(item).tobytes()).hexdigest(),
        ]

    if isinstance(item, dict):
        return [
            _TYPE_MARKER_DICT,
            [
                [str(k), canonical_form(v)]
                for k, v in sorted(item.items(), key=lambda x: str(x[0]))
            ],
        ]

    if isinstance(item, list):
        return [_TYPE_MARKER_LIST, [canonical_form(elem) for elem in item]]

    if isinstance(item, tuple):
        return [_TYPE_MARKER_TUPLE, [canonical_form(elem) for elem in item]]

    if isinstance(item, (set, frozenset)):
        try:
            sorted_elements = sorted(item)
        except TypeError:
            sorted_elements = sorted(item, key=lambda x: (str(type(x)), str(x)))
        return [_TYPE_MARKER_SET, [canonical_form(elem) for elem in sorted_elements]]

    return str(item)


def config_digest(data: Any) -> str:
    """
    Computes a SHA-256 hex digest of any config-like object (dicts, pydantic
    models, lists, tuples, sets, numpy arrays and primitives).

    Args:
        data: The object to digest.

    Returns:
        A 64-character hex digest, independent of dict key order.
    """
    return hashlib.sha256(orjson.dumps(canonical_form(data))).hexdigest()


def file_digest(path: str | Path) -> str:
    """SHA-256 hex digest of a file's bytes."""
    sha = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(_CHUNK_SIZE):
            sha.update(chunk)
    return sha.hexdigest()


def scan_digest(scan_dir: str | Path) -> str:
    """
    SHA-256 over every file of a scan directory, in sorted relative-path
    order. Each file contributes its relative path and its own digest.
    """
    root = Path(scan_dir)
    sha = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        sha.update(path.relative_to(root).as_posix().encode("utf-8"))
        sha.update(file_digest(path).encode("ascii"))
    return sha.hexdigest()
