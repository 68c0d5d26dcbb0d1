"""Per-slice lung labels and segmentation pairs for filter/segmenter training."""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from cov3d.data.manifest import Manifest, Split
from cov3d.data.scans import read_image, read_mask
from cov3d.data.synthetic import masks_dir, slice_labels_path
from cov3d.errors import DataError

logger = logging.getLogger(__name__)

__all__ = [
    "read_slice_labels",
    "load_labeled_slices",
    "read_pair_listing",
    "load_segmentation_pairs",
    "dataset_segmentation_pairs",
]


def read_slice_labels(path: str | Path) -> dict[int, bool]:
    """Read an `index,is_lung` CSV."""
    try:
        frame = pd.read_csv(path, dtype={"index": int, "is_lung": int})
    except FileNotFoundError as e:
        raise DataError(f"Slice label file not found: {path}") from e
    except (ValueError, pd.errors.ParserError) as e:
        raise DataError(f"Malformed slice label file {path}: {e}") from e
    if list(frame.columns) != ["index", "is_lung"]:
        raise DataError(f"Slice label file {path} must have columns index,is_lung")
    return {int(i): bool(v) for i, v in zip(frame["index"], frame["is_lung"])}


def load_labeled_slices(
    manifest: Manifest, root: str | Path, split: Split | None = "train"
) -> tuple[np.ndarray, np.ndarray]:
    """
    Collect (slice, is_lung) training samples for every scan of a split that
    has a `<scan_id>_slices.csv` next to its directory.

    Returns:
        Slices as (N, H, W) float32 and labels as (N,) int64 (1 = lung).
    """
    images: list[np.ndarray] = []
    labels: list[int] = []
    for entry in manifest.select(split):
        scan_dir = Path(root) / entry.scan_path
        label_file = slice_labels_path(scan_dir.parent, entry.scan_id)
        if not label_file.exists():
            logger.debug(f"No slice labels for {entry.scan_id}, skipping")
            continue
        for index, is_lung in read_slice_labels(label_file).items():
            images.append(read_image(scan_dir / f"{index}.png"))
            labels.append(int(is_lung))
    if not images:
        return np.zeros((0, 1, 1), dtype=np.float32), np.zeros(0, dtype=np.int64)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def read_pair_listing(path: str | Path) -> list[tuple[Path, Path]]:
    """Read a `slice_path,mask_path` CSV; relative paths resolve against its directory."""
    listing = Path(path)
    try:
        frame = pd.read_csv(listing, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise DataError(f"Pair listing not found: {listing}") from e
    if list(frame.columns) != ["slice_path", "mask_path"]:
        raise DataError(f"Pair listing {listing} must have columns slice_path,mask_path")
    base = listing.parent

    def _resolve(p: str) -> Path:
        return Path(p) if Path(p).is_absolute() else base / p

    return [
        (_resolve(s), _resolve(m))
        for s, m in zip(frame["slice_path"], frame["mask_path"])
    ]


def load_segmentation_pairs(
    pairs: list[tuple[Path, Path]],
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(read_image(s), read_mask(m)) for s, m in pairs]


def dataset_segmentation_pairs(
    manifest: Manifest,
    root: str | Path,
    split: Split | None = "train",
    lung_only: bool = True,
) -> list[tuple[Path, Path]]:
    """(slice, mask) path pairs from a dataset that ships `<scan_id>_masks/`."""
    pairs: list[tuple[Path, Path]] = []
    for entry in manifest.select(split):
        scan_dir = Path(root) / entry.scan_path
        mask_dir = masks_dir(scan_dir.parent, entry.scan_id)
        if not mask_dir.is_dir():
            continue
        labels_file = slice_labels_path(scan_dir.parent, entry.scan_id)
        labels = read_slice_labels(labels_file) if labels_file.exists() else {}
        for mask_path in sorted(mask_dir.glob("*.png"), key=lambda p: int(p.stem)):
            index = int(mask_path.stem)
            if lung_only and not labels.get(index, True):
                continue
            pairs.append((scan_dir / f"{index}.png", mask_path))
    return pairs
