"""
CT scans stored as directories of numbered 8-bit grayscale slice images.

Slices are ordered by the integer parsed from each file stem (`2.png` comes
before `10.png`) and normalized to [0, 1] when decoded.
"""

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, model_validator

from cov3d.data.manifest import DetectionLabel, ManifestEntry
from cov3d.errors import Cov3DFileError, ScanLoadError

logger = logging.getLogger(__name__)

__all__ = [
    "IMAGE_SUFFIXES",
    "CTScan",
    "load_scan",
    "load_scan_for_entry",
    "read_image",
    "read_mask",
    "write_image",
    "write_mask",
]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def read_image(path: str | Path) -> np.ndarray:
    """Decode a grayscale image to a float32 H×W array in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode in ("I;16", "I;16B", "I;16L"):
                return np.asarray(img, dtype=np.float32) / 65535.0
            return np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except FileNotFoundError as e:
        raise ScanLoadError(f"Image file not found: {path}") from e
    except (UnidentifiedImageError, OSError) as e:
        raise ScanLoadError(f"Cannot decode image {path}: {e}") from e


def read_mask(path: str | Path) -> np.ndarray:
    """Decode a {0,255} mask image to a boolean H×W array."""
    return read_image(path) >= 0.5


def write_image(array: np.ndarray, path: str | Path) -> Path:
    """Encode a [0, 1] array as an 8-bit grayscale PNG."""
    target = Path(path)
    pixels = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(target, format="PNG")
    except OSError as e:
        raise Cov3DFileError(f"Failed to write image {target}: {e}") from e
    return target


def write_mask(mask: np.ndarray, path: str | Path) -> Path:
    """Encode a binary mask as an 8-bit PNG holding 0 and 255."""
    return write_image(np.asarray(mask, dtype=bool).astype(np.float32), path)


class CTScan(BaseModel):
    """An ordered stack of 2D grayscale slices plus optional labels."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    scan_id: str
    slice_paths: list[Path]
    slice_indices: list[int]
    image_size: tuple[int, int]
    detection_label: DetectionLabel | None = None
    severity_label: int | None = None
    pixels: np.ndarray | None = Field(default=None, repr=False)

    @model_validator(mode="after")
    def check_invariants(self) -> "CTScan":
        if not self.slice_paths:
            raise ValueError("a scan needs at least one slice")
        if len(self.slice_indices) != len(self.slice_paths):
            raise ValueError("slice_indices and slice_paths differ in length")
        if any(b <= a for a, b in zip(self.slice_indices, self.slice_indices[1:])):
            raise ValueError("slice indices must be strictly increasing")
        if self.severity_label is not None:
            if self.severity_label not in (1, 2, 3, 4):
                raise ValueError("severity_label must be one of 1-4")
            if self.detection_label is not DetectionLabel.COVID:
                raise ValueError("severity_label requires detection_label == covid")
        if self.pixels is not None:
            expected = (len(self.slice_paths), *self.image_size)
            if self.pixels.shape != expected:
                raise ValueError(f"pixels shape {self.pixels.shape} != {expected}")
        return self

    @property
    def n_slices(self) -> int:
        return len(self.slice_paths)

    def read_slice(self, position: int) -> np.ndarray:
        """Slice at `position` (0-based order, not the file index)."""
        if self.pixels is not None:
            return self.pixels[position]
        try:
            return read_image(self.slice_paths[position])
        except ScanLoadError as e:
            raise ScanLoadError(
                f"Failed to decode slice of scan {self.scan_id}: {e}",
                index=self.slice_indices[position],
            ) from e

    def read_slices(self) -> np.ndarray:
        """All slices as an (n_slices, H, W) float32 array."""
        if self.pixels is not None:
            return self.pixels
        return np.stack([self.read_slice(i) for i in range(self.n_slices)])


def _parse_index(path: Path) -> int:
    try:
        return int(path.stem)
    except ValueError:
        raise ScanLoadError(
            f"Unparsable slice filename {path.name!r}: stem must be an integer"
        ) from None


def load_scan(
    scan_dir: str | Path,
    *,
    eager: bool = True,
    detection_label: DetectionLabel | int | None = None,
    severity_label: int | None = None,
) -> CTScan:
    """
    Load a scan directory of numbered slice images.

    Args:
        scan_dir: Directory holding `<index>.png` files.
        eager: Decode every slice now; otherwise slices decode on access.
        detection_label: Optional covid label attached to the scan.
        severity_label: Optional severity grade attached to the scan.

    Returns:
        The scan, slices sorted by numeric index.

    Raises:
        ScanLoadError: Missing or empty directory, unparsable filename,
            duplicate index, mixed image dimensions or undecodable slice.
    """
    directory = Path(scan_dir)
    if not directory.is_dir():
        raise ScanLoadError(f"Scan directory not found: {directory}")

    files = [
        p
        for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    ]
    if not files:
        raise ScanLoadError(f"Empty scan directory: {directory}")

    indexed = sorted(((_parse_index(p), p) for p in files), key=lambda x: x[0])
    indices = [i for i, _ in indexed]
    paths = [p for _, p in indexed]
    for a, b in zip(indices, indices[1:]):
        if a == b:
            raise ScanLoadError(f"Duplicate slice index in {directory}", index=a)

    sizes = set()
    for index, path in indexed:
        try:
            with Image.open(path) as img:
                sizes.add((img.height, img.width))
        except (UnidentifiedImageError, OSError) as e:
            raise ScanLoadError(f"Cannot read slice {path}: {e}", index=index) from e
    if len(sizes) != 1:
        raise ScanLoadError(
            f"Mixed image dimensions in {directory}: {sorted(sizes)}"
        )
    image_size = sizes.pop()

    pixels = None
    if eager:
        decoded = []
        for index, path in indexed:
            try:
                decoded.append(read_image(path))
            except ScanLoadError as e:
                raise ScanLoadError(str(e), index=index) from e
        pixels = np.stack(decoded)

    scan = CTScan(
        scan_id=directory.name,
        slice_paths=paths,
        slice_indices=indices,
        image_size=image_size,
        detection_label=(
            None if detection_label is None else DetectionLabel(int(detection_label))
        ),
        severity_label=severity_label,
        pixels=pixels,
    )
    logger.debug(f"Loaded scan {scan.scan_id} with {scan.n_slices} slices")
    return scan


def load_scan_for_entry(
    root: str | Path, entry: ManifestEntry, *, eager: bool = True
) -> CTScan:
    """Load the scan a manifest entry points at, relative to the manifest's directory."""
    scan_dir = Path(entry.scan_path)
    if not scan_dir.is_absolute():
        scan_dir = Path(root) / scan_dir
    return load_scan(
        scan_dir,
        eager=eager,
        detection_label=entry.covid_label,
        severity_label=entry.severity,
    )
