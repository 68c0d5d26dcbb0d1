"""
Deterministic synthetic chest-CT datasets for tests and desk-scale training.

Every non-blank slice shows a bright body ellipse holding two dark lung
ellipses whose size follows the slice's position in the stack. Covid scans
carry speckled "lesion" texture inside the lungs; the lesion area fraction is
drawn from the range configured for the scan's severity. Blank, near-zero
slices pad both ends of every stack. Ground truth (lung masks and per-slice
lung labels) is written next to each scan.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import orjson
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic import model_validator
from scipy.ndimage import gaussian_filter
from skimage.draw import ellipse

from cov3d.data.manifest import (
    DetectionLabel,
    Manifest,
    ManifestEntry,
    write_manifest,
)
from cov3d.data.scans import write_image, write_mask
from cov3d.errors import Cov3DFileError, SyntheticSpecError
from cov3d.file_system import save_to_file_sync

logger = logging.getLogger(__name__)

__all__ = [
    "CLASS_KEYS",
    "SyntheticSpec",
    "SyntheticScan",
    "render_scan",
    "generate_synthetic_dataset",
    "slice_labels_path",
    "masks_dir",
]

CLASS_KEYS = ("non-covid", "covid", "1", "2", "3", "4")

BODY_INTENSITY = 0.55
LUNG_INTENSITY = 0.12
LESION_INTENSITY = 0.42
BLANK_MAX = 0.004


def masks_dir(scans_root: Path, scan_id: str) -> Path:
    return scans_root / f"{scan_id}_masks"


def slice_labels_path(scans_root: Path, scan_id: str) -> Path:
    return scans_root / f"{scan_id}_slices.csv"


class SyntheticSpec(BaseModel):
    """Shape of a synthetic dataset; fully determines it together with `seed`."""

    model_config = ConfigDict(extra="forbid")

    n_scans_per_class: dict[str, int] = Field(
        default_factory=lambda: {"non-covid": 4, "covid": 4}
    )
    slice_count_range: tuple[int, int] = (12, 24)
    image_size: tuple[int, int] = (64, 64)
    lesion_fraction_by_severity: dict[int, tuple[float, float]] = Field(
        default_factory=lambda: {
            1: (0.05, 0.15),
            2: (0.20, 0.30),
            3: (0.35, 0.50),
            4: (0.55, 0.75),
        }
    )
    blank_slice_fraction: float = 0.2
    val_fraction: float = 0.0
    noise_std: float = 0.02
    seed: int = 0

    @field_validator("n_scans_per_class")
    def validate_classes(cls, v):
        unknown = set(v) - set(CLASS_KEYS)
        if unknown:
            raise ValueError(
                f"unknown class keys {sorted(unknown)}; use {', '.join(CLASS_KEYS)}"
            )
        if any(n < 0 for n in v.values()):
            raise ValueError("scan counts must be >= 0")
        return v

    @field_validator("slice_count_range")
    def validate_slice_count_range(cls, v):
        lo, hi = v
        if hi < 1 or lo < 1 or lo > hi:
            raise ValueError(f"slice_count_range must satisfy 1 <= min <= max, got {v}")
        return v

    @field_validator("image_size")
    def validate_image_size(cls, v):
        if min(v) < 8:
            raise ValueError("image_size must be at least 8x8")
        return v

    @field_validator("blank_slice_fraction", "val_fraction")
    def validate_fraction(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
        return v

    @field_validator("lesion_fraction_by_severity")
    def validate_lesion_fractions(cls, v):
        if not v:
            raise ValueError("lesion_fraction_by_severity must not be empty")
        if set(v) - {1, 2, 3, 4}:
            raise ValueError("severity keys must be within 1-4")
        previous = None
        for severity in sorted(v):
            lo, hi = v[severity]
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"bad lesion range for severity {severity}: {(lo, hi)}")
            if previous is not None and not (lo > previous[0] and hi > previous[1]):
                raise ValueError("lesion fraction ranges must increase with severity")
            previous = (lo, hi)
        return v

    @model_validator(mode="after")
    def check_severities_have_ranges(self) -> "SyntheticSpec":
        for key, count in self.n_scans_per_class.items():
            if key.isdigit() and count and int(key) not in self.lesion_fraction_by_severity:
                raise ValueError(f"no lesion fraction range for severity {key}")
        return self

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "SyntheticSpec":
        """Validate a raw mapping, raising SyntheticSpecError on a degenerate spec."""
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise SyntheticSpecError(f"Invalid synthetic spec: {e}") from e

    def lesion_range(self, severity: int | None) -> tuple[float, float]:
        if severity is not None:
            return self.lesion_fraction_by_severity[severity]
        ranges = self.lesion_fraction_by_severity.values()
        return min(r[0] for r in ranges), max(r[1] for r in ranges)


@dataclass
class SyntheticScan:
    scan_id: str
    images: np.ndarray  # (n, H, W) float32 in [0, 1]
    lung_masks: np.ndarray  # (n, H, W) bool
    lesion_masks: np.ndarray  # (n, H, W) bool
    is_lung: np.ndarray  # (n,) bool
    detection_label: DetectionLabel
    severity_label: int | None
    lesion_fraction: float


def _lung_slice(
    rng: np.random.Generator,
    height: int,
    width: int,
    position: float,
    lesion_fraction: float,
    noise_std: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    image = np.zeros((height, width), dtype=np.float32)
    rr, cc = ellipse(height / 2, width / 2, 0.42 * height, 0.45 * width, shape=image.shape)
    image[rr, cc] = BODY_INTENSITY

    # lungs are largest mid-stack and shrink towards the ends
    scale = 0.6 + 0.4 * np.sin(np.pi * position)
    lung = np.zeros((height, width), dtype=bool)
    for cx in (0.3 * width, 0.7 * width):
        rr, cc = ellipse(
            height / 2, cx, 0.28 * height * scale, 0.13 * width * scale, shape=image.shape
        )
        lung[rr, cc] = True
    image[lung] = LUNG_INTENSITY

    lesion = np.zeros_like(lung)
    if lesion_fraction > 0 and lung.any():
        field = gaussian_filter(
            rng.standard_normal((height, width)), sigma=max(1.0, height / 32)
        )
        threshold = np.quantile(field[lung], 1.0 - lesion_fraction)
        lesion = lung & (field > threshold)
        image[lesion] = LESION_INTENSITY

    if noise_std > 0:
        image = image + rng.normal(0.0, noise_std, size=image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0), lung, lesion


def render_scan(
    rng: np.random.Generator,
    spec: SyntheticSpec,
    scan_id: str,
    detection_label: DetectionLabel,
    severity_label: int | None = None,
) -> SyntheticScan:
    """Render one synthetic scan in memory; all randomness comes from `rng`."""
    height, width = spec.image_size
    lo, hi = spec.slice_count_range
    n_slices = int(rng.integers(lo, hi + 1))
    n_blank = min(int(round(n_slices * spec.blank_slice_fraction)), n_slices - 1)
    head = n_blank // 2
    n_lung = n_slices - n_blank

    lesion_fraction = 0.0
    if detection_label is DetectionLabel.COVID:
        f_lo, f_hi = spec.lesion_range(severity_label)
        lesion_fraction = float(rng.uniform(f_lo, f_hi))

    images = np.zeros((n_slices, height, width), dtype=np.float32)
    lungs = np.zeros((n_slices, height, width), dtype=bool)
    lesions = np.zeros((n_slices, height, width), dtype=bool)
    is_lung = np.zeros(n_slices, dtype=bool)

    for k in range(n_slices):
        lung_k = k - head
        if 0 <= lung_k < n_lung:
            position = (lung_k + 0.5) / n_lung
            images[k], lungs[k], lesions[k] = _lung_slice(
                rng, height, width, position, lesion_fraction, spec.noise_std
            )
            is_lung[k] = True
        else:
            images[k] = rng.uniform(0.0, BLANK_MAX, size=(height, width))

    return SyntheticScan(
        scan_id=scan_id,
        images=images,
        lung_masks=lungs,
        lesion_masks=lesions,
        is_lung=is_lung,
        detection_label=detection_label,
        severity_label=severity_label,
        lesion_fraction=lesion_fraction,
    )


def _write_scan(scans_root: Path, scan: SyntheticScan) -> None:
    scan_dir = scans_root / scan.scan_id
    mask_dir = masks_dir(scans_root, scan.scan_id)
    for index in range(len(scan.images)):
        write_image(scan.images[index], scan_dir / f"{index}.png")
        write_mask(scan.lung_masks[index], mask_dir / f"{index}.png")
    labels = pd.DataFrame(
        {"index": np.arange(len(scan.images)), "is_lung": scan.is_lung.astype(int)}
    )
    save_to_file_sync(
        labels.to_csv(index=False, lineterminator="\n"),
        slice_labels_path(scans_root, scan.scan_id),
    )


def _class_plan(key: str) -> tuple[str, DetectionLabel, int | None]:
    if key == "non-covid":
        return "noncovid", DetectionLabel.NON_COVID, None
    if key == "covid":
        return "covid", DetectionLabel.COVID, None
    return f"sev{key}", DetectionLabel.COVID, int(key)


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir: str | Path) -> Manifest:
    """
    Write a synthetic dataset and its manifest.

    Layout: `<out>/manifest.csv`, `<out>/scans/<scan_id>/<i>.png`,
    `<out>/scans/<scan_id>_masks/<i>.png`, `<out>/scans/<scan_id>_slices.csv`.
    Within each class the last `round(n * val_fraction)` scans go to the
    validation split.

    Args:
        spec: The dataset specification; output is a pure function of it.
        out_dir: Output directory (created if needed).

    Returns:
        The manifest that was written to `<out>/manifest.csv`.

    Raises:
        Cov3DFileError: On any disk write failure.
    """
    root = Path(out_dir)
    scans_root = root / "scans"
    try:
        scans_root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise Cov3DFileError(f"Cannot create output directory {scans_root}: {e}") from e

    rng = np.random.default_rng(spec.seed)
    entries: list[ManifestEntry] = []
    for key in CLASS_KEYS:
        count = spec.n_scans_per_class.get(key, 0)
        tag, detection_label, severity = _class_plan(key)
        n_val = int(round(count * spec.val_fraction))
        for k in range(count):
            scan_id = f"{tag}_{k:03d}"
            scan = render_scan(rng, spec, scan_id, detection_label, severity)
            _write_scan(scans_root, scan)
            entries.append(
                ManifestEntry(
                    scan_path=f"scans/{scan_id}",
                    split="val" if k >= count - n_val else "train",
                    covid_label=detection_label,
                    severity=severity,
                )
            )
            logger.debug(
                f"Rendered {scan_id}: {len(scan.images)} slices, "
                f"lesion fraction {scan.lesion_fraction:.3f}"
            )

    manifest = Manifest(entries=tuple(entries))
    write_manifest(manifest, root / "manifest.csv")
    save_to_file_sync(
        orjson.dumps(spec.model_dump(mode="json"), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS),
        root / "synthetic_spec.json",
    )
    logger.info(f"Generated {len(entries)} synthetic scans under {root}")
    return manifest
