"""
Dataset representation: manifests, scan directories and synthetic datasets.
"""

from cov3d.data.ground_truth import (
    dataset_segmentation_pairs,
    load_labeled_slices,
    load_segmentation_pairs,
    read_pair_listing,
    read_slice_labels,
)
from cov3d.data.manifest import (
    DetectionLabel,
    Manifest,
    ManifestEntry,
    class_to_severity,
    load_manifest,
    severity_to_class,
    write_manifest,
)
from cov3d.data.scans import CTScan, load_scan, load_scan_for_entry, read_image
from cov3d.data.synthetic import SyntheticSpec, generate_synthetic_dataset, render_scan

__all__ = [
    "CTScan",
    "DetectionLabel",
    "Manifest",
    "ManifestEntry",
    "SyntheticSpec",
    "class_to_severity",
    "dataset_segmentation_pairs",
    "generate_synthetic_dataset",
    "load_labeled_slices",
    "load_manifest",
    "load_scan",
    "load_scan_for_entry",
    "load_segmentation_pairs",
    "read_image",
    "read_pair_listing",
    "read_slice_labels",
    "render_scan",
    "severity_to_class",
    "write_manifest",
]
