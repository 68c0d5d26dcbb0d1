"""
Per-scan preprocessing for both tasks and the model factories the CLI uses.

Detection: load → filter slices → assemble (D, size, size).
Severity: load → filter slices → segment and mask every kept slice →
assemble the dual (32, S, S) / (16, S, S) volumes. Masking happens before
any resizing.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn as nn

from cov3d.concurrency import run_parallel
from cov3d.config import PipelineConfig
from cov3d.data.manifest import DetectionLabel, ManifestEntry, severity_to_class
from cov3d.data.scans import load_scan_for_entry
from cov3d.ensemble import softmax
from cov3d.errors import DataError, ModelError
from cov3d.hash_utils import config_digest, scan_digest
from cov3d.nn.models import (
    DetectionModel,
    SeverityModel,
    detection_forward,
    severity_forward,
)
from cov3d.segmentation import AttentionUNet, apply_mask, segment_lungs
from cov3d.slice_filter import SliceFilterModel, filter_slices
from cov3d.training import TensorData
from cov3d.volume import (
    DualVolume,
    VolumeCache,
    VolumeTensor,
    assemble_dual,
    assemble_volume,
)

logger = logging.getLogger(__name__)

__all__ = [
    "Task",
    "CLASS_NAMES",
    "PreparedScan",
    "Preprocessor",
    "label_for",
    "prepare_scans",
    "to_tensor_data",
    "build_detection_model",
    "build_severity_model",
    "predict_probabilities",
    "weights_digest",
]

Task = Literal["detect", "severity"]

CLASS_NAMES: dict[str, list[str]] = {
    "detect": [label.tag for label in DetectionLabel],
    "severity": [f"severity-{k}" for k in (1, 2, 3, 4)],
}


@dataclass
class PreparedScan:
    entry: ManifestEntry
    volume: VolumeTensor | None = None
    dual: DualVolume | None = None

    @property
    def scan_id(self) -> str:
        return self.entry.scan_id

    @property
    def filter_fallback(self) -> bool:
        source = self.volume if self.volume is not None else self.dual.coarse
        return source.provenance.filter_fallback


def label_for(entry: ManifestEntry, task: Task) -> int | None:
    """Class index of an entry for a task, or None when unlabeled."""
    if task == "detect":
        return None if entry.covid_label is None else int(entry.covid_label)
    return None if entry.severity is None else severity_to_class(entry.severity)


def weights_digest(model: nn.Module | None) -> str:
    if model is None:
        return ""
    return config_digest({k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})


def _flag_fallback(v: VolumeTensor, fallback: bool) -> VolumeTensor:
    provenance = v.provenance.model_copy(update={"filter_fallback": fallback})
    return VolumeTensor(data=v.data, shape=v.shape, provenance=provenance)


class Preprocessor:
    """
    Turns manifest entries into model-ready volumes. Holds loaded filter and
    segmentation models, which are only read, so one instance can serve
    several worker threads.
    """

    def __init__(
        self,
        task: Task,
        pipeline: PipelineConfig,
        root: str | Path,
        filter_model: SliceFilterModel | None = None,
        seg_model: AttentionUNet | None = None,
        cache: VolumeCache | None = None,
    ):
        if task == "severity" and seg_model is None:
            raise ModelError("segmentation model required", stage="severity")
        self.task = task
        self.pipeline = pipeline
        self.root = Path(root)
        self.filter_model = filter_model
        self.seg_model = seg_model
        self.cache = cache
        if filter_model is None:
            logger.warning("No slice filter given; every slice is kept")
        self._model_digests = {
            "filter": weights_digest(filter_model),
            "seg": weights_digest(seg_model),
        }

    def _cache_key(self, entry: ManifestEntry) -> str:
        p = self.pipeline
        params = {
            "task": self.task,
            "scan": scan_digest(self.root / entry.scan_path),
            "depth_resize": p.depth_resize,
            "threshold": p.filter_threshold,
            "models": self._model_digests,
        }
        if self.task == "detect":
            params["shape"] = [p.detection_depth, p.detection_size, p.detection_size]
        else:
            params["spatial"] = p.severity_spatial
        return config_digest(params)

    def _from_cache(self, key: str, entry: ManifestEntry) -> PreparedScan | None:
        if self.task == "detect":
            volume = self.cache.get(key)
            return PreparedScan(entry, volume=volume) if volume is not None else None
        coarse, fine = self.cache.get(f"{key}-coarse"), self.cache.get(f"{key}-fine")
        if coarse is None or fine is None:
            return None
        return PreparedScan(entry, dual=DualVolume(coarse=coarse, fine_depth=fine))

    def _to_cache(self, key: str, prepared: PreparedScan) -> None:
        if prepared.volume is not None:
            self.cache.put(key, prepared.volume)
        else:
            self.cache.put(f"{key}-coarse", prepared.dual.coarse)
            self.cache.put(f"{key}-fine", prepared.dual.fine_depth)

    def prepare(self, entry: ManifestEntry) -> PreparedScan:
        key = self._cache_key(entry) if self.cache is not None else None
        if key is not None:
            cached = self._from_cache(key, entry)
            if cached is not None:
                logger.debug(f"Using cached volumes for {entry.scan_id}")
                return cached

        scan = load_scan_for_entry(self.root, entry, eager=self.pipeline.eager_load)
        slices = scan.read_slices()
        fallback = False
        if self.filter_model is not None:
            result = filter_slices(
                scan, self.filter_model, threshold=self.pipeline.filter_threshold
            )
            slices = slices[result.kept]
            fallback = result.fallback

        p = self.pipeline
        if self.task == "detect":
            volume = assemble_volume(
                slices,
                (p.detection_depth, p.detection_size, p.detection_size),
                method=p.depth_resize,
                scan_id=scan.scan_id,
            )
            prepared = PreparedScan(entry, volume=_flag_fallback(volume, fallback))
        else:
            masked = np.stack(
                [apply_mask(s, segment_lungs(s, self.seg_model)) for s in slices]
            )
            dual = assemble_dual(
                masked, p.severity_spatial, method=p.depth_resize, scan_id=scan.scan_id
            )
            prepared = PreparedScan(
                entry,
                dual=DualVolume(
                    coarse=_flag_fallback(dual.coarse, fallback),
                    fine_depth=_flag_fallback(dual.fine_depth, fallback),
                ),
            )

        if key is not None:
            self._to_cache(key, prepared)
        return prepared


def prepare_scans(
    entries: list[ManifestEntry], preprocessor: Preprocessor, workers: int = 1
) -> list[PreparedScan]:
    """Prepare every entry with at most `workers` scans in flight; order is kept."""
    prepared = run_parallel(preprocessor.prepare, entries, max(1, workers))
    logger.info(f"Prepared {len(prepared)} {preprocessor.task} scans")
    return prepared


def to_tensor_data(prepared: list[PreparedScan], task: Task) -> TensorData:
    """
    Stack prepared scans into model inputs and class labels.

    Raises:
        DataError: If a scan has no label for the task.
    """
    labels = []
    for item in prepared:
        label = label_for(item.entry, task)
        if label is None:
            raise DataError(f"Scan {item.scan_id} has no {task} label")
        labels.append(label)
    targets = torch.as_tensor(labels, dtype=torch.int64)
    if task == "detect":
        inputs = (torch.stack([item.volume.as_tensor() for item in prepared]),)
    else:
        inputs = (
            torch.stack([item.dual.coarse.as_tensor() for item in prepared]),
            torch.stack([item.dual.fine_depth.as_tensor() for item in prepared]),
        )
    return TensorData(inputs, targets)


def build_detection_model(pipeline: PipelineConfig) -> DetectionModel:
    return DetectionModel(
        backbone_id=pipeline.detection_backbone,
        in_depth=pipeline.detection_depth,
        tier=pipeline.backbone_tier,
        pretrained=pipeline.pretrained,
        pretrained_path=pipeline.pretrained_path,
    )


def build_severity_model(pipeline: PipelineConfig, variant: str) -> SeverityModel:
    return SeverityModel(
        backbone_id=variant,
        tier=pipeline.backbone_tier,
        relu_after_fusion=pipeline.relu_after_fusion,
        pretrained=pipeline.pretrained,
        pretrained_path=pipeline.pretrained_path,
    )


@torch.no_grad()
def predict_probabilities(
    model: DetectionModel | SeverityModel,
    prepared: list[PreparedScan],
    batch_size: int = 16,
) -> np.ndarray:
    """(N, K) softmax probabilities of one model over prepared scans."""
    model.eval()
    rows = []
    for start in range(0, len(prepared), batch_size):
        batch = prepared[start : start + batch_size]
        if isinstance(model, SeverityModel):
            coarse = torch.stack([p.dual.coarse.as_tensor() for p in batch])
            fine = torch.stack([p.dual.fine_depth.as_tensor() for p in batch])
            logits = severity_forward(model, (coarse, fine))
        else:
            volumes = torch.stack([p.volume.as_tensor() for p in batch])
            logits = detection_forward(model, volumes)
        rows.append(softmax(logits.double().cpu().numpy()))
    return np.concatenate(rows) if rows else np.zeros((0, model.num_classes))
