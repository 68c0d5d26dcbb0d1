"""
Fixed-shape input volumes from variable-length slice stacks.

Each slice is first resized to H×W by bilinear interpolation, then the stack
is resampled along the slice axis to depth D. Depth resampling is linear with
endpoint alignment: output slice j samples input position j·(n-1)/(D-1), so
the first and last input slices map to the first and last output slices and
D == n is the identity. For D == 1 the single output is the first slice.
"""

import logging
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import orjson
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from cov3d.errors import DataError
from cov3d.file_system import save_to_file_sync
from cov3d.utils import get_env_path

logger = logging.getLogger(__name__)

__all__ = [
    "COARSE_DEPTH",
    "FINE_DEPTH",
    "CACHE_DIR_ENV",
    "VolumeProvenance",
    "VolumeTensor",
    "DualVolume",
    "NormalizationStats",
    "IDENTITY_STATS",
    "IMAGENET_STATS",
    "assemble_volume",
    "assemble_dual",
    "normalize_volume",
    "VolumeCache",
]

COARSE_DEPTH = 32
FINE_DEPTH = 16
CACHE_DIR_ENV = "COV3D_CACHE_DIR"

DepthResize = Literal["linear", "subsample"]


class VolumeProvenance(BaseModel):
    model_config = ConfigDict(frozen=True)

    scan_id: str = ""
    n_source_slices: int
    interpolation_id: str
    filter_fallback: bool = False


class VolumeTensor(BaseModel):
    """A dense D×H×W float32 volume with its provenance."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray = Field(repr=False)
    shape: tuple[int, int, int]
    provenance: VolumeProvenance

    @model_validator(mode="after")
    def check_data(self) -> "VolumeTensor":
        if self.data.ndim != 3 or tuple(self.data.shape) != tuple(self.shape):
            raise ValueError(
                f"data shape {self.data.shape} does not match declared {self.shape}"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains NaN or Inf values")
        return self

    @property
    def depth(self) -> int:
        return self.shape[0]

    def as_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.data, dtype=np.float32))


class DualVolume(BaseModel):
    """A coarse (D=32) and a fine-depth (D=16) view of the same slice stack."""

    model_config = ConfigDict(frozen=True)

    coarse: VolumeTensor
    fine_depth: VolumeTensor

    @model_validator(mode="after")
    def check_members(self) -> "DualVolume":
        if self.coarse.shape[1:] != self.fine_depth.shape[1:]:
            raise ValueError("coarse and fine_depth volumes differ in spatial size")
        if self.coarse.provenance.scan_id != self.fine_depth.provenance.scan_id:
            raise ValueError("coarse and fine_depth volumes come from different scans")
        return self


class NormalizationStats(BaseModel):
    """Per-channel mean/std; a single value broadcasts to every channel."""

    model_config = ConfigDict(frozen=True)

    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)

    @field_validator("std")
    def validate_std(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("std components must be > 0")
        return v

    @model_validator(mode="after")
    def check_lengths(self) -> "NormalizationStats":
        if len(self.mean) != len(self.std) or not self.mean:
            raise ValueError("mean and std must be non-empty and equally long")
        return self

    @property
    def is_identity(self) -> bool:
        return all(m == 0 for m in self.mean) and all(s == 1 for s in self.std)

    def broadcast(self, channels: int) -> tuple[np.ndarray, np.ndarray]:
        """
        Mean and std as float64 (channels, 1, 1) arrays.

        Raises:
            DataError: When the number of stats matches neither 1 nor `channels`.
        """
        if len(self.mean) not in (1, channels):
            raise DataError(
                f"Stats for {len(self.mean)} channels cannot normalize {channels} channels"
            )
        shape = (channels, 1, 1)
        mean = np.broadcast_to(np.asarray(self.mean, dtype=np.float64)[:, None, None], shape)
        std = np.broadcast_to(np.asarray(self.std, dtype=np.float64)[:, None, None], shape)
        return mean.copy(), std.copy()


IDENTITY_STATS = NormalizationStats()
IMAGENET_STATS = NormalizationStats(mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


def _stack_slices(slices: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    if len(slices) == 0:
        raise DataError("Cannot assemble a volume from an empty slice list")
    if isinstance(slices, np.ndarray):
        if slices.ndim != 3:
            raise DataError(f"Expected an (n, H, W) stack, got shape {slices.shape}")
        return slices.astype(np.float32, copy=False)
    shapes = {np.shape(s) for s in slices}
    if len(shapes) != 1:
        raise DataError(f"Non-uniform slice shapes: {sorted(shapes)}")
    if len(next(iter(shapes))) != 2:
        raise DataError("Slices must be 2D arrays")
    return np.stack([np.asarray(s, dtype=np.float32) for s in slices])


def _resize_spatial(stack: np.ndarray, height: int, width: int) -> np.ndarray:
    if stack.shape[1:] == (height, width):
        return stack
    resized = F.interpolate(
        torch.from_numpy(np.ascontiguousarray(stack))[None],
        size=(height, width),
        mode="bilinear",
        align_corners=False,
    )
    return resized[0].numpy()


def _depth_positions(n: int, depth: int) -> np.ndarray:
    if depth == 1:
        return np.zeros(1)
    return np.linspace(0.0, n - 1, depth)


def _resize_depth(stack: np.ndarray, depth: int, method: DepthResize) -> np.ndarray:
    n = stack.shape[0]
    if n == depth:
        return stack.copy()
    if n == 1:
        return np.repeat(stack, depth, axis=0)

    positions = _depth_positions(n, depth)
    if method == "subsample":
        return stack[np.rint(positions).astype(int)]

    lower = np.minimum(np.floor(positions).astype(int), n - 2)
    frac = (positions - lower)[:, None, None]
    below = stack[lower].astype(np.float64)
    above = stack[lower + 1].astype(np.float64)
    out = (1.0 - frac) * below + frac * above
    return out.astype(np.float32)


def _check_target(target: tuple[int, int, int]) -> None:
    if len(target) != 3 or min(target) < 1:
        raise DataError(f"Target shape must be three dims >= 1, got {target}")


def assemble_volume(
    slices: Sequence[np.ndarray] | np.ndarray,
    target: tuple[int, int, int],
    *,
    method: DepthResize = "linear",
    scan_id: str = "",
) -> VolumeTensor:
    """
    Resize every slice to H×W, then resample the stack to depth D.

    Args:
        slices: Ordered 2D slices (list or (n, H, W) array).
        target: Output shape (D, H, W).
        method: "linear" (endpoint-aligned interpolation) or "subsample"
            (nearest slice at the same positions).
        scan_id: Recorded in the volume's provenance.

    Raises:
        DataError: Empty slice list, non-uniform slice shapes or bad target.
    """
    _check_target(target)
    stack = _stack_slices(slices)
    depth, height, width = target
    data = _resize_depth(_resize_spatial(stack, height, width), depth, method)
    return VolumeTensor(
        data=data,
        shape=(depth, height, width),
        provenance=VolumeProvenance(
            scan_id=scan_id,
            n_source_slices=stack.shape[0],
            interpolation_id=f"bilinear+{method}",
        ),
    )


def assemble_dual(
    slices: Sequence[np.ndarray] | np.ndarray,
    spatial: int,
    *,
    method: DepthResize = "linear",
    scan_id: str = "",
) -> DualVolume:
    """Coarse (32, S, S) and fine-depth (16, S, S) volumes of the same stack."""
    _check_target((COARSE_DEPTH, spatial, spatial))
    stack = _resize_spatial(_stack_slices(slices), spatial, spatial)
    provenance = VolumeProvenance(
        scan_id=scan_id,
        n_source_slices=stack.shape[0],
        interpolation_id=f"bilinear+{method}",
    )
    views = {}
    for name, depth in (("coarse", COARSE_DEPTH), ("fine_depth", FINE_DEPTH)):
        views[name] = VolumeTensor(
            data=_resize_depth(stack, depth, method),
            shape=(depth, spatial, spatial),
            provenance=provenance,
        )
    return DualVolume(**views)


def normalize_volume(v: VolumeTensor, stats: NormalizationStats) -> VolumeTensor:
    """
    Standardize a volume channel-wise: out = (v - mean) / std.

    `stats` holds either one value per channel (slice) or a single value that
    applies to all of them. `InputNormalization` applies the same stats to
    image tensors inside the models.

    Raises:
        DataError: When the number of stats matches neither 1 nor the depth.
    """
    mean, std = stats.broadcast(v.shape[0])
    data = ((v.data.astype(np.float64) - mean) / std).astype(np.float32)
    return VolumeTensor(data=data, shape=v.shape, provenance=v.provenance)


class VolumeCache:
    """
    On-disk cache of assembled volumes: `<key>.f32` holds raw little-endian
    float32 values, `<key>.json` the shape and provenance.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_env(cls) -> "VolumeCache | None":
        root = get_env_path(CACHE_DIR_ENV)
        return cls(root) if root is not None else None

    def _paths(self, key: str) -> tuple[Path, Path]:
        return self.root / f"{key}.f32", self.root / f"{key}.json"

    def get(self, key: str) -> VolumeTensor | None:
        data_path, meta_path = self._paths(key)
        if not (data_path.exists() and meta_path.exists()):
            return None
        try:
            meta = orjson.loads(meta_path.read_bytes())
            shape = tuple(meta["shape"])
            data = np.fromfile(data_path, dtype="<f4").reshape(shape)
            volume = VolumeTensor(
                data=data.astype(np.float32),
                shape=shape,
                provenance=VolumeProvenance(**meta["provenance"]),
            )
        except (OSError, ValueError, KeyError) as e:
            logger.warning(f"Ignoring unreadable cache entry {key}: {e}")
            return None
        logger.debug(f"Volume cache hit {key}")
        return volume

    def put(self, key: str, volume: VolumeTensor) -> None:
        data_path, meta_path = self._paths(key)
        save_to_file_sync(np.ascontiguousarray(volume.data, dtype="<f4").tobytes(), data_path)
        meta = {
            "shape": list(volume.shape),
            "provenance": volume.provenance.model_dump(),
            "interpolation_id": volume.provenance.interpolation_id,
        }
        save_to_file_sync(orjson.dumps(meta, option=orjson.OPT_SORT_KEYS), meta_path)
