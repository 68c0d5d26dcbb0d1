"""
Model checkpoints: `<name>.pt` holds the torch state dict and metadata,
`<name>.json` repeats the metadata for inspection without torch.
"""

import io
import logging
from pathlib import Path
from typing import Any, Literal

import orjson
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field

from cov3d import __version__
from cov3d.errors import CheckpointError
from cov3d.file_system import save_to_file_sync

logger = logging.getLogger(__name__)

__all__ = [
    "ARCHITECTURES",
    "ModelCheckpoint",
    "checkpoint_paths",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model",
    "checkpoint_from_model",
]

Task = Literal["filter", "seg", "detect", "severity"]

ARCHITECTURES = {
    "slice-filter": "filter",
    "att-unet": "seg",
    "detection": "detect",
    "severity": "severity",
}


class ModelCheckpoint(BaseModel):
    """Weights plus everything needed to rebuild and audit the model."""

    model_config = ConfigDict(arbitrary_types_allowed=True, protected_namespaces=())

    architecture_id: str
    task: Task
    model_args: dict[str, Any]
    num_classes: int
    seed: int
    epochs_run: int = 0
    best_epoch: int | None = None
    final_loss: float | None = None
    metrics: dict[str, float] = Field(default_factory=dict)
    block_shapes: dict[str, list[int]] = Field(default_factory=dict)
    config: dict[str, Any] = Field(default_factory=dict)
    config_digest: str = ""
    code_version: str = __version__
    extra: dict[str, Any] = Field(default_factory=dict)
    state_dict: dict[str, torch.Tensor] = Field(default_factory=dict, repr=False)

    def metadata(self) -> dict[str, Any]:
        return self.model_dump(mode="json", exclude={"state_dict"})

    @property
    def checkpoint_id(self) -> str:
        return self.extra.get("name", f"{self.architecture_id}-seed{self.seed}")


def checkpoint_from_model(
    model: nn.Module,
    *,
    seed: int,
    config: dict[str, Any] | None = None,
    config_digest: str = "",
    **fields: Any,
) -> ModelCheckpoint:
    """Snapshot a model's current weights (copied to cpu) into a checkpoint."""
    architecture_id = getattr(model, "architecture_id", None)
    if architecture_id not in ARCHITECTURES:
        raise CheckpointError(f"Model {type(model).__name__} has no known architecture id")
    block_shapes = model.block_shapes() if hasattr(model, "block_shapes") else {}
    return ModelCheckpoint(
        architecture_id=architecture_id,
        task=ARCHITECTURES[architecture_id],
        model_args=model.model_args(),
        num_classes=model.num_classes,
        seed=seed,
        block_shapes=block_shapes,
        config=config or {},
        config_digest=config_digest,
        state_dict={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        **fields,
    )


def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    """The (`.pt`, `.json`) pair for a checkpoint base path or either file."""
    p = Path(path)
    base = p.with_suffix("") if p.suffix in (".pt", ".json") else p
    return base.with_name(base.name + ".pt"), base.with_name(base.name + ".json")


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> Path:
    """
    Write `<name>.pt` and the `<name>.json` sidecar atomically.

    Returns:
        Path of the `.pt` file.
    """
    pt_path, json_path = checkpoint_paths(path)
    metadata = ckpt.metadata()
    buffer = io.BytesIO()
    torch.save({"metadata": metadata, "state_dict": ckpt.state_dict}, buffer)
    save_to_file_sync(buffer.getvalue(), pt_path)
    save_to_file_sync(
        orjson.dumps(metadata, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS),
        json_path,
    )
    logger.info(f"Saved {ckpt.architecture_id} checkpoint to {pt_path}")
    return pt_path


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    """
    Read a checkpoint from its `.pt` file (or base path).

    Raises:
        CheckpointError: Missing or unreadable file, or inconsistent metadata.
    """
    pt_path, _ = checkpoint_paths(path)
    if not pt_path.exists():
        raise CheckpointError(f"Checkpoint not found: {pt_path}")
    try:
        payload = torch.load(pt_path, map_location="cpu", weights_only=True)
        ckpt = ModelCheckpoint(**payload["metadata"], state_dict=payload["state_dict"])
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {pt_path}: {e}") from e
    if ARCHITECTURES.get(ckpt.architecture_id) != ckpt.task:
        raise CheckpointError(
            f"Checkpoint {pt_path} declares architecture {ckpt.architecture_id!r} "
            f"for task {ckpt.task!r}"
        )
    return ckpt


def restore_model(ckpt: ModelCheckpoint) -> nn.Module:
    """Rebuild the checkpoint's model, load its weights and switch to eval mode."""
    from cov3d.nn.models import DetectionModel, SeverityModel
    from cov3d.segmentation import AttentionUNet
    from cov3d.slice_filter import SliceFilterModel

    builders = {
        "slice-filter": SliceFilterModel.from_args,
        "att-unet": AttentionUNet.from_args,
        "detection": DetectionModel.from_args,
        "severity": SeverityModel.from_args,
    }
    if ckpt.architecture_id not in builders:
        raise CheckpointError(f"Unknown architecture {ckpt.architecture_id!r}")
    try:
        model = builders[ckpt.architecture_id](ckpt.model_args)
        model.load_state_dict(ckpt.state_dict)
    except (KeyError, RuntimeError, TypeError, ValueError) as e:
        raise CheckpointError(
            f"Cannot restore {ckpt.architecture_id} model from checkpoint: {e}"
        ) from e
    model.eval()
    return model
