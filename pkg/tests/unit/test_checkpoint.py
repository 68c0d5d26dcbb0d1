import orjson
import pytest
import torch

from cov3d.checkpoint import (
    ModelCheckpoint,
    checkpoint_from_model,
    checkpoint_paths,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from cov3d.errors import CheckpointError
from cov3d.nn.models import DetectionModel, SeverityModel
from cov3d.segmentation import AttentionUNet
from cov3d.slice_filter import SliceFilterModel


def _detection() -> DetectionModel:
    torch.manual_seed(0)
    return DetectionModel(tier="toy", in_depth=4)


def test_paths_from_any_form(tmp_path):
    expected = (tmp_path / "m.pt", tmp_path / "m.json")
    assert checkpoint_paths(tmp_path / "m") == expected
    assert checkpoint_paths(tmp_path / "m.pt") == expected
    assert checkpoint_paths(tmp_path / "m.json") == expected


def test_save_load_restore_same_outputs(tmp_path):
    model = _detection().eval()
    ckpt = checkpoint_from_model(
        model, seed=4, config={"lr0": 1e-4}, metrics={"train_macro_f1": 50.0}
    )
    pt = save_checkpoint(ckpt, tmp_path / "detect")
    assert pt == tmp_path / "detect.pt"

    loaded = load_checkpoint(pt)
    assert loaded.task == "detect"
    assert loaded.seed == 4
    assert loaded.metrics == {"train_macro_f1": 50.0}
    assert loaded.block_shapes == {"block": [3, 4, 3, 3]}

    restored = restore_model(loaded)
    x = torch.rand(2, 4, 16, 16)
    with torch.no_grad():
        assert torch.equal(model(x), restored(x))
    assert not restored.training


def test_sidecar_matches_metadata(tmp_path):
    ckpt = checkpoint_from_model(_detection(), seed=1, extra={"name": "detect_run0"})
    save_checkpoint(ckpt, tmp_path / "detect_run0")
    sidecar = orjson.loads((tmp_path / "detect_run0.json").read_bytes())
    assert sidecar == ckpt.metadata()
    assert "state_dict" not in sidecar
    assert ckpt.checkpoint_id == "detect_run0"


def test_default_checkpoint_id():
    ckpt = checkpoint_from_model(_detection(), seed=3)
    assert ckpt.checkpoint_id == "detection-seed3"


@pytest.mark.parametrize(
    "build",
    [
        lambda: SeverityModel("inception_v3", tier="toy", coarse_depth=4, fine_depth=2),
        lambda: AttentionUNet(depth=2, base_channels=4),
        lambda: SliceFilterModel(tier="toy", input_size=16),
    ],
)
def test_every_architecture_round_trips(tmp_path, build):
    model = build()
    ckpt = checkpoint_from_model(model, seed=0)
    loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "m"))
    restored = restore_model(loaded)
    for key, value in model.state_dict().items():
        assert torch.equal(restored.state_dict()[key], value)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.pt")


def test_corrupt_file(tmp_path):
    (tmp_path / "bad.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="Unreadable"):
        load_checkpoint(tmp_path / "bad.pt")


def test_mismatched_task_rejected(tmp_path):
    ckpt = checkpoint_from_model(_detection(), seed=0)
    ckpt.task = "severity"
    save_checkpoint(ckpt, tmp_path / "m")
    with pytest.raises(CheckpointError, match="declares architecture"):
        load_checkpoint(tmp_path / "m.pt")


def test_wrong_weights_rejected():
    ckpt = checkpoint_from_model(_detection(), seed=0)
    ckpt.model_args["in_depth"] = 8
    with pytest.raises(CheckpointError, match="Cannot restore"):
        restore_model(ckpt)


def test_unknown_architecture():
    ckpt = ModelCheckpoint(
        architecture_id="resnet", task="detect", model_args={}, num_classes=2, seed=0
    )
    with pytest.raises(CheckpointError, match="Unknown architecture"):
        restore_model(ckpt)


def test_model_without_architecture_id():
    with pytest.raises(CheckpointError, match="no known architecture"):
        checkpoint_from_model(torch.nn.Linear(2, 2), seed=0)
