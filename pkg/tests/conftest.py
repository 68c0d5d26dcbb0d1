from pathlib import Path

import orjson
import pytest

from cov3d.config import load_run_config, run_config_from_mapping
from cov3d.data.synthetic import SyntheticSpec, generate_synthetic_dataset

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Eight detection scans, two of each severity among the covid ones."""
    root = tmp_path_factory.mktemp("synthetic")
    spec = SyntheticSpec(
        n_scans_per_class={"non-covid": 4, "1": 1, "2": 1, "3": 1, "4": 1},
        slice_count_range=(6, 10),
        image_size=(32, 32),
        val_fraction=0.0,
        seed=7,
    )
    manifest = generate_synthetic_dataset(spec, root)
    return root, manifest


@pytest.fixture
def toy_config():
    return run_config_from_mapping(
        {
            "batch_size": 4,
            "epochs": 2,
            "lr0": 1e-3,
            "lr_decay_epochs": [],
            "seed": 3,
            "backbone_tier": "toy",
            "detection_depth": 8,
            "detection_size": 32,
            "severity_spatial": 32,
            "filter_input_size": 32,
            "seg_depth": 2,
            "seg_base_channels": 4,
            "n_bootstrap": 20,
        }
    )


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """The seed-7 dataset of configs/synthetic.json: 60 scans of 64x64 slices."""
    root = tmp_path_factory.mktemp("desk")
    spec = SyntheticSpec.from_mapping(
        orjson.loads((CONFIGS / "synthetic.json").read_bytes())
    )
    manifest = generate_synthetic_dataset(spec, root)
    return root, manifest


@pytest.fixture
def desk_config():
    return load_run_config(CONFIGS / "desk.json")
