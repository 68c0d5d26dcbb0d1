import random
from pathlib import Path

import numpy as np
import pytest
import torch

from cov3d.utils import get_env_bool, get_env_path, resolve_device, seed_everything


class TestGetEnvBool:
    @pytest.mark.parametrize("value", ["true", "1", "YES", "y", "On"])
    def test_true_values(self, monkeypatch, value):
        monkeypatch.setenv("COV3D_TEST_FLAG", value)
        assert get_env_bool("COV3D_TEST_FLAG") is True

    @pytest.mark.parametrize("value", ["false", "0", "no", "N", "off"])
    def test_false_values(self, monkeypatch, value):
        monkeypatch.setenv("COV3D_TEST_FLAG", value)
        assert get_env_bool("COV3D_TEST_FLAG", default=True) is False

    def test_unset_and_unrecognized(self, monkeypatch):
        monkeypatch.delenv("COV3D_TEST_FLAG", raising=False)
        assert get_env_bool("COV3D_TEST_FLAG", default=True) is True
        monkeypatch.setenv("COV3D_TEST_FLAG", "maybe")
        assert get_env_bool("COV3D_TEST_FLAG") is False


def test_get_env_path(monkeypatch, tmp_path):
    monkeypatch.delenv("COV3D_TEST_DIR", raising=False)
    assert get_env_path("COV3D_TEST_DIR") is None
    assert get_env_path("COV3D_TEST_DIR", default=tmp_path) == tmp_path
    monkeypatch.setenv("COV3D_TEST_DIR", str(tmp_path))
    assert get_env_path("COV3D_TEST_DIR") == Path(tmp_path)


def test_seed_everything_repeats_all_rngs():
    g1 = seed_everything(11, deterministic=False)
    first = (random.random(), np.random.rand(), torch.rand(3), torch.rand(2, generator=g1))
    g2 = seed_everything(11, deterministic=False)
    second = (random.random(), np.random.rand(), torch.rand(3), torch.rand(2, generator=g2))
    assert first[0] == second[0]
    assert first[1] == second[1]
    assert torch.equal(first[2], second[2])
    assert torch.equal(first[3], second[3])


def test_resolve_device():
    assert resolve_device("cpu") == torch.device("cpu")
    assert resolve_device(None).type in ("cpu", "cuda")
