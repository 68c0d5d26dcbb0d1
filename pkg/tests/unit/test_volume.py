import numpy as np
import pytest

from cov3d.errors import DataError
from cov3d.volume import (
    IDENTITY_STATS,
    DualVolume,
    NormalizationStats,
    VolumeCache,
    VolumeProvenance,
    VolumeTensor,
    assemble_dual,
    assemble_volume,
    normalize_volume,
)


def _constant_slices(values, size=4):
    return [np.full((size, size), v, dtype=np.float32) for v in values]


class TestAssembleVolume:
    def test_identity_when_depth_and_size_match(self):
        rng = np.random.default_rng(0)
        slices = rng.random((64, 24, 24), dtype=np.float32)
        v = assemble_volume(list(slices), (64, 24, 24))
        assert np.array_equal(v.data, slices)
        assert v.shape == (64, 24, 24)

    def test_endpoints_align(self):
        v = assemble_volume(_constant_slices([0.0, 0.5, 1.0]), (2, 4, 4))
        assert np.allclose(v.data[:, 0, 0], [0.0, 1.0])

    def test_linear_interpolation_positions(self):
        v = assemble_volume(_constant_slices([0, 0.25, 0.5, 0.75, 1.0]), (3, 4, 4))
        assert np.allclose(v.data[:, 0, 0], [0.0, 0.5, 1.0])

    def test_upsampling_interpolates(self):
        v = assemble_volume(_constant_slices([0.0, 1.0]), (5, 4, 4))
        assert np.allclose(v.data[:, 0, 0], [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_single_slice_repeats(self):
        v = assemble_volume(_constant_slices([0.3]), (4, 4, 4))
        assert np.allclose(v.data, 0.3)

    def test_depth_one_takes_first_slice(self):
        v = assemble_volume(_constant_slices([0.2, 0.9]), (1, 4, 4))
        assert np.allclose(v.data, 0.2)

    def test_subsample_picks_nearest(self):
        v = assemble_volume(
            _constant_slices([0, 1, 2, 3, 4, 5, 6]), (3, 4, 4), method="subsample"
        )
        assert np.array_equal(v.data[:, 0, 0], [0.0, 3.0, 6.0])

    def test_spatial_resize_and_dtype(self):
        rng = np.random.default_rng(1)
        v = assemble_volume(rng.random((10, 50, 40)), (8, 16, 16), scan_id="s")
        assert v.data.shape == (8, 16, 16)
        assert v.data.dtype == np.float32
        assert v.provenance == VolumeProvenance(
            scan_id="s", n_source_slices=10, interpolation_id="bilinear+linear"
        )

    def test_no_overshoot_and_scale_equivariance(self):
        rng = np.random.default_rng(2)
        slices = rng.random((13, 20, 20)).astype(np.float32)
        v = assemble_volume(slices, (7, 9, 9))
        assert v.data.min() >= slices.min() - 1e-6
        assert v.data.max() <= slices.max() + 1e-6
        scaled = assemble_volume(slices * 2.0, (7, 9, 9))
        assert np.allclose(scaled.data, 2.0 * v.data, atol=1e-5)

    def test_deterministic(self):
        slices = np.random.default_rng(3).random((9, 12, 12))
        a = assemble_volume(slices, (4, 6, 6))
        b = assemble_volume(slices, (4, 6, 6))
        assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize(
        "slices, target",
        [
            ([], (4, 4, 4)),
            ([np.zeros((4, 4)), np.zeros((4, 5))], (4, 4, 4)),
            ([np.zeros((4, 4))], (0, 4, 4)),
            ([np.zeros(4)], (2, 4, 4)),
        ],
    )
    def test_rejects_bad_input(self, slices, target):
        with pytest.raises(DataError):
            assemble_volume(slices, target)


class TestAssembleDual:
    def test_shapes(self):
        dual = assemble_dual(np.random.default_rng(0).random((40, 20, 20)), 12)
        assert dual.coarse.shape == (32, 12, 12)
        assert dual.fine_depth.shape == (16, 12, 12)

    def test_fine_depth_identity_at_sixteen(self):
        slices = np.random.default_rng(1).random((16, 10, 10)).astype(np.float32)
        dual = assemble_dual(slices, 10)
        assert np.array_equal(dual.fine_depth.data, slices)

    def test_endpoints_match_between_views(self):
        slices = np.random.default_rng(2).random((64, 8, 8)).astype(np.float32)
        dual = assemble_dual(slices, 8)
        assert np.allclose(dual.coarse.data[0], dual.fine_depth.data[0])
        assert np.allclose(dual.coarse.data[-1], dual.fine_depth.data[-1])

    def test_members_must_agree(self):
        a = assemble_volume(_constant_slices([0, 1], size=4), (32, 4, 4), scan_id="a")
        b = assemble_volume(_constant_slices([0, 1], size=6), (16, 6, 6), scan_id="a")
        with pytest.raises(ValueError):
            DualVolume(coarse=a, fine_depth=b)


class TestNormalize:
    def test_identity_stats(self):
        v = assemble_volume(_constant_slices([0.1, 0.7]), (2, 4, 4))
        assert np.array_equal(normalize_volume(v, IDENTITY_STATS).data, v.data)
        assert IDENTITY_STATS.is_identity

    def test_centering_and_arithmetic(self):
        v = assemble_volume(_constant_slices([1.0, 1.0, 1.0]), (3, 4, 4))
        stats = NormalizationStats(mean=(0.5,), std=(0.25,))
        assert np.allclose(normalize_volume(v, stats).data, 2.0)
        centered = NormalizationStats(mean=(1.0, 1.0, 1.0), std=(1.0, 2.0, 3.0))
        assert np.allclose(normalize_volume(v, centered).data, 0.0)

    def test_zero_std_rejected(self):
        with pytest.raises(ValueError):
            NormalizationStats(mean=(0.0,), std=(0.0,))

    def test_channel_count_mismatch(self):
        v = assemble_volume(_constant_slices([0.0, 1.0]), (4, 4, 4))
        with pytest.raises(DataError):
            normalize_volume(v, NormalizationStats(mean=(0, 0, 0), std=(1, 1, 1)))


def test_volume_tensor_rejects_nan_and_shape():
    data = np.zeros((2, 3, 3), dtype=np.float32)
    provenance = VolumeProvenance(n_source_slices=2, interpolation_id="x")
    with pytest.raises(ValueError):
        VolumeTensor(data=data, shape=(2, 3, 4), provenance=provenance)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        VolumeTensor(data=data, shape=(2, 3, 3), provenance=provenance)


class TestVolumeCache:
    def test_put_get(self, tmp_path):
        cache = VolumeCache(tmp_path)
        v = assemble_volume(np.random.default_rng(0).random((5, 6, 6)), (3, 6, 6), scan_id="c")
        cache.put("key", v)
        back = cache.get("key")
        assert np.array_equal(back.data, v.data)
        assert back.provenance == v.provenance
        assert (tmp_path / "key.f32").stat().st_size == 3 * 6 * 6 * 4

    def test_miss_and_corrupt(self, tmp_path):
        cache = VolumeCache(tmp_path)
        assert cache.get("absent") is None
        (tmp_path / "bad.f32").write_bytes(b"\x00" * 7)
        (tmp_path / "bad.json").write_text('{"shape": [1, 2, 2], "provenance": {}}')
        assert cache.get("bad") is None

    def test_from_env(self, monkeypatch, tmp_path):
        monkeypatch.delenv("COV3D_CACHE_DIR", raising=False)
        assert VolumeCache.from_env() is None
        monkeypatch.setenv("COV3D_CACHE_DIR", str(tmp_path / "cache"))
        assert VolumeCache.from_env().root == tmp_path / "cache"
