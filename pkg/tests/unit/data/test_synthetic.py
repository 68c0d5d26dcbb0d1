import numpy as np
import pytest

from cov3d.data.ground_truth import (
    dataset_segmentation_pairs,
    load_labeled_slices,
    load_segmentation_pairs,
    read_pair_listing,
    read_slice_labels,
)
from cov3d.data.manifest import DetectionLabel, load_manifest
from cov3d.data.scans import load_scan
from cov3d.data.synthetic import (
    SyntheticSpec,
    generate_synthetic_dataset,
    masks_dir,
    render_scan,
    slice_labels_path,
)
from cov3d.errors import DataError, SyntheticSpecError
from cov3d.hash_utils import file_digest, scan_digest


def _spec(**kwargs) -> SyntheticSpec:
    base = dict(
        n_scans_per_class={"non-covid": 2, "covid": 1, "2": 1},
        slice_count_range=(5, 8),
        image_size=(24, 24),
        seed=7,
    )
    base.update(kwargs)
    return SyntheticSpec(**base)


def test_same_seed_is_byte_identical(tmp_path):
    m1 = generate_synthetic_dataset(_spec(), tmp_path / "a")
    m2 = generate_synthetic_dataset(_spec(), tmp_path / "b")
    assert m1 == m2
    assert file_digest(tmp_path / "a" / "manifest.csv") == file_digest(
        tmp_path / "b" / "manifest.csv"
    )
    assert scan_digest(tmp_path / "a" / "scans") == scan_digest(tmp_path / "b" / "scans")


def test_different_seed_differs(tmp_path):
    generate_synthetic_dataset(_spec(seed=1), tmp_path / "a")
    generate_synthetic_dataset(_spec(seed=2), tmp_path / "b")
    assert scan_digest(tmp_path / "a" / "scans") != scan_digest(tmp_path / "b" / "scans")


def test_severity_counts_from_written_manifest(tmp_path):
    spec = _spec(n_scans_per_class={k: 10 for k in ("1", "2", "3", "4")}, image_size=(16, 16))
    generate_synthetic_dataset(spec, tmp_path)
    manifest = load_manifest(tmp_path / "manifest.csv")
    assert manifest.severity_counts("train") == (10, 10, 10, 10)
    assert all(e.covid_label is DetectionLabel.COVID for e in manifest.entries)


def test_no_blank_slices_means_all_lung(tmp_path):
    manifest = generate_synthetic_dataset(_spec(blank_slice_fraction=0.0), tmp_path)
    for entry in manifest.entries:
        labels = read_slice_labels(slice_labels_path(tmp_path / "scans", entry.scan_id))
        assert all(labels.values())


def test_val_fraction_assigns_last_scans(tmp_path):
    spec = _spec(n_scans_per_class={"non-covid": 5, "covid": 5}, val_fraction=0.2)
    manifest = generate_synthetic_dataset(spec, tmp_path)
    assert manifest.class_counts["val"] == {"covid": 1, "non-covid": 1}
    assert manifest.class_counts["train"] == {"covid": 4, "non-covid": 4}


class TestRenderedGroundTruth:
    @pytest.fixture
    def scan(self):
        rng = np.random.default_rng(3)
        return render_scan(rng, _spec(), "sev3", DetectionLabel.COVID, severity_label=3)

    def test_lesions_inside_lungs(self, scan):
        assert np.all(scan.lesion_masks <= scan.lung_masks)
        assert scan.lesion_masks.any()

    def test_blank_slices_are_dark(self, scan):
        means = scan.images.mean(axis=(1, 2))
        assert set(np.flatnonzero(~scan.is_lung)) == set(np.flatnonzero(means < 0.01))

    def test_lesion_fraction_in_severity_range(self, scan):
        lo, hi = _spec().lesion_fraction_by_severity[3]
        assert lo <= scan.lesion_fraction <= hi

    def test_non_covid_has_no_lesions(self):
        rng = np.random.default_rng(0)
        scan = render_scan(rng, _spec(), "n", DetectionLabel.NON_COVID)
        assert not scan.lesion_masks.any()
        assert scan.lesion_fraction == 0.0


@pytest.mark.parametrize(
    "data",
    [
        {"slice_count_range": [0, 0]},
        {"slice_count_range": [5, 3]},
        {"blank_slice_fraction": 1.5},
        {"n_scans_per_class": {"mild": 2}},
        {"lesion_fraction_by_severity": {"1": [0.5, 0.6], "2": [0.1, 0.2]}},
        {"image_size": [4, 4]},
        {"unknown_field": 1},
    ],
)
def test_degenerate_specs_rejected(data):
    with pytest.raises(SyntheticSpecError):
        SyntheticSpec.from_mapping(data)


def test_generated_scans_load(tmp_path):
    manifest = generate_synthetic_dataset(_spec(), tmp_path)
    for entry in manifest.entries:
        scan = load_scan(tmp_path / entry.scan_path)
        assert scan.image_size == (24, 24)
        assert 5 <= scan.n_slices <= 8


class TestGroundTruth:
    def test_labeled_slices(self, tmp_path):
        manifest = generate_synthetic_dataset(_spec(), tmp_path)
        images, labels = load_labeled_slices(manifest, tmp_path, "train")
        assert images.shape[1:] == (24, 24)
        assert len(images) == len(labels)
        assert set(labels.tolist()) == {0, 1}

    def test_segmentation_pairs_skip_blank_slices(self, tmp_path):
        manifest = generate_synthetic_dataset(_spec(), tmp_path)
        pairs = dataset_segmentation_pairs(manifest, tmp_path, "train")
        loaded = load_segmentation_pairs(pairs)
        assert loaded
        for image, mask in loaded:
            assert image.shape == mask.shape == (24, 24)
            assert mask.dtype == bool and mask.any()
        every = dataset_segmentation_pairs(manifest, tmp_path, "train", lung_only=False)
        assert len(every) > len(pairs)

    def test_pair_listing(self, tmp_path):
        manifest = generate_synthetic_dataset(_spec(), tmp_path)
        scan_id = manifest.entries[0].scan_id
        listing = tmp_path / "pairs.csv"
        listing.write_text(
            f"slice_path,mask_path\nscans/{scan_id}/2.png,scans/{scan_id}_masks/2.png\n"
        )
        pairs = read_pair_listing(listing)
        assert pairs == [
            (
                tmp_path / "scans" / scan_id / "2.png",
                masks_dir(tmp_path / "scans", scan_id) / "2.png",
            )
        ]

    def test_pair_listing_bad_columns(self, tmp_path):
        listing = tmp_path / "pairs.csv"
        listing.write_text("image,mask\na.png,b.png\n")
        with pytest.raises(DataError, match="slice_path,mask_path"):
            read_pair_listing(listing)
