import json

import numpy as np
import pytest

from tripletvol.data import DatasetManifest, ManifestEntry, VolumeDataset
from tripletvol.errors import DataError, FormatError
from tripletvol.synthetic import LESION_CONTRAST, generate_synthetic, synthetic_subject
from tripletvol.errors import ContractError
from tripletvol.volume import BRAIN_WINDOW, read_vvol


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return generate_synthetic(root, 6, (16, 16, 16), seed=3, k_folds=3)


def test_manifest_counts_and_folds(small_set):
    assert len(small_set) == 12
    assert np.bincount(small_set.labels).tolist() == [6, 6]
    assert small_set.k_folds == 3
    folds = np.array([e.fold for e in small_set.entries])
    for label in (0, 1):
        assert np.bincount(folds[small_set.labels == label], minlength=3).tolist() == [2, 2, 2]


def test_manifest_round_trip(small_set, tmp_path):
    small_set.save(tmp_path / "m.json")
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back.to_json() == small_set.to_json()


def test_manifest_validation():
    e0 = ManifestEntry("a.vvol", 0, "S0")
    with pytest.raises(DataError):
        DatasetManifest(1, [e0, ManifestEntry("a.vvol", 1, "S1")])
    with pytest.raises(DataError):
        DatasetManifest(1, [e0, ManifestEntry("b.vvol", 2, "S1")])
    with pytest.raises(DataError):
        DatasetManifest(2, [e0, ManifestEntry("b.vvol", 1, "S1", fold=2)])
    with pytest.raises(DataError):
        DatasetManifest(1, [e0, ManifestEntry("b.vvol", 0, "S1")])


def test_manifest_load_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError):
        DatasetManifest.load(tmp_path / "bad.json")
    (tmp_path / "missing.json").write_text(json.dumps({"entries": []}))
    with pytest.raises(FormatError):
        DatasetManifest.load(tmp_path / "missing.json")
    (tmp_path / "entry.json").write_text(json.dumps({"k_folds": 1, "entries": [{"path": "a"}]}))
    with pytest.raises(FormatError):
        DatasetManifest.load(tmp_path / "entry.json")


def test_synthetic_deterministic(tmp_path):
    a = generate_synthetic(tmp_path / "a", 3, (16, 16, 16), seed=7, k_folds=1)
    b = generate_synthetic(tmp_path / "b", 3, (16, 16, 16), seed=7, k_folds=1)
    for i in range(len(a)):
        assert a.resolve(i).read_bytes() == b.resolve(i).read_bytes()
    assert a.to_json() == b.to_json()


def test_synthetic_lesion_confined_to_box():
    for index in range(5):
        vol, base, box = synthetic_subject((32, 32, 16), 7, index, with_lesion=True)
        diff = vol.voxels.astype(np.float64) - base.voxels
        inside = np.zeros(diff.shape, dtype=bool)
        inside[box[0]:box[3], box[1]:box[4], box[2]:box[5]] = True
        assert not diff[~inside].any()
        assert diff[inside].max() == pytest.approx(LESION_CONTRAST * BRAIN_WINDOW.width_hu, rel=1e-5)
        # the box is tight: every face touches the lesion
        nz = np.argwhere(diff != 0)
        assert nz.min(axis=0).tolist() == box[:3]
        assert (nz.max(axis=0) + 1).tolist() == box[3:]


def test_synthetic_lesion_is_small():
    fractions = []
    for index in range(20):
        vol, base, _ = synthetic_subject((32, 32, 16), 7, index, with_lesion=True)
        fractions.append(np.mean(vol.voxels != base.voxels))
    assert max(fractions) < 0.02


def test_synthetic_control_has_no_box(small_set):
    for e in small_set.entries:
        assert (e.lesion_box is None) == (e.label == 0)


def test_synthetic_minimum_dims():
    with pytest.raises(ContractError):
        synthetic_subject((16, 16, 8), 1, 0, with_lesion=False)


def test_dataset_batch_and_cache(small_set):
    ds = VolumeDataset(small_set, cache_bytes=3 * 16**3 * 4)
    b = ds.batch([0, 1, 0])
    assert b.shape == (3, 1, 16, 16, 16) and b.dtype == np.float32
    np.testing.assert_array_equal(b[0], b[2])
    np.testing.assert_array_equal(b[1, 0], read_vvol(small_set.resolve(1)).voxels)
    ds.batch([2, 3, 4, 5])
    assert len(ds._cache) == 3
    assert ds._cached_bytes <= ds.cache_bytes


def test_dataset_workers_match_synchronous(small_set):
    sync = VolumeDataset(small_set).batch(list(range(12)))
    pooled = VolumeDataset(small_set, workers=3).batch(list(range(12)))
    np.testing.assert_array_equal(sync, pooled)


def test_dataset_transform_applied(small_set):
    ds = VolumeDataset(small_set, transform=lambda v: type(v)(v.voxels * 0 + 1, v.spacing_mm))
    assert np.all(ds.batch([0]) == 1)
