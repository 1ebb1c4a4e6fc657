import numpy as np
import pytest

from complab.dataio import (
    Dataset,
    load_dataset,
    load_features,
    load_features_text,
    load_labels_csv,
    save_features_binary,
    save_features_text,
    save_labels_csv,
    save_partition_csv,
)
from complab.errors import DataError


class TestFeatureText:
    def test_round_trip_is_lossless(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(17, 5)) * 1e3
        path = tmp_path / "features.txt"
        save_features_text(path, x)
        assert np.array_equal(load_features_text(path), x)

    def test_header_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("3 2\n1.0 2.0\n3.0 4.0\n")
        with pytest.raises(DataError, match="shape"):
            load_features_text(path)

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "nan.txt"
        path.write_text("1 2\nnan 1.0\n")
        with pytest.raises(DataError, match="non-finite"):
            load_features_text(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("hello\n")
        with pytest.raises(DataError):
            load_features_text(path)


class TestFeatureBinary:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(9, 4))
        path = tmp_path / "features.bin"
        save_features_binary(path, x)
        assert np.array_equal(load_features(path), x)

    def test_sniffing_picks_format(self, tmp_path):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3))
        text = tmp_path / "a.txt"
        binary = tmp_path / "b.bin"
        save_features_text(text, x)
        save_features_binary(binary, x)
        assert np.array_equal(load_features(text), load_features(binary))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="does not exist"):
            load_features(tmp_path / "absent.bin")


class TestLabelsCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "labels.csv"
        ids = np.arange(6)
        identities = np.array([0, 0, 1, 1, 2, 2])
        cameras = np.array([0, 1, 0, 1, 0, 1])
        save_labels_csv(path, ids, identities, cameras)
        got_ids, got_identities, got_cameras = load_labels_csv(path)
        assert np.array_equal(got_ids, ids)
        assert np.array_equal(got_identities, identities)
        assert np.array_equal(got_cameras, cameras)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("id,pid,cam\n0,0,0\n")
        with pytest.raises(DataError, match="header"):
            load_labels_csv(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("sample_id,identity,camera\n")
        with pytest.raises(DataError, match="empty"):
            load_labels_csv(path)


class TestDataset:
    def test_load_dataset_aligns_rows_by_sample_id(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 3))
        feat = tmp_path / "f.txt"
        save_features_text(feat, x)
        lab = tmp_path / "l.csv"
        # rows shuffled on disk; loader must align by sample id
        lab.write_text("sample_id,identity,camera\n2,20,0\n0,10,1\n3,30,0\n1,10,1\n")
        data = load_dataset(feat, lab)
        assert data.identities.tolist() == [10, 10, 20, 30]
        assert data.cameras.tolist() == [1, 1, 0, 0]

    def test_coverage_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(4)
        feat = tmp_path / "f.txt"
        save_features_text(feat, rng.normal(size=(3, 2)))
        lab = tmp_path / "l.csv"
        lab.write_text("sample_id,identity,camera\n0,1,0\n1,1,0\n")
        with pytest.raises(DataError, match="does not cover"):
            load_dataset(feat, lab)

    def test_defaults_sample_ids(self):
        data = Dataset(np.zeros((3, 2)))
        assert data.sample_ids.tolist() == [0, 1, 2]


class TestPartitionCsv:
    def test_format(self, tmp_path):
        path = tmp_path / "partition.csv"
        save_partition_csv(path, np.arange(3), np.array([0, 0, 1]))
        lines = path.read_text().splitlines()
        assert lines[0] == "sample_id,group_id"
        assert lines[1:] == ["0,0", "1,0", "2,1"]
