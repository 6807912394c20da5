import json

import numpy as np
import pytest

from voxafford.datasets import (Dataset, overfit_dataset, read_cloud, read_mask, write_cloud, write_mask,
                                write_prediction)
from voxafford.decoder import AffordanceMask
from voxafford.errors import InputError, ParseError
from voxafford.synthdata import make_splits


@pytest.fixture(scope="module")
def small():
    return Dataset.from_manifest(make_splits(12, 5, ["mug:contain"], n_points=256))


class TestDataset:
    def test_round_trip_is_exact(self, small, tmp_path):
        small.write(tmp_path / "ds")
        back = Dataset.read(tmp_path / "ds")
        assert back.fingerprint() == small.fingerprint()
        assert back.holdout == small.holdout
        for a, b in zip(small.items, back.items):
            np.testing.assert_array_equal(a.points, b.points)
            np.testing.assert_array_equal(a.part_labels, b.part_labels)

    def test_write_is_byte_identical(self, small, tmp_path):
        small.write(tmp_path / "a")
        small.write(tmp_path / "b")
        for name in ("manifest.tsv", "dataset.json", "clouds/s00000.xyz"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_split_filter(self, small):
        assert all(it.split == "val" and it.records for it in small.split("val"))
        with pytest.raises(InputError):
            small.split("train")

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Dataset.read(tmp_path)

    def test_bad_manifest_row(self, small, tmp_path):
        root = small.write(tmp_path / "ds")
        lines = (root / "manifest.tsv").read_text().splitlines()
        lines[3] = "val\t1\tmug"
        (root / "manifest.tsv").write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match=r"manifest.tsv:4"):
            Dataset.read(root)

    def test_overfit_dataset_shares_clouds(self):
        ds = overfit_dataset(3, n_points=256)
        s1, s2 = ds.split("stage1_train"), ds.split("stage2_train")
        assert len(s1) == len(s2) == 3
        for a, b in zip(s1, s2):
            np.testing.assert_array_equal(a.points, b.points)
        assert [it.family for it in s1] == ["mug", "pan", "ladle"]


class TestFiles:
    def test_cloud_round_trip(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(5, 3)) / 3
        write_cloud(tmp_path / "c.xyz", pts, [0, 1, 1, 2, 0])
        back, labels = read_cloud(tmp_path / "c.xyz")
        np.testing.assert_array_equal(back, pts)
        np.testing.assert_array_equal(labels, [0, 1, 1, 2, 0])

    def test_cloud_without_labels_and_comments(self, tmp_path):
        (tmp_path / "c.xyz").write_text("# header\n0 0 0\n1 2 3\n")
        pts, labels = read_cloud(tmp_path / "c.xyz")
        assert pts.shape == (2, 3) and labels is None

    @pytest.mark.parametrize("text,line", [("0 0 0\n1 2\n", 2), ("0 0 x\n", 1), ("0 0 0\n1 1 1 4\n", 2),
                                           ("0 nan 0\n", 1)])
    def test_cloud_parse_errors(self, tmp_path, text, line):
        (tmp_path / "c.xyz").write_text(text)
        with pytest.raises(ParseError) as info:
            read_cloud(tmp_path / "c.xyz")
        assert info.value.line == line

    def test_mask_round_trip_and_errors(self, tmp_path):
        write_mask(tmp_path / "m", [True, False, True])
        np.testing.assert_array_equal(read_mask(tmp_path / "m"), [True, False, True])
        (tmp_path / "bad").write_text("1\n2\n")
        with pytest.raises(ParseError, match=":2:"):
            read_mask(tmp_path / "bad")
        with pytest.raises(FileNotFoundError):
            read_mask(tmp_path / "nope")

    def test_prediction_sidecar(self, tmp_path):
        path, side = write_prediction(tmp_path / "p.txt", AffordanceMask(np.array([0.25, 0.75, 0.5]), "pour"))
        assert [float(v) for v in path.read_text().split()] == [0.25, 0.75, 0.5]
        meta = json.loads(side.read_text())
        assert meta == {"query": "pour", "threshold": 0.5, "confidence": 0.625, "n_points": 3, "n_positive": 2}
