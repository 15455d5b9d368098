import json
import struct

import numpy as np
import pytest

from evexit import data as da
from evexit.errors import ConfigurationError, DataError, ParseError


class TestSplits:
    def test_deterministic_disjoint_exhaustive(self):
        for seed in (0, 1, 99):
            tags = da.assign_splits(500, seed)
            again = da.assign_splits(500, seed)
            assert np.array_equal(tags, again)
            counts = {s: int(np.sum(tags == s)) for s in da.SPLITS}
            assert sum(counts.values()) == 500

    def test_pure_function_of_seed_and_index(self):
        # extending the dataset must not reshuffle existing samples
        short = da.assign_splits(100, seed=5)
        long = da.assign_splits(400, seed=5)
        assert np.array_equal(short, long[:100])

    def test_fractions_roughly_honored(self):
        tags = da.assign_splits(20000, seed=3)
        assert np.mean(tags == "test") == pytest.approx(0.2, abs=0.02)
        assert np.mean(tags == "validation") == pytest.approx(0.08, abs=0.02)


class TestGaussianMixture:
    def test_same_seed_identical(self):
        a = da.gen_gaussian_mixture(4, 8, 30, 3.0, 1.0, seed=11)
        b = da.gen_gaussian_mixture(4, 8, 30, 3.0, 1.0, seed=11)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.split_tags, b.split_tags)

    def test_zero_noise_perfectly_separable(self):
        ds = da.gen_gaussian_mixture(5, 8, 20, 3.0, 1e-12, seed=0)
        # nearest-centroid oracle classifies perfectly
        centers = np.stack([ds.features[ds.labels == k].mean(axis=0)
                            for k in range(5)])
        d2 = ((ds.features[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assert np.array_equal(d2.argmin(axis=1), ds.labels)

    def test_acceptance_setting_is_near_bayes(self):
        # nearest-centroid oracle on the criterion's generator settings
        ds = da.gen_gaussian_mixture(10, 16, 400, 3.0, 1.0, seed=1)
        centers = np.stack([ds.features[ds.labels == k].mean(axis=0)
                            for k in range(10)])
        d2 = ((ds.features[:, None, :] - centers[None]) ** 2).sum(axis=2)
        accuracy = (d2.argmin(axis=1) == ds.labels).mean()
        assert accuracy >= 0.90

    def test_size_validation(self):
        with pytest.raises(ConfigurationError):
            da.gen_gaussian_mixture(1, 8, 10, 3.0, 1.0, seed=0)
        with pytest.raises(ConfigurationError):
            da.gen_gaussian_mixture(10, 4, 10, 3.0, 1.0, seed=0)  # K > D
        with pytest.raises(ConfigurationError):
            da.gen_gaussian_mixture(3, 8, 10, -1.0, 1.0, seed=0)


class TestComplementaryStore:
    def test_constructed_bounds_every_seed(self):
        for seed in range(5):
            store = da.gen_complementary_store(10, 1000, 4.0, seed)
            labels = np.array([r.label for r in store])
            for c in range(2):
                preds = np.array([int(np.argmax(r.exit_logits[c]))
                                  for r in store])
                assert (preds == labels).mean() <= 0.5 + 1 / 20 + 0.01

    def test_balanced_labels(self):
        store = da.gen_complementary_store(10, 1000, 4.0, seed=0)
        counts = np.bincount([r.label for r in store], minlength=10)
        assert np.all(counts == 100)

    def test_minimum_size(self):
        with pytest.raises(ConfigurationError):
            da.gen_complementary_store(10, 50, 4.0, seed=0)


class TestStoreIO:
    def make_store(self, n=20, exits=3, k=4, seed=0):
        rng = np.random.default_rng(seed)
        records = [da.StoreRecord(id=f"r{i}", label=int(rng.integers(0, k)),
                                  exit_logits=[rng.normal(0, 2, k).tolist()
                                               for _ in range(exits)])
                   for i in range(n)]
        return da.LogitsStore(records=records)

    def test_round_trip_exact(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "store.jsonl"
        da.store_write(store, path)
        loaded = da.store_read(path)
        assert len(loaded) == len(store)
        for a, b in zip(store, loaded):
            assert a.id == b.id and a.label == b.label
            assert a.exit_logits == b.exit_logits

    def test_empty_store_round_trip(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        da.store_write(da.LogitsStore(records=[]), path)
        assert len(da.store_read(path)) == 0

    def test_wrong_exit_count_names_line(self, tmp_path):
        store = self.make_store(n=3)
        path = tmp_path / "store.jsonl"
        da.store_write(store, path)
        lines = path.read_text().splitlines()
        bad = json.loads(lines[1])
        bad["exit_logits"] = bad["exit_logits"][:1]
        lines[1] = json.dumps(bad)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError):
            da.store_read(path)

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "store.jsonl"
        path.write_text('{"id": "a", "label": 0, "exit_logits": [[0.0, 1.0]]}\n'
                        "{oops\n")
        with pytest.raises(ParseError, match="line 2"):
            da.store_read(path)

    def test_duplicate_ids_rejected(self):
        records = [da.StoreRecord(id="x", label=0, exit_logits=[[0.0, 1.0]]),
                   da.StoreRecord(id="x", label=1, exit_logits=[[1.0, 0.0]])]
        with pytest.raises(DataError):
            da.LogitsStore(records=records)


class TestIdx:
    def fixture(self, tmp_path, n=4, rows=3, cols=2):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, (n, rows, cols)).astype(np.uint8)
        labels = rng.integers(0, 10, n).astype(np.uint8)
        ip, lp = tmp_path / "imgs.idx", tmp_path / "lbls.idx"
        da.write_idx(images, labels, ip, lp)
        return images, labels, ip, lp

    def test_round_trip(self, tmp_path):
        images, labels, ip, lp = self.fixture(tmp_path)
        ds = da.load_idx(ip, lp)
        assert ds.features.shape == (4, 6)
        np.testing.assert_array_equal(ds.labels, labels)
        np.testing.assert_allclose(ds.features,
                                   images.reshape(4, 6) / 255.0, atol=0)

    def test_all_zero_image(self, tmp_path):
        da.write_idx(np.zeros((1, 2, 2), np.uint8), np.zeros(1, np.uint8),
                     tmp_path / "i", tmp_path / "l")
        ds = da.load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(ds.features, np.zeros((1, 4)))

    def corruption_corpus(self, tmp_path):
        """10 distinct corruptions; every one must be rejected."""
        images, labels, ip, lp = self.fixture(tmp_path)
        img_bytes = ip.read_bytes()
        lbl_bytes = lp.read_bytes()
        cases = {}

        def put(name, img=None, lbl=None):
            i = tmp_path / f"{name}.img"
            l = tmp_path / f"{name}.lbl"
            i.write_bytes(img_bytes if img is None else img)
            l.write_bytes(lbl_bytes if lbl is None else lbl)
            cases[name] = (i, l)

        put("bad_image_magic", img=b"\x00\x00\x08\x04" + img_bytes[4:])
        put("bad_label_magic", lbl=b"\x00\x00\x08\x02" + lbl_bytes[4:])
        put("count_mismatch", lbl=lbl_bytes[:4] + struct.pack(">I", 7)
            + lbl_bytes[8:])
        put("truncated_image_header", img=img_bytes[:10])
        put("truncated_pixels", img=img_bytes[:-5])
        put("truncated_label_header", lbl=lbl_bytes[:6])
        put("truncated_labels", lbl=lbl_bytes[:-2])
        put("empty_image_file", img=b"")
        put("empty_label_file", lbl=b"")
        put("trailing_garbage", img=img_bytes + b"\xff\xff")
        return cases

    def test_corruption_corpus_rejected(self, tmp_path):
        cases = self.corruption_corpus(tmp_path)
        assert len(cases) == 10
        for name, (ip, lp) in cases.items():
            with pytest.raises(ParseError):
                da.load_idx(ip, lp)


class TestCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("label,f0,f1\n0,0.5,1.25\n1,-2.0,0.0\n")
        ds = da.load_csv(path)
        np.testing.assert_array_equal(ds.labels, [0, 1])
        np.testing.assert_array_equal(ds.features, [[0.5, 1.25], [-2.0, 0.0]])

    def test_bad_header(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x,y\n1,2\n")
        with pytest.raises(ParseError):
            da.load_csv(path)

    def test_ragged_row_names_line(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("label,f0,f1\n0,0.5\n")
        with pytest.raises(ParseError, match="line 2"):
            da.load_csv(path)
