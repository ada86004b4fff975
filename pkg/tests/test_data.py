import numpy as np
import pytest

from evtc import data as D
from evtc.errors import ConfigError, ContractError


def spec(**over):
    defaults = dict(resolution=(32, 32), num_classes=14, seed=0)
    defaults.update(over)
    return D.SceneSpec(**defaults)


class TestGenerateSample:
    def test_bit_identical_regeneration(self):
        a = D.generate_sample(spec(), 5)
        b = D.generate_sample(spec(), 5)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()

    def test_index_sensitivity(self):
        a = D.generate_sample(spec(), 5)
        b = D.generate_sample(spec(), 6)
        assert not np.array_equal(a.mask, b.mask)

    def test_seed_sensitivity(self):
        a = D.generate_sample(spec(seed=1), 5)
        b = D.generate_sample(spec(seed=2), 5)
        assert not np.array_equal(a.image, b.image)

    def test_sample_invariants(self):
        s = D.generate_sample(spec(), 0)
        assert s.image.shape == (3, 32, 32) and s.mask.shape == (32, 32)
        assert s.image.dtype == np.float32 and np.isfinite(s.image).all()
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.mask.min() >= 0 and s.mask.max() < 14

    def test_background_dominates_over_100_samples(self):
        ds = [D.generate_sample(spec(), i) for i in range(100)]
        hist = D.class_histogram(ds)
        assert hist[0] / hist.sum() >= 0.5

    def test_invalid_resolution(self):
        with pytest.raises(ConfigError):
            D.generate_sample(spec(resolution=(8, 8)), 0)


class TestSplits:
    def test_disjoint_index_ranges(self):
        tr = D.generate_split(spec(), 16, "train")
        ev = D.generate_split(spec(), 16, "eval")
        # same position, different underlying index -> different content
        assert all(not np.array_equal(a.mask, b.mask) or not np.array_equal(a.image, b.image)
                   for a, b in zip(tr, ev))
        assert D.EVAL_INDEX_OFFSET > 16

    def test_all_classes_present_in_eval_at_n64(self):
        ev = D.generate_split(spec(resolution=(64, 64)), 64, "eval")
        present = np.zeros(14, dtype=bool)
        for s in ev:
            present[np.unique(s.mask)] = True
        assert present.all()

    def test_all_classes_present_in_both_splits_default_spec(self):
        sp = spec()
        for role in ("train", "eval"):
            ds = D.generate_split(sp, 64, role)
            present = np.zeros(14, dtype=bool)
            for s in ds:
                present[np.unique(s.mask)] = True
            assert present.all(), role

    def test_regeneration_identical(self):
        a = D.generate_split(spec(), 8, "train")
        b = D.generate_split(spec(), 8, "train")
        assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))

    def test_bad_role(self):
        with pytest.raises(ContractError):
            D.generate_split(spec(), 4, "test")

    def test_empty_split_rejected(self):
        with pytest.raises(ContractError):
            D.generate_split(spec(), 0, "train")


class TestHistogram:
    def test_single_background_image(self):
        s = D.Sample(image=np.zeros((3, 16, 16), dtype=np.float32),
                     mask=np.zeros((16, 16), dtype=np.int64))
        hist = D.class_histogram([s])
        assert hist[0] == 256 and hist.sum() == 256

    def test_sum_equals_total_pixels(self):
        ds = [D.generate_sample(spec(), i) for i in range(10)]
        assert D.class_histogram(ds).sum() == 10 * 32 * 32

    def test_skew_ratio(self):
        ds = [D.generate_sample(spec(), i) for i in range(100)]
        hist = np.sort(D.class_histogram(ds))[::-1]
        assert hist[0] / hist[1] >= 2.0


class TestExport:
    def test_ppm_pgm_roundtrip(self, tmp_path):
        s = D.generate_sample(spec(), 3)
        img_p, mask_p = tmp_path / "s.ppm", tmp_path / "s.pgm"
        D.export_sample(s, img_p, mask_p)
        blob = img_p.read_bytes()
        assert blob.startswith(b"P6\n32 32\n255\n")
        pixels = np.frombuffer(blob.split(b"\n", 3)[3], dtype=np.uint8)
        assert pixels.size == 32 * 32 * 3
        mblob = mask_p.read_bytes()
        assert mblob.startswith(b"P5\n32 32\n255\n")
        mask = np.frombuffer(mblob.split(b"\n", 3)[3], dtype=np.uint8).reshape(32, 32)
        assert np.array_equal(mask, s.mask.astype(np.uint8))
