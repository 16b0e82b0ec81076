import math
import struct

import numpy as np
import pytest

from classfool import (ConfigError, FormatError, SampleBatch, ShapeError,
                       ValidationError, VersionError, build_pools,
                       build_train_pools, export_perturbation_image, load_idx,
                       load_pools, make_blobs, save_idx, save_pools,
                       split_test)
from classfool.data import idx_image_shape


def write_idx_pair(tmp_path, pixels, labels, rows, cols):
    img = tmp_path / "images.idx"
    lab = tmp_path / "labels.idx"
    img.write_bytes(struct.pack(">IIII", 0x803, len(labels), rows, cols) +
                    bytes(pixels))
    lab.write_bytes(struct.pack(">II", 0x801, len(labels)) + bytes(labels))
    return str(img), str(lab)


class TestSampleBatch:
    def test_value_range_enforced(self):
        with pytest.raises(ValidationError):
            SampleBatch(np.array([[0.0, 300.0]]), np.array([0]), (0.0, 255.0))

    def test_negative_label_rejected(self):
        with pytest.raises(IndexError):
            SampleBatch(np.array([[1.0]]), np.array([-1]), (0.0, 255.0))

    def test_take_preserves_ids(self):
        b = SampleBatch(np.arange(6.0).reshape(3, 2), np.array([0, 1, 2]),
                        (0.0, 10.0))
        sub = b.take([2, 0, 2])
        assert list(sub.ids) == [2, 0, 2]
        assert list(sub.labels) == [2, 0, 2]


class TestIdx:
    def test_decode_single_image(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, [0, 128, 255, 64], [1], 2, 2)
        batch = load_idx(img, lab)
        assert batch.data.tolist() == [[0.0, 128.0, 255.0, 64.0]]
        assert batch.labels.tolist() == [1]
        assert batch.value_range == (0.0, 255.0)

    def test_count_mismatch(self, tmp_path):
        img = tmp_path / "images.idx"
        lab = tmp_path / "labels.idx"
        img.write_bytes(struct.pack(">IIII", 0x803, 1, 1, 1) + b"\x00")
        lab.write_bytes(struct.pack(">II", 0x801, 2) + b"\x00\x01")
        with pytest.raises(FormatError, match="mismatch"):
            load_idx(str(img), str(lab))

    def test_big_endian_dims(self, tmp_path):
        # dimension field 0x0000001C decodes to 28
        img = tmp_path / "images.idx"
        img.write_bytes(struct.pack(">IIII", 0x803, 0, 0x1C, 0x1C))
        assert idx_image_shape(str(img)) == (28, 28)

    def test_bad_magic_names_offset(self, tmp_path):
        img = tmp_path / "images.idx"
        img.write_bytes(struct.pack(">IIII", 0x9999, 1, 1, 1) + b"\x00")
        lab = tmp_path / "labels.idx"
        lab.write_bytes(struct.pack(">II", 0x801, 1) + b"\x00")
        with pytest.raises(FormatError, match="byte 0"):
            load_idx(str(img), str(lab))

    def test_truncated_pixels(self, tmp_path):
        img = tmp_path / "images.idx"
        img.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 3)
        lab = tmp_path / "labels.idx"
        lab.write_bytes(struct.pack(">II", 0x801, 2) + b"\x00\x01")
        with pytest.raises(FormatError, match="truncated"):
            load_idx(str(img), str(lab))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        data = rng.integers(0, 256, size=(10, 12)).astype(np.float64)
        batch = SampleBatch(data, rng.integers(0, 4, size=10), (0.0, 255.0))
        img, lab = str(tmp_path / "i.idx"), str(tmp_path / "l.idx")
        save_idx(batch, img, lab, (3, 4))
        back = load_idx(img, lab)
        assert np.array_equal(back.data, batch.data)
        assert np.array_equal(back.labels, batch.labels)


class TestBlobs:
    def test_zero_scale_limit(self):
        # tiny scale: every sample sits (numerically) on its centroid
        batch, cents = make_blobs(3, 4, 5, scale=1e-12, seed=0)
        for c in range(3):
            rows = batch.data[batch.labels == c]
            assert np.allclose(rows, cents[c], atol=1e-9)

    def test_seed_determinism(self):
        a, ca = make_blobs(4, 6, 10, seed=42)
        b, cb = make_blobs(4, 6, 10, seed=42)
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(ca, cb)

    def test_per_class_counts(self):
        batch, _ = make_blobs(10, 8, 965, seed=1)
        assert len(batch) == 9650
        assert all(np.sum(batch.labels == c) == 965 for c in range(10))

    def test_explicit_centroids_and_per_class_scale(self):
        cents = np.array([[0.2, 0.2], [0.8, 0.8]])
        batch, out = make_blobs(2, 2, 500, scale=[0.01, 0.04], seed=3,
                                centroids=cents)
        assert np.array_equal(out, cents)
        s0 = batch.data[batch.labels == 0].std()
        s1 = batch.data[batch.labels == 1].std()
        assert s1 > 2 * s0


class TestSplitAndPools:
    def test_split_determinism(self, blob_problem):
        a1, b1 = split_test(blob_problem["batch"], 30, seed=8)
        a2, b2 = split_test(blob_problem["batch"], 30, seed=8)
        assert np.array_equal(a1.ids, a2.ids)
        assert np.array_equal(b1.ids, b2.ids)

    def test_split_disjoint_and_sized(self, blob_problem):
        train, test = split_test(blob_problem["batch"], 30, seed=1)
        assert not set(train.ids) & set(test.ids)
        assert all(np.sum(test.labels == c) == 30 for c in range(3))

    def test_infeasible_test_count(self, blob_problem):
        with pytest.raises(ConfigError):
            split_test(blob_problem["batch"], 10_000, seed=0)

    def test_floor_zero_keeps_all_correct(self, blob_problem):
        model, train = blob_problem["model"], blob_problem["train"]
        tp = build_train_pools(model, train, 0, confidence_floor=0.0, seed=0)
        n_non = int(np.sum(train.labels != 0))
        # the victim is perfectly accurate on this data
        assert len(tp.nonsource_train) == n_non

    def test_impossible_floor_errors(self, blob_problem):
        with pytest.raises(ConfigError, match="floor"):
            build_train_pools(blob_problem["model"], blob_problem["train"], 0,
                              confidence_floor=1.01, seed=0)

    def test_misclassified_confident_sample_excluded(self, blob_problem):
        model, train = blob_problem["model"], blob_problem["train"]
        # mislabel one non-source sample: correctness is required on top of
        # confidence, so it must drop out of the pool
        labels = train.labels.copy()
        victim_idx = int(np.flatnonzero(labels == 1)[0])
        labels[victim_idx] = 2
        tampered = SampleBatch(train.data, labels, train.value_range, train.ids)
        tp = build_train_pools(model, tampered, 0, confidence_floor=0.0, seed=0)
        assert train.ids[victim_idx] not in set(tp.nonsource_train.ids)

    def test_filter_monotonicity(self, blob_problem):
        model, train = blob_problem["model"], blob_problem["train"]
        def pool_size(floor):
            try:
                return len(build_train_pools(model, train, 0, floor,
                                             seed=0).nonsource_train)
            except ConfigError:
                return 0

        sizes = [pool_size(f) for f in (0.0, 0.6, 0.9, 0.999, 1.01)]
        assert sizes == sorted(sizes, reverse=True)
        assert sizes[0] > sizes[-1] == 0

    def test_source_pool_unfiltered(self, blob_problem):
        model, train = blob_problem["model"], blob_problem["train"]
        tp = build_train_pools(model, train, 1, confidence_floor=0.99, seed=0)
        n_src = int(np.sum(train.labels == 1))
        assert len(tp.source_train) + len(tp.source_eval) == n_src

    def test_poolset_disjoint_by_ids(self, blob_problem):
        pools = build_pools(blob_problem["model"], blob_problem["train"],
                            blob_problem["test"], 0, seed=3)
        ids = np.concatenate(
            [pools.source_train.ids, pools.source_eval.ids,
             pools.source_test.ids, pools.nonsource_train.ids]
            + [b.ids for b in pools.nonsource_test.values()])
        assert np.unique(ids).size == ids.size

    def test_pools_round_trip(self, tmp_path, blob_problem):
        pools = build_pools(blob_problem["model"], blob_problem["train"],
                            blob_problem["test"], 0, seed=3)
        path = str(tmp_path / "pools.cfp")
        save_pools(pools, path)
        back = load_pools(path)
        assert back.source_label == pools.source_label
        assert back.confidence_floor == pools.confidence_floor
        for name in ("source_train", "source_eval", "source_test",
                     "nonsource_train"):
            a, b = getattr(pools, name), getattr(back, name)
            assert np.array_equal(a.data, b.data)
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.ids, b.ids)
        assert set(back.nonsource_test) == set(pools.nonsource_test)
        for c in pools.nonsource_test:
            assert np.array_equal(back.nonsource_test[c].data,
                                  pools.nonsource_test[c].data)

    def test_pools_corrupted_header(self, tmp_path, blob_problem):
        pools = build_pools(blob_problem["model"], blob_problem["train"],
                            blob_problem["test"], 0, seed=3)
        path = str(tmp_path / "pools.cfp")
        save_pools(pools, path)
        raw = bytearray(open(path, "rb").read())
        raw[0:4] = b"XXXX"
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            load_pools(path)

    def test_pools_version_mismatch(self, tmp_path, blob_problem):
        pools = build_pools(blob_problem["model"], blob_problem["train"],
                            blob_problem["test"], 0, seed=3)
        path = str(tmp_path / "pools.cfp")
        save_pools(pools, path)
        raw = open(path, "rb").read()
        tampered = raw.replace(b'"version": 1', b'"version": 9', 1)
        open(path, "wb").write(tampered)
        with pytest.raises(VersionError):
            load_pools(path)


class TestImageExport:
    def test_zero_perturbation_is_mid_gray(self, tmp_path):
        path = str(tmp_path / "p.pgm")
        export_perturbation_image(np.zeros(12), 4, 3, path)
        raw = open(path, "rb").read()
        assert raw.startswith(b"P5\n4 3\n255\n")
        assert set(raw[len(b"P5\n4 3\n255\n"):]) == {128}

    def test_formula_values(self, tmp_path):
        rho = np.array([12.7, -20.0, 0.0, 1.25])
        path = str(tmp_path / "p.pgm")
        export_perturbation_image(rho, 4, 1, path)
        pixels = open(path, "rb").read()[-4:]
        assert list(pixels) == [255, 0, 128, 141]  # 10*1.25+128 = 140.5 -> 141

    def test_formula_exactness_random(self, tmp_path):
        rng = np.random.default_rng(5)
        rho = rng.uniform(-30, 30, size=64)
        path = str(tmp_path / "p.pgm")
        export_perturbation_image(rho, 8, 8, path)
        pixels = list(open(path, "rb").read()[-64:])
        expected = [int(min(max(math.floor(10.0 * v + 128.0 + 0.5), 0), 255))
                    for v in rho]
        assert pixels == expected

    def test_ppm_three_channel(self, tmp_path):
        path = str(tmp_path / "p.ppm")
        export_perturbation_image(np.zeros(2 * 2 * 3), 2, 2, path, channels=3)
        raw = open(path, "rb").read()
        assert raw.startswith(b"P6\n2 2\n255\n")
        assert len(raw) == len(b"P6\n2 2\n255\n") + 12

    def test_dimension_mismatch(self, tmp_path):
        with pytest.raises(ShapeError):
            export_perturbation_image(np.zeros(10), 4, 3, str(tmp_path / "x.pgm"))
