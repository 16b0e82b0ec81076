import numpy as np
import pytest

from classfool import (ConfigError, DenseClassifier, SampleBatch,
                       TargetedPerturbation, ValidationError,
                       ablation_compare, build_pools, distance_matrix,
                       evaluate_attack, fooling_ratio, hopping_trace, leakage,
                       make_blobs, split_test)


class TestFoolingRatio:
    def test_all_fooled(self, blob_problem):
        model, test = blob_problem["model"], blob_problem["test"]
        cents = blob_problem["centroids"]
        src = test.take(np.flatnonzero(test.labels == 0))
        shift = cents[0] - cents[1]
        assert fooling_ratio(model, src, shift, 1) == 100.0

    def test_zero_perturbation_on_clean_victim(self, blob_problem):
        model, test = blob_problem["model"], blob_problem["test"]
        src = test.take(np.flatnonzero(test.labels == 0))
        assert fooling_ratio(model, src, np.zeros(test.dim), 1) == 0.0

    def test_four_of_five(self):
        m = DenseClassifier(value_range=(-5.0, 5.0))
        m.n_features_in_ = 1
        m.n_classes_ = 2
        m.classes_ = np.arange(2)
        from classfool.models import _Dense
        m.layers_ = [_Dense(np.array([[1.0, -1.0]]), np.zeros(2))]
        # positive input -> class 0; four of five rows move negative
        batch = SampleBatch(np.array([[1.0], [1.0], [1.0], [1.0], [4.0]]),
                            np.zeros(5, dtype=int), (-5.0, 5.0))
        assert fooling_ratio(m, batch, np.full(1, 3.0), 1) == 80.0

    def test_fifty_sample_convention(self, blob_problem):
        model, test = blob_problem["model"], blob_problem["test"]
        src = test.take(np.flatnonzero(test.labels == 0)[:25])
        doubled = src.take(np.r_[np.arange(25), np.arange(25)])
        assert len(doubled) == 50
        val = fooling_ratio(model, doubled, np.zeros(test.dim), 2)
        assert val == 0.0

    def test_empty_batch_rejected(self, blob_problem):
        model, test = blob_problem["model"], blob_problem["test"]
        with pytest.raises(Exception):
            fooling_ratio(model, test.take([]), np.zeros(test.dim), 1)


class TestLeakage:
    def test_zero_perturbation_clean_victim(self, blob_problem):
        model, test = blob_problem["model"], blob_problem["test"]
        per_class = {c: test.take(np.flatnonzero(test.labels == c))
                     for c in (1, 2)}
        overall, detail = leakage(model, per_class, np.zeros(test.dim), 2)
        assert overall == 0.0
        assert set(detail) == {1}  # target class dropped

    def test_unweighted_mean(self, blob_problem):
        model, test = blob_problem["model"], blob_problem["test"]
        cents = blob_problem["centroids"]
        # shift that maps class 1 onto class 0's region: class 1 leaks fully,
        # class 2 stays mostly clean -> unweighted mean of the two
        shift = cents[1] - cents[0]
        per_class = {c: test.take(np.flatnonzero(test.labels == c))
                     for c in (1, 2)}
        overall, detail = leakage(model, per_class, shift, 0)
        assert detail[1] == 100.0
        assert overall == (detail[1] + detail[2]) / 2.0

    def test_duplication_invariance(self, blob_problem):
        model, test = blob_problem["model"], blob_problem["test"]
        cents = blob_problem["centroids"]
        shift = 0.5 * (cents[1] - cents[0])
        per_class = {c: test.take(np.flatnonzero(test.labels == c))
                     for c in (1, 2)}
        base, _ = leakage(model, per_class, shift, 0)
        dup = dict(per_class)
        idx = np.r_[np.arange(len(per_class[2]))]
        dup[2] = per_class[2].take(np.r_[idx, idx, idx])
        dup_val, _ = leakage(model, dup, shift, 0)
        assert dup_val == base

    def test_needs_nonempty_class_map(self, blob_problem):
        model = blob_problem["model"]
        with pytest.raises(ConfigError):
            leakage(model, {}, np.zeros(12), 1)


class TestEvaluateAttack:
    def test_report_fields_consistent(self, blob_problem):
        model = blob_problem["model"]
        pools = build_pools(model, blob_problem["train"], blob_problem["test"],
                            0, seed=3)
        atk = TargetedPerturbation(model, 0, 1, norm="linf", eta=0.3,
                                   batch_size=16, stage1_batch_size=16,
                                   stage1_iters=10, stage2_min_iters=10,
                                   max_iters=60, stop_ratio=50.0, seed=2)
        atk.fit_pools(pools)
        report = evaluate_attack(model, atk, pools)
        assert 0.0 <= report.fooling_test <= 100.0
        assert 0.0 <= report.leakage <= 100.0
        vals = list(report.per_class_leakage.values())
        assert report.leakage == pytest.approx(np.mean(vals), abs=1e-12)
        assert report.config["source_label"] == 0
        assert "model" not in report.config
        assert report.metadata["leakage_excludes_target"]
        assert len(report.history) == atk.n_iter_


@pytest.fixture(scope="module")
def corridor():
    """Collinear 3-blob geometry: source, intermediate, target; the source
    cluster is 4x wider than the target."""
    d = 16
    cents = np.stack([np.full(d, 70.0), np.full(d, 140.0), np.full(d, 210.0)])
    batch, _ = make_blobs(3, d, 260, scale=[48.0, 12.0, 12.0],
                          value_range=(0.0, 255.0), seed=5, centroids=cents)
    train, test = split_test(batch, 40, seed=6)
    model = DenseClassifier(hidden=64, epochs=15, lr=0.2, batch_size=32,
                            seed=1, value_range=(0.0, 255.0))
    model.fit(train.data, train.labels)
    assert model.score(test.data, test.labels) >= 0.99
    return {"train": train, "test": test, "model": model, "centroids": cents}


class TestHopping:
    def test_all_snapshots_already_target(self, blob_problem):
        model, test = blob_problem["model"], blob_problem["test"]
        cents = blob_problem["centroids"]
        src = test.take(np.flatnonzero(test.labels == 0))
        shift = cents[0] - cents[1]
        trace = hopping_trace(model, src, [shift, shift, shift], 0)
        assert trace.entries == [(1, 1)]

    def test_never_contains_source(self, corridor):
        model, train = corridor["model"], corridor["train"]
        atk = TargetedPerturbation(model, 0, 2, norm="unbounded",
                                   stop_ratio=95.0, stage2_min_iters=0,
                                   seed=3, record_snapshots=True)
        atk.fit(train.data, train.labels)
        src = train.take(np.flatnonzero(train.labels == 0)[:100])
        trace = hopping_trace(model, src, atk.snapshots_, 0,
                              atk.snapshot_iterations_)
        assert 0 not in trace.labels()
        # consecutive entries deduplicated, iterations increasing
        labels = trace.labels()
        assert all(a != b for a, b in zip(labels, labels[1:]))
        its = [t for t, _ in trace.entries]
        assert its == sorted(its) and len(set(its)) == len(its)

    def test_two_class_trace_single_label(self, blob_problem):
        model, test = blob_problem["model"], blob_problem["test"]
        # restrict to labels {0,1} semantics: exclusion of the source leaves
        # only the other labels
        src = test.take(np.flatnonzero(test.labels == 0))
        cents = blob_problem["centroids"]
        snaps = [t * 0.2 * (cents[0] - cents[1]) for t in range(1, 8)]
        trace = hopping_trace(model, src, snaps, 0)
        assert 0 not in trace.labels()

    def test_intermediate_before_target(self, corridor):
        """Nearest-centroid oracle predicts the crossing order: moving from
        the source centroid toward the target passes the intermediate."""
        model, train = corridor["model"], corridor["train"]
        cents = corridor["centroids"]
        direction = cents[2] - cents[0]
        mids = [np.linalg.norm(cents[0] + f * direction - cents[c], axis=0)
                for f in (0.4,) for c in range(3)]
        assert np.argmin(mids) == 1  # oracle: mid-path is closest to class 1
        atk = TargetedPerturbation(model, 0, 2, norm="unbounded",
                                   stop_ratio=95.0, stage2_min_iters=0,
                                   seed=4, record_snapshots=True)
        atk.fit(train.data, train.labels)
        src = train.take(np.flatnonzero(train.labels == 0)[:100])
        trace = hopping_trace(model, src, atk.snapshots_, 0,
                              atk.snapshot_iterations_)
        labels = trace.labels()
        assert 1 in labels and 2 in labels
        assert labels.index(1) < labels.index(2)


class TestDistanceMatrix:
    def test_single_repeat_zero_std(self, corridor):
        dm = distance_matrix(corridor["model"], corridor["train"], [0, 2],
                             repeats=1, stop_ratio=90.0, seed=1,
                             attack_params={"stage1_iters": 0,
                                            "stage2_min_iters": 0,
                                            "suppress_leakage": False})
        assert dm.std[0, 1] == 0.0 and dm.std[1, 0] == 0.0
        assert np.isnan(dm.mean[0, 0]) and np.isnan(dm.mean[1, 1])
        assert dm.mean[0, 1] > 0 and dm.mean[1, 0] > 0

    def test_asymmetry_allowed_and_scale_sane(self, corridor):
        cents = corridor["centroids"]
        dm = distance_matrix(corridor["model"], corridor["train"], [0, 2],
                             repeats=2, stop_ratio=95.0, seed=2,
                             attack_params={"stage1_iters": 0,
                                            "stage2_min_iters": 0,
                                            "suppress_leakage": False})
        D = np.linalg.norm(cents[0] - cents[2])
        for val in (dm.mean[0, 1], dm.mean[1, 0]):
            assert 0.5 * D <= val <= 3.0 * D  # centroid-shift oracle band
        assert dm.mean[0, 1] != dm.mean[1, 0]

    def test_bit_reproducible(self, corridor):
        kw = dict(repeats=2, stop_ratio=90.0, seed=5,
                  attack_params={"stage1_iters": 0, "stage2_min_iters": 0,
                                 "suppress_leakage": False})
        a = distance_matrix(corridor["model"], corridor["train"], [0, 2], **kw)
        b = distance_matrix(corridor["model"], corridor["train"], [0, 2], **kw)
        assert np.array_equal(a.mean, b.mean, equal_nan=True)
        assert np.array_equal(a.std, b.std, equal_nan=True)

    def test_reserved_override_rejected(self, corridor):
        with pytest.raises(ValidationError):
            distance_matrix(corridor["model"], corridor["train"], [0, 2],
                            attack_params={"norm": "l2"})


class TestAblation:
    def test_paired_runs_and_mechanism(self, blob_problem):
        model = blob_problem["model"]
        pools = build_pools(model, blob_problem["train"], blob_problem["test"],
                            0, seed=3)
        params = dict(norm="linf", eta=0.25, batch_size=16,
                      stage1_batch_size=16, stage1_iters=10,
                      stage2_min_iters=10, max_iters=60, stop_ratio=0.0, seed=6)
        res = ablation_compare(model, pools, params, target_label=1)
        assert res.leakage_rise == res.unsuppressed.leakage - res.suppressed.leakage
        assert res.fooling_change == (res.unsuppressed.fooling_test
                                      - res.suppressed.fooling_test)
        # identical seeds: reruns are bit-identical
        res2 = ablation_compare(model, pools, params, target_label=1)
        assert res2.suppressed.fooling_test == res.suppressed.fooling_test
        assert res2.unsuppressed.leakage == res.unsuppressed.leakage
