import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mmofl.datagen import (
    INDEPENDENT,
    SYNCHRONIZED,
    ClientStream,
    MultimodalDataset,
    PartitionConfig,
    RoundBatch,
    SyntheticSpec,
    advance_stream,
    apply_schedule,
    build_schedule,
    class_centers,
    generate_synthetic,
    largest_remainder,
    load_external,
    make_streams,
    partition_dirichlet,
    train_test_split,
    write_dataset,
)


def _tv_from_uniform(hist):
    p = hist / hist.sum()
    return 0.5 * np.abs(p - 1.0 / len(p)).sum()


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(total_samples=300, seed=4)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert all(np.array_equal(x, y) for x, y in zip(a.data, b.data))
        assert np.array_equal(a.labels, b.labels)

    def test_uninformative_modality_indistinguishable(self):
        spec = SyntheticSpec(num_classes=2, modality_informativeness=(1.0, 0.0), total_samples=2000, seed=3)
        ds = generate_synthetic(spec)
        assert not np.any(class_centers(spec)[1])
        x = ds.data[1].mean(axis=1)
        a, b = x[ds.labels == 0][:1000], x[ds.labels == 1][:1000]
        assert stats.ttest_ind(a, b).pvalue > 0.01
        # the informative modality separates the same classes clearly
        y = ds.data[0] @ (class_centers(spec)[0][0] - class_centers(spec)[0][1])
        assert stats.ttest_ind(y[ds.labels == 0], y[ds.labels == 1]).pvalue < 1e-10

    def test_zero_noise_hits_centers(self):
        spec = SyntheticSpec(noise_std=0.0, total_samples=60)
        ds = generate_synthetic(spec)
        for centers, x in zip(class_centers(spec), ds.data):
            assert np.array_equal(x, centers[ds.labels])

    def test_default_mirrors_har_shape(self):
        spec = SyntheticSpec()
        assert spec.num_classes == 6 and len(spec.input_dims) == 2 and spec.total_samples == 10299

    def test_balanced_labels(self):
        ds = generate_synthetic(SyntheticSpec(total_samples=600))
        assert np.all(ds.class_histogram() == 100)

    @pytest.mark.parametrize(
        "kw",
        [
            {"class_center_separation": 0.0},
            {"noise_std": -1.0},
            {"modality_informativeness": (1.0, 1.5)},
            {"modality_informativeness": (1.0,)},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)

    def test_split_disjoint(self):
        ds = generate_synthetic(SyntheticSpec(total_samples=100))
        tr, te = train_test_split(ds, 0.2, 0)
        assert len(tr) == 80 and len(te) == 20


class TestExternal:
    def _write(self, tmp_path, rows=(3, 3), labels=3):
        (tmp_path / "a.csv").write_text("".join(f"{i},{i + 0.5}\n" for i in range(rows[0])))
        (tmp_path / "b.csv").write_text("".join(f"{-i}\n" for i in range(rows[1])))
        (tmp_path / "y.csv").write_text("".join(f"{i % 2}\n" for i in range(labels)))
        (tmp_path / "manifest.json").write_text(
            json.dumps({"modalities": ["a.csv", "b.csv"], "labels": "y.csv", "num_classes": 2})
        )

    def test_toy_three_rows(self, tmp_path):
        self._write(tmp_path)
        ds = load_external(tmp_path)
        assert len(ds) == 3 and ds.input_dims == (2, 1)
        assert ds.data[0][2, 1] == 2.5 and list(ds.labels) == [0, 1, 0]

    def test_mismatched_rows(self, tmp_path):
        self._write(tmp_path, rows=(3, 4))
        with pytest.raises(ValueError, match="mismatch"):
            load_external(tmp_path)

    def test_bad_cell_and_nan(self, tmp_path):
        self._write(tmp_path)
        (tmp_path / "b.csv").write_text("0\nabc\n1\n")
        with pytest.raises(ValueError):
            load_external(tmp_path)
        (tmp_path / "b.csv").write_text("0\nnan\n1\n")
        with pytest.raises(ValueError):
            load_external(tmp_path)

    def test_label_out_of_range(self, tmp_path):
        self._write(tmp_path)
        (tmp_path / "y.csv").write_text("0\n1\n2\n")
        with pytest.raises(ValueError):
            load_external(tmp_path)

    def test_har_shaped_manifest(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 10299
        y = np.arange(n) % 6
        ds = MultimodalDataset((rng.standard_normal((n, 2)), rng.standard_normal((n, 3))), y, 6)
        write_dataset(ds, tmp_path)
        back = load_external(tmp_path)
        assert len(back) == n and back.num_classes == 6 and back.num_modalities == 2
        assert np.array_equal(back.data[1], ds.data[1])


class TestPartition:
    def test_largest_remainder(self):
        assert list(largest_remainder(np.array([1.0, 1.0, 1.0]), 10)) == [4, 3, 3]
        assert largest_remainder(np.array([0.2, 0.5, 0.3]), 7).sum() == 7

    def test_pool_sizes_exact_and_disjoint(self):
        ds = generate_synthetic(SyntheticSpec(total_samples=10299))
        part = partition_dirichlet(ds, PartitionConfig(), 0)
        assert [len(p) for p in part.pools] == [2000] * 5
        allidx = np.concatenate(part.pools)
        assert len(np.unique(allidx)) == allidx.size and not part.with_replacement

    def test_large_alpha_matches_global(self):
        ds = generate_synthetic(SyntheticSpec(total_samples=10299))
        glob = ds.class_histogram() / len(ds)
        for seed in range(10):
            part = partition_dirichlet(ds, PartitionConfig(alpha=1e6), seed)
            for pool in part.pools:
                h = np.bincount(ds.labels[pool], minlength=6) / len(pool)
                assert np.max(np.abs(h - glob)) <= 0.05

    def test_tv_monotone_in_alpha(self):
        ds = generate_synthetic(SyntheticSpec(total_samples=10299))
        tv = {}
        for alpha in (0.1, 1.0, 10.0):
            vals = []
            for seed in range(10):
                part = partition_dirichlet(ds, PartitionConfig(alpha=alpha), seed)
                vals += [_tv_from_uniform(np.bincount(ds.labels[p], minlength=6)) for p in part.pools]
            tv[alpha] = np.mean(vals)
        assert tv[0.1] >= tv[1.0] >= tv[10.0]

    def test_single_client_uniform_sample(self):
        ds = generate_synthetic(SyntheticSpec(total_samples=3000))
        part = partition_dirichlet(ds, PartitionConfig(num_clients=1), 0)
        h = np.bincount(ds.labels[part.pools[0]], minlength=6)
        assert len(np.unique(part.pools[0])) == 2000
        assert np.all(np.abs(h - 2000 / 6) <= 1)

    def test_short_dataset_uses_replacement(self):
        ds = generate_synthetic(SyntheticSpec(total_samples=1200))
        part = partition_dirichlet(ds, PartitionConfig(num_clients=2, initial_pool_per_client=1000), 0)
        assert part.with_replacement and all(len(p) == 1000 for p in part.pools)

    @pytest.mark.parametrize("pool", [2000, 1500])
    def test_large_pool_sizes_accepted(self, pool):
        PartitionConfig(num_clients=5, initial_pool_per_client=pool, window_size=500)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            PartitionConfig(window_size=10, churn_per_round=11, initial_pool_per_client=100)
        with pytest.raises(ValueError):
            PartitionConfig(window_size=600, initial_pool_per_client=500)


class TestStream:
    def test_churn_zero_constant(self):
        s = ClientStream(np.arange(50), 10, 0)
        assert all(np.array_equal(s.window(0), s.window(t)) for t in range(5))

    def test_zero_overlap_after_25_rounds(self):
        s = ClientStream(np.arange(2000), 500, 20)
        assert np.intersect1d(s.window(0), s.window(25)).size == 0
        assert np.intersect1d(s.window(0), s.window(24)).size == 20

    def test_consecutive_overlap_800(self):
        s = ClientStream(np.arange(1500), 800, 20)
        for t in range(10):
            assert np.intersect1d(s.window(t), s.window(t + 1)).size == 780

    def test_fifo_eviction(self):
        s = ClientStream(np.arange(300), 50, 7)
        for t in range(40):
            a, b = s.insertion_rounds(t), s.insertion_rounds(t + 1)
            assert len(s.window(t)) == 50
            # the evicted prefix is the oldest, the appended suffix is brand new
            assert a[:7].max() <= a[7:].min()
            assert np.array_equal(a[7:], b[:-7]) and np.all(b[-7:] == t + 1)

    def test_stream_determinism(self):
        ds = generate_synthetic(SyntheticSpec(total_samples=4000))
        cfg = PartitionConfig(num_clients=2, initial_pool_per_client=1000, window_size=100)
        runs = []
        for _ in range(2):
            streams = make_streams(partition_dirichlet(ds, cfg, 5), cfg)
            runs.append([advance_stream(ds, s, t, k) for t in range(30) for k, s in enumerate(streams)])
        for a, b in zip(*runs):
            assert a.labels.tobytes() == b.labels.tobytes()
            assert all(x.tobytes() == y.tobytes() for x, y in zip(a.data, b.data))


class TestSchedule:
    def test_lambda_zero_empty(self):
        assert build_schedule(50, 0.0, 2, 5).missing == {}

    def test_lambda_one_sync(self):
        s = build_schedule(40, 1.0, 2, 5, SYNCHRONIZED, 1)
        for t in range(40):
            sets = {s.missing_set(t, k) for k in range(5)}
            assert len(sets) == 1 and len(next(iter(sets))) == 1

    def test_half_of_200(self):
        s = build_schedule(200, 0.5, 2, 5, SYNCHRONIZED, 0)
        assert len(s.missing_rounds) == 100
        assert min(s.beta(t, k) for t in range(200) for k in range(5)) >= 2 / 3

    def test_single_modality_rejects_missing(self):
        with pytest.raises(ValueError):
            build_schedule(10, 0.5, 1, 2)

    def test_apply(self):
        s = build_schedule(10, 1.0, 2, 1, SYNCHRONIZED, 0)
        x = (np.ones((3, 2)), np.zeros((3, 2)))
        y = np.array([0, 1, 2])
        t = 4
        gone = next(iter(s.missing_set(t, 0)))
        out = apply_schedule(RoundBatch(x, y, (True, True), 0, t), s)
        assert out.availability == tuple(m != gone for m in range(2))
        assert out.data[gone] is None and out.labels is y
        untouched = RoundBatch(x, y, (True, True), 0, t)
        assert apply_schedule(untouched, build_schedule(10, 0.0, 2, 1)) is untouched

    def test_full_sweep_matches(self):
        s = build_schedule(30, 0.6, 3, 4, INDEPENDENT, 2)
        x = tuple(np.zeros((2, 1)) for _ in range(3))
        for t in range(30):
            for k in range(4):
                b = apply_schedule(RoundBatch(x, np.array([0, 0]), (True,) * 3, k, t), s)
                assert b.availability == s.available(t, k)

    def test_export(self, tmp_path):
        s = build_schedule(4, 0.5, 2, 2, SYNCHRONIZED, 0)
        s.export_csv(tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "round,client,modality,available" and len(lines) == 1 + 4 * 2 * 2


@settings(max_examples=60, deadline=None)
@given(
    T=st.integers(1, 120),
    lam=st.floats(0.0, 1.0),
    M=st.integers(2, 4),
    K=st.integers(1, 6),
    mode=st.sampled_from([SYNCHRONIZED, INDEPENDENT]),
    seed=st.integers(0, 1000),
)
def test_schedule_soundness(T, lam, M, K, mode, seed):
    s = build_schedule(T, lam, M, K, mode, seed)
    assert len(s.missing_rounds) == int(np.floor(lam * T + 0.5))
    for t in range(T):
        for k in range(K):
            assert sum(s.available(t, k)) >= 1
        if mode == SYNCHRONIZED and t in s.missing:
            assert all(len(s.missing_set(t, k)) == 1 for k in range(K))
            assert len({s.missing_set(t, k) for k in range(K)}) == 1
