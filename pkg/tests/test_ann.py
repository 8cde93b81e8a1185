import numpy as np
import pytest

from kvds.ann import (
    IndexConfig,
    SearchParams,
    adc_table,
    as_searcher,
    default_nlist,
    read_index,
    search,
    train_index,
    write_index,
)
from kvds.datastore import (
    AlignmentStrategy,
    FormatError,
    RawDatastore,
    exact_search,
)


def _store(rng, n, d, clusters=0, spread=1.0) -> RawDatastore:
    if clusters:
        centers = rng.standard_normal((clusters, d)) * 4.0
        pick = rng.integers(0, clusters, size=n)
        keys = centers[pick] + rng.standard_normal((n, d)) * spread
    else:
        keys = rng.standard_normal((n, d))
    values = rng.integers(0, 50, size=n).astype(np.int64)
    return RawDatastore(keys=keys, values=values, strategy=AlignmentStrategy.CLM)


class TestDefaults:
    def test_default_nlist(self):
        assert default_nlist(1) == 1
        assert default_nlist(100) == 10
        assert default_nlist(10_000) == 100
        assert default_nlist(10**9) == 4096


class TestFlat:
    def test_full_probe_matches_exact_search(self):
        rng = np.random.default_rng(0)
        ds = _store(rng, 500, 16)
        index = train_index(ds, IndexConfig(nlist=8), seed=0)
        for _ in range(20):
            q = rng.standard_normal(16)
            approx = search(index, q, SearchParams(k=5, nprobe=index.nlist))
            exact = exact_search(ds, q, k=5)
            np.testing.assert_array_equal(approx.ids, exact.ids)
            np.testing.assert_array_equal(approx.values, exact.values)
            np.testing.assert_allclose(approx.distances, exact.distances, atol=1e-5)

    def test_k_exceeding_candidates(self):
        rng = np.random.default_rng(1)
        ds = _store(rng, 40, 8)
        index = train_index(ds, IndexConfig(nlist=4), seed=0)
        ns = search(index, rng.standard_normal(8), SearchParams(k=1000, nprobe=4))
        assert len(ns) == 40
        assert np.all(np.diff(ns.distances) >= 0)

    def test_more_probes_never_worse(self):
        rng = np.random.default_rng(2)
        ds = _store(rng, 600, 12)
        index = train_index(ds, IndexConfig(nlist=12), seed=1)
        for _ in range(10):
            q = rng.standard_normal(12)
            best = [
                search(index, q, SearchParams(k=1, nprobe=p)).distances[0]
                for p in (1, 3, 6, 12)
            ]
            assert all(best[i + 1] <= best[i] + 1e-12 for i in range(len(best) - 1))

    def test_searcher_adapter(self):
        rng = np.random.default_rng(3)
        ds = _store(rng, 300, 8)
        index = train_index(ds, IndexConfig(nlist=4), seed=0)
        run = as_searcher(index, SearchParams(nprobe=4))
        q = rng.standard_normal(8)
        np.testing.assert_array_equal(
            run(q, 3).ids, search(index, q, SearchParams(k=3, nprobe=4)).ids
        )


class TestPq:
    def test_recall_on_clustered_data(self):
        # Well-separated clusters whose local variation is low-rank: the
        # regime where one-byte-per-subvector codes can resolve neighbors.
        rng = np.random.default_rng(4)
        d, n, clusters = 32, 2000, 16
        centers = rng.standard_normal((clusters, d)) * 4.0
        basis = np.linalg.qr(rng.standard_normal((d, 2)))[0].T
        local = lambda m: (rng.standard_normal((m, 2)) * 0.25) @ basis * 4.0
        keys = centers[rng.integers(0, clusters, size=n)] + local(n)
        ds = RawDatastore(
            keys=keys,
            values=rng.integers(0, 50, size=n).astype(np.int64),
            strategy=AlignmentStrategy.CLM,
        )
        index = train_index(ds, IndexConfig(nlist=16, m=4), seed=0)
        hits = total = 0
        for _ in range(50):
            q = centers[rng.integers(0, clusters)] + local(1)[0]
            approx = search(index, q, SearchParams(k=8, nprobe=4))
            exact = exact_search(ds, q, k=8)
            hits += len(set(approx.ids.tolist()) & set(exact.ids.tolist()))
            total += 8
        assert hits / total >= 0.75

    def test_adc_table_against_direct_distance(self):
        rng = np.random.default_rng(5)
        ds = _store(rng, 400, 16)
        index = train_index(ds, IndexConfig(nlist=4, m=4), seed=2)
        rq = rng.standard_normal(16)
        table = adc_table(index, rq)
        assert table.shape == (4, 256)
        sub = 4
        for j in (0, 3):
            for code in (0, 17, 255):
                direct = np.sum((rq[j * sub : (j + 1) * sub] - index.codebooks[j, code]) ** 2)
                assert table[j, code] == pytest.approx(direct, rel=1e-12)

    def test_adc_sum_equals_reconstruction_distance(self):
        rng = np.random.default_rng(6)
        ds = _store(rng, 400, 16)
        index = train_index(ds, IndexConfig(nlist=4, m=4), seed=2)
        rq = rng.standard_normal(16)
        table = adc_table(index, rq)
        codes = rng.integers(0, 256, size=4)
        via_table = sum(table[j, codes[j]] for j in range(4))
        recon = np.concatenate([index.codebooks[j, codes[j]] for j in range(4)])
        assert via_table == pytest.approx(np.sum((rq - recon) ** 2), rel=1e-12)

    def test_rerank_with_full_probe_matches_exact(self):
        rng = np.random.default_rng(7)
        ds = _store(rng, 600, 16)
        index = train_index(ds, IndexConfig(nlist=8, m=4, retain_raw=True), seed=1)
        for _ in range(10):
            q = rng.standard_normal(16)
            approx = search(index, q, SearchParams(k=6, nprobe=8, rerank=True))
            exact = exact_search(ds, q, k=6)
            np.testing.assert_array_equal(approx.ids, exact.ids)
            np.testing.assert_allclose(approx.distances, exact.distances, atol=1e-5)

    def test_rerank_requires_raw(self):
        rng = np.random.default_rng(8)
        ds = _store(rng, 400, 16)
        index = train_index(ds, IndexConfig(nlist=4, m=4), seed=0)
        with pytest.raises(ValueError):
            search(index, np.zeros(16), SearchParams(k=1, rerank=True))


class TestPca:
    def test_flat_pca_on_exact_subspace_matches_exact_search(self):
        rng = np.random.default_rng(9)
        basis = np.linalg.qr(rng.standard_normal((16, 8)))[0].T  # (8, 16) orthonormal
        coords = rng.standard_normal((500, 8))
        keys = coords @ basis
        ds = RawDatastore(
            keys=keys,
            values=rng.integers(0, 9, size=500).astype(np.int64),
            strategy=AlignmentStrategy.MLM,
        )
        index = train_index(ds, IndexConfig(use_pca=True, pca_dim=8, nlist=5), seed=0)
        assert index.dim == 8 and index.dim_in == 16
        for _ in range(10):
            q = rng.standard_normal(8) @ basis
            approx = search(index, q, SearchParams(k=4, nprobe=5))
            exact = exact_search(ds, q, k=4)
            np.testing.assert_array_equal(approx.ids, exact.ids)
            np.testing.assert_allclose(approx.distances, exact.distances, atol=1e-4)


class TestTrainValidation:
    def test_rejects_empty(self):
        empty = RawDatastore(
            keys=np.zeros((0, 8)),
            values=np.zeros(0, np.int64),
            strategy=AlignmentStrategy.CLM,
        )
        with pytest.raises(ValueError):
            train_index(empty, IndexConfig(nlist=1), seed=0)

    def test_rejects_m_not_dividing(self):
        rng = np.random.default_rng(10)
        ds = _store(rng, 300, 10)
        with pytest.raises(ValueError):
            train_index(ds, IndexConfig(nlist=4, m=3), seed=0)

    def test_rejects_small_store_for_pq(self):
        rng = np.random.default_rng(11)
        ds = _store(rng, 100, 8)
        with pytest.raises(ValueError):
            train_index(ds, IndexConfig(nlist=4, m=2), seed=0)

    def test_rejects_nlist_over_count(self):
        rng = np.random.default_rng(12)
        ds = _store(rng, 10, 8)
        with pytest.raises(ValueError):
            train_index(ds, IndexConfig(nlist=11), seed=0)

    def test_pca_needs_dim(self):
        rng = np.random.default_rng(13)
        ds = _store(rng, 50, 8)
        with pytest.raises(ValueError):
            train_index(ds, IndexConfig(use_pca=True, nlist=4), seed=0)


class TestIndexFormat:
    @pytest.mark.parametrize(
        "config",
        [
            IndexConfig(nlist=6),
            IndexConfig(nlist=6, m=4),
            IndexConfig(nlist=6, m=4, retain_raw=True),
            IndexConfig(use_pca=True, pca_dim=8, nlist=6),
            IndexConfig(use_pca=True, pca_dim=8, nlist=6, m=4),
        ],
    )
    def test_round_trip_preserves_search(self, tmp_path, config):
        rng = np.random.default_rng(14)
        ds = _store(rng, 400, 16)
        index = train_index(ds, config, seed=3)
        path = tmp_path / "index.kvdi"
        write_index(index, path)
        back = read_index(path)
        for _ in range(8):
            q = rng.standard_normal(16)
            a = search(index, q, SearchParams(k=5, nprobe=3))
            b = search(back, q, SearchParams(k=5, nprobe=3))
            np.testing.assert_array_equal(a.ids, b.ids)
            np.testing.assert_array_equal(a.values, b.values)
            np.testing.assert_array_equal(a.distances, b.distances)

    def test_rewrite_byte_identical(self, tmp_path):
        rng = np.random.default_rng(15)
        ds = _store(rng, 400, 16)
        index = train_index(ds, IndexConfig(nlist=5, m=4, retain_raw=True), seed=0)
        p1, p2 = tmp_path / "a.kvdi", tmp_path / "b.kvdi"
        write_index(index, p1)
        write_index(read_index(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_same_seed_same_bytes(self, tmp_path):
        rng = np.random.default_rng(16)
        ds = _store(rng, 400, 16)
        p1, p2 = tmp_path / "a.kvdi", tmp_path / "b.kvdi"
        write_index(train_index(ds, IndexConfig(nlist=5, m=4), seed=9), p1)
        write_index(train_index(ds, IndexConfig(nlist=5, m=4), seed=9), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.kvdi"
        path.write_bytes(b"WHAT" + b"\x00" * 64)
        with pytest.raises(FormatError):
            read_index(path)

    def test_truncation(self, tmp_path):
        rng = np.random.default_rng(17)
        ds = _store(rng, 300, 8)
        index = train_index(ds, IndexConfig(nlist=4), seed=0)
        path = tmp_path / "trunc.kvdi"
        write_index(index, path)
        blob = path.read_bytes()
        for cut in (len(blob) - 3, len(blob) // 2, 20):
            path.write_bytes(blob[:cut])
            with pytest.raises(FormatError):
                read_index(path)

    def test_trailing_garbage(self, tmp_path):
        rng = np.random.default_rng(18)
        ds = _store(rng, 300, 8)
        index = train_index(ds, IndexConfig(nlist=4), seed=0)
        path = tmp_path / "extra.kvdi"
        write_index(index, path)
        path.write_bytes(path.read_bytes() + b"\xff")
        with pytest.raises(FormatError):
            read_index(path)


class TestEmptyCells:
    def test_search_skips_empty_cells(self):
        rng = np.random.default_rng(19)
        ds = _store(rng, 200, 8)
        index = train_index(ds, IndexConfig(nlist=4), seed=0)
        # Force a cell to be empty, reassigning its entries nowhere.
        victim = int(np.argmin([len(i) for i in index.list_ids]))
        keep = [c for c in range(4) if c != victim]
        moved = index.list_ids[victim]
        index.list_ids[victim] = np.empty(0, np.int64)
        index.list_residuals[victim] = np.empty((0, 8))
        ns = search(index, rng.standard_normal(8), SearchParams(k=5, nprobe=4))
        assert len(ns) == 5
        assert not set(moved.tolist()) & set(ns.ids.tolist())
        assert keep  # silence unused warning
