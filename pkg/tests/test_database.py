import numpy as np
import pytest

from patternid import net
from patternid.database import (
    EmbeddingDatabase,
    EmbeddingRecord,
    add_record,
    build_database,
    confirm_identity,
    create_individual,
    db_bytes,
    knn_query,
    load_db,
    parse_db,
    save_db,
)
from patternid.errors import ConfigError, DataError, FingerprintMismatch, FormatError


def random_db(rng, n=50, dim=8, n_ids=10, fingerprint="f" * 16):
    db = EmbeddingDatabase(dim, fingerprint)
    for i in range(n):
        iid = f"id{int(rng.integers(n_ids)):03d}"
        db = add_record(
            db,
            EmbeddingRecord(iid, f"img{i:04d}", rng.normal(size=dim).astype(np.float32)),
        )
    return db


def brute_force_ranking(db, query):
    """Full-sort oracle: stable sort over per-record distances."""
    dists = [float(np.linalg.norm(r.vector.astype(np.float64) - query)) for r in db.records]
    order = sorted(range(len(dists)), key=lambda i: (dists[i], i))
    return order, dists


class TestKnnQuery:
    def test_stored_vector_ranks_first_with_zero_distance(self, rng):
        db = random_db(rng)
        target = db.records[17]
        result = knn_query(db, target.vector, k=3)
        assert result.entries[0].image_id == target.image_id
        assert result.entries[0].distance == 0.0

    def test_matches_full_sort_oracle(self, rng):
        for trial in range(20):
            db = random_db(rng, n=int(rng.integers(5, 120)))
            query = rng.normal(size=8).astype(np.float32)
            order, dists = brute_force_ranking(db, query.astype(np.float64))
            for k in (1, 3, 7, len(db), len(db) + 50):
                result = knn_query(db, query, k)
                expect = order[: min(k, len(db))]
                got_ids = [(e.individual_id, e.image_id) for e in result.entries]
                exp_ids = [
                    (db.records[i].individual_id, db.records[i].image_id) for i in expect
                ]
                assert got_ids == exp_ids

    def test_k_larger_than_db_returns_all(self, rng):
        db = random_db(rng, n=50)
        assert len(knn_query(db, rng.normal(size=8), 10**6).entries) == 50

    def test_distances_non_decreasing(self, rng):
        db = random_db(rng)
        result = knn_query(db, rng.normal(size=8), 20)
        d = [e.distance for e in result.entries]
        assert d == sorted(d)

    def test_tied_distances_keep_insertion_order(self):
        db = EmbeddingDatabase(2, "f" * 16)
        v = np.array([1.0, 0.0], dtype=np.float32)
        for i in range(4):
            db = add_record(db, EmbeddingRecord("a", f"i{i}", v))
        result = knn_query(db, np.zeros(2, dtype=np.float32), 4)
        assert [e.image_id for e in result.entries] == ["i0", "i1", "i2", "i3"]

    def test_dimension_mismatch_rejected(self, rng):
        db = random_db(rng)
        with pytest.raises(DataError, match="embedding_dim"):
            knn_query(db, np.zeros(5), 1)

    def test_k_zero_rejected(self, rng):
        db = random_db(rng)
        with pytest.raises(ConfigError):
            knn_query(db, np.zeros(8), 0)

    def test_unknown_individual_query_is_fine(self, rng):
        # Open-set: a query far from everything still returns neighbors.
        db = random_db(rng)
        far = np.full(8, 100.0, dtype=np.float32)
        result = knn_query(db, far, 5)
        assert len(result.entries) == 5
        assert all(e.distance > 0 for e in result.entries)


class TestAddRecord:
    def test_monotone_growth_preserves_prior_order(self, rng):
        db = random_db(rng, n=30)
        queries = [rng.normal(size=8).astype(np.float32) for _ in range(5)]
        before = [knn_query(db, q, 30) for q in queries]
        db2 = add_record(
            db, EmbeddingRecord("new", "n0", rng.normal(size=8).astype(np.float32))
        )
        assert len(db2) == 31 and len(db) == 30
        for q, prior in zip(queries, before):
            after = knn_query(db2, q, 31)
            kept = [e for e in after.entries if e.individual_id != "new"]
            assert [(e.individual_id, e.image_id) for e in kept] == [
                (e.individual_id, e.image_id) for e in prior.entries
            ]

    def test_duplicate_key_rejected(self, rng):
        db = random_db(rng, n=5)
        r = db.records[0]
        with pytest.raises(DataError, match="duplicate"):
            add_record(db, EmbeddingRecord(r.individual_id, r.image_id, r.vector))

    def test_wrong_dim_rejected(self, rng):
        db = random_db(rng)
        with pytest.raises(DataError, match="vector length"):
            add_record(db, EmbeddingRecord("x", "y", np.zeros(3, dtype=np.float32)))


@pytest.fixture(scope="module")
def model_setup(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("dbmodel")
    cfg = net.ModelConfig(conv_channels=(4, 8), embedding_dim=32)
    params = net.init_params(cfg, 3)
    ckpt = tmp / "model.pidm"
    net.save_checkpoint(params, cfg, ckpt)
    fp = net.fingerprint_file(ckpt)
    return params, cfg, ckpt, fp


class TestConfirmAndCreate:
    def test_confirm_then_requery_rank_one_zero_distance(self, model_setup, rng):
        params, cfg, ckpt, fp = model_setup
        db = EmbeddingDatabase(32, fp)
        px = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
        db = create_individual(db, px, "alpha", "a0", params, cfg, fp)
        assert db.image_counts() == {"alpha": 1}
        db = confirm_identity(db, px, "alpha", "a1", params, cfg, fp)
        vec = net.embed_pixels(params, cfg, px[None])[0]
        result = knn_query(db, vec, 1)
        assert result.entries[0].individual_id == "alpha"
        assert result.entries[0].distance == 0.0

    def test_confirm_unknown_individual_rejected(self, model_setup, rng):
        params, cfg, ckpt, fp = model_setup
        db = EmbeddingDatabase(32, fp)
        px = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
        with pytest.raises(DataError, match="unknown individual"):
            confirm_identity(db, px, "ghost", "g0", params, cfg, fp)

    def test_create_existing_individual_rejected(self, model_setup, rng):
        params, cfg, ckpt, fp = model_setup
        db = EmbeddingDatabase(32, fp)
        px = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
        db = create_individual(db, px, "beta", "b0", params, cfg, fp)
        with pytest.raises(DataError, match="already exists"):
            create_individual(db, px, "beta", "b1", params, cfg, fp)

    def test_fingerprint_mismatch_rejected(self, model_setup, rng):
        params, cfg, ckpt, fp = model_setup
        db = EmbeddingDatabase(32, "0" * 16)
        px = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
        with pytest.raises(FingerprintMismatch):
            confirm_identity(db, px, "any", "a0", params, cfg, fp)


class TestBuildDatabase:
    def test_counts_and_recompute_oracle(self, model_setup, small_manifest):
        params, cfg, ckpt, fp = model_setup
        db = build_database(ckpt, small_manifest)
        total = sum(len(v) for v in small_manifest.images.values())
        assert len(db) == total
        assert db.fingerprint == fp
        # Every stored vector equals a fresh forward pass of its image.
        from patternid.corpus import read_pgm

        for record in db.records[:6]:
            px = read_pgm(record.source)
            fresh = net.embed_pixels(params, cfg, px[None])[0]
            assert np.array_equal(record.vector, fresh)

    def test_rebuild_byte_identical(self, model_setup, small_manifest):
        _, _, ckpt, _ = model_setup
        a = db_bytes(build_database(ckpt, small_manifest))
        b = db_bytes(build_database(ckpt, small_manifest))
        assert a == b

    def test_unreadable_image_skipped_with_warning(self, model_setup, small_manifest, caplog):
        import logging

        _, _, ckpt, _ = model_setup
        iid = small_manifest.individual_ids[0]
        image_id = small_manifest.images[iid][0]
        path = small_manifest.image_path(iid, image_id)
        original = path.read_bytes()
        try:
            path.write_bytes(b"garbage")
            with caplog.at_level(logging.WARNING):
                db = build_database(ckpt, small_manifest)
            total = sum(len(v) for v in small_manifest.images.values())
            assert len(db) == total - 1
            assert any("skip" in m for m in caplog.messages)
        finally:
            path.write_bytes(original)


class TestPersistence:
    def test_round_trip_preserves_everything(self, rng, tmp_path):
        db = random_db(rng, n=23)
        path = tmp_path / "db.pidb"
        save_db(db, path)
        loaded = load_db(path)
        assert loaded.embedding_dim == db.embedding_dim
        assert loaded.fingerprint == db.fingerprint
        assert len(loaded) == len(db)
        for a, b in zip(db.records, loaded.records):
            assert a.individual_id == b.individual_id
            assert a.image_id == b.image_id
            assert np.array_equal(a.vector, b.vector)
        assert db_bytes(loaded) == db_bytes(db)

    def test_round_trip_preserves_tie_break_order(self, tmp_path):
        db = EmbeddingDatabase(2, "f" * 16)
        v = np.array([3.0, 4.0], dtype=np.float32)
        for i in range(5):
            db = add_record(db, EmbeddingRecord("a", f"i{i}", v))
        path = tmp_path / "ties.pidb"
        save_db(db, path)
        loaded = load_db(path)
        result = knn_query(loaded, np.zeros(2, dtype=np.float32), 5)
        assert [e.image_id for e in result.entries] == [f"i{i}" for i in range(5)]

    def test_truncated_rejected_with_offset(self, rng, tmp_path):
        db = random_db(rng, n=4)
        data = db_bytes(db)
        with pytest.raises(FormatError, match="size mismatch"):
            parse_db(data[:-7])

    def test_bad_magic_rejected(self, rng):
        db = random_db(rng, n=2)
        data = bytearray(db_bytes(db))
        data[:4] = b"NOPE"
        with pytest.raises(FormatError, match="offset 0"):
            parse_db(bytes(data))

    def test_bad_version_rejected(self, rng):
        db = random_db(rng, n=2)
        data = bytearray(db_bytes(db))
        data[4] = 42
        with pytest.raises(FormatError, match="version"):
            parse_db(bytes(data))
