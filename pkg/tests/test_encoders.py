"""Hashing encoder determinism, the sqlite cache, and the cached wrapper."""

import numpy as np
import pytest

from lexmatch.encoders import (CachedEncoder, EmbeddingCache, HashingEncoder,
                               deterministic_test_encoder, encode_articles)

SENTENCES = ["The accused stole a phone.", "он скрылся", "盗窃罪", ""]


class TestHashingEncoder:
    def test_shape_and_dtype(self):
        enc = HashingEncoder(dim=24, seed=0)
        out = enc.encode(SENTENCES)
        assert out.shape == (4, 24)
        assert out.dtype == np.float32

    def test_unit_norm_except_empty(self):
        out = HashingEncoder(dim=24, seed=0).encode(SENTENCES)
        norms = np.linalg.norm(out, axis=1)
        np.testing.assert_allclose(norms[:3], 1.0, atol=1e-6)
        assert norms[3] == 0.0

    def test_identical_across_instances(self):
        a = HashingEncoder(dim=32, seed=5).encode(SENTENCES)
        b = HashingEncoder(dim=32, seed=5).encode(SENTENCES)
        assert np.array_equal(a, b)

    def test_seed_changes_vectors(self):
        a = HashingEncoder(dim=32, seed=0).encode(["same text"])
        b = HashingEncoder(dim=32, seed=1).encode(["same text"])
        assert not np.allclose(a, b)

    def test_case_insensitive(self):
        enc = HashingEncoder(dim=32, seed=0)
        a, b = enc.encode(["Stolen Goods", "stolen goods"])
        assert np.array_equal(a, b)

    def test_word_order_matters(self):
        enc = HashingEncoder(dim=64, seed=0)
        a, b = enc.encode(["cat chased dog", "dog chased cat"])
        assert not np.allclose(a, b)

    def test_batch_independence(self):
        enc = HashingEncoder(dim=32, seed=0)
        together = enc.encode(SENTENCES)
        one_by_one = np.vstack([enc.encode([s]) for s in SENTENCES])
        np.testing.assert_allclose(together, one_by_one, atol=1e-6)

    def test_counters(self):
        enc = HashingEncoder(dim=16, seed=0)
        enc.encode(["a", "b"])
        enc.encode(["c"])
        assert enc.calls == 2
        assert enc.texts_encoded == 3

    def test_name_identifies_settings(self):
        assert HashingEncoder(dim=16, seed=3).name == "hash3-d16-s3"

    def test_rejects_bad_dim(self):
        with pytest.raises(ValueError):
            HashingEncoder(dim=0)


class TestEmbeddingCache:
    def test_round_trip_bit_identical(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "emb.sqlite")
        vec = np.random.default_rng(0).standard_normal(16).astype(np.float32)
        cache.put("enc", "some text", vec)
        cache.commit()
        got = cache.get("enc", "some text")
        assert got.dtype == np.float32
        assert np.array_equal(got, vec)
        cache.close()

    def test_keyed_by_encoder_and_text(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "emb.sqlite")
        vec = np.ones(4, dtype=np.float32)
        cache.put("enc-a", "text", vec)
        assert cache.get("enc-b", "text") is None
        assert cache.get("enc-a", "other") is None
        cache.close()

    def test_persists_across_connections(self, tmp_path):
        path = tmp_path / "emb.sqlite"
        first = EmbeddingCache(path)
        first.put("enc", "t", np.arange(3, dtype=np.float32))
        first.commit()
        first.close()
        second = EmbeddingCache(path)
        assert np.array_equal(second.get("enc", "t"),
                              np.arange(3, dtype=np.float32))
        second.close()


class TestCachedEncoder:
    def test_transparent_and_counts_hits(self, tmp_path):
        inner = HashingEncoder(dim=16, seed=0)
        cached = CachedEncoder(inner, EmbeddingCache(tmp_path / "c.sqlite"))
        fresh = cached.encode(SENTENCES[:3])
        assert cached.misses == 3 and cached.hits == 0
        again = cached.encode(SENTENCES[:3])
        assert cached.hits == 3
        assert inner.calls == 1, "repeat texts must not reach the inner encoder"
        assert np.array_equal(fresh, again)

    def test_cached_vectors_bit_identical_to_fresh(self, tmp_path):
        inner = HashingEncoder(dim=16, seed=0)
        cached = CachedEncoder(inner, EmbeddingCache(tmp_path / "c.sqlite"))
        cached.encode(SENTENCES[:3])
        reference = HashingEncoder(dim=16, seed=0).encode(SENTENCES[:3])
        assert np.array_equal(cached.encode(SENTENCES[:3]), reference)


class TestHelpers:
    def test_deterministic_test_encoder_is_seeded_hashing(self):
        enc = deterministic_test_encoder(8, seed=2)
        assert isinstance(enc, HashingEncoder)
        assert enc.dim == 8

    def test_encode_articles_sorted(self, corpus):
        enc = deterministic_test_encoder(16)
        ids, matrix = encode_articles(enc, corpus.articles)
        assert ids == sorted(corpus.articles)
        assert matrix.shape == (len(ids), 16)

    def test_encode_articles_empty_is_error(self):
        with pytest.raises(ValueError):
            encode_articles(deterministic_test_encoder(8), {})
