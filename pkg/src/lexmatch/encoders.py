"""Sentence encoders and a persistent embedding cache.

The rest of the model only sees sentence vectors, so the encoder is a
small contract: ``encode`` maps a list of strings to a float32 array of
shape ``[n, dim]``, and ``encode_tensor`` does the same as a torch
tensor (differentiable only for trainable encoders). Two encoders ship:

* :class:`HashingEncoder`, a deterministic hashed character n-gram
  embedder with no parameters. It is fast, process-stable, and the
  default for experiments that do not need a pretrained model.
* :class:`TransformerEncoder`, which takes the first-token hidden state
  of a local pretrained checkpoint. Optional; requires ``transformers``.

Both count how often they run so tests can assert that cached paths
never re-encode.
"""

from __future__ import annotations

import hashlib
import sqlite3
from pathlib import Path

import numpy as np
import torch


class HashingEncoder:
    """Signed hashed character n-grams (n = 1..3), L2 normalized.

    Hashing uses blake2b keyed by the seed, so vectors are identical
    across processes and platforms. The empty string maps to the zero
    vector.
    """

    def __init__(self, dim: int, seed: int = 0, max_ngram: int = 3):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed
        self.max_ngram = max_ngram
        self.name = f"hash{max_ngram}-d{dim}-s{seed}"
        self.calls = 0
        self.texts_encoded = 0
        self._key = seed.to_bytes(8, "little", signed=True)
        self._slots: dict[str, tuple[int, float]] = {}

    def _slot(self, gram: str) -> tuple[int, float]:
        hit = self._slots.get(gram)
        if hit is None:
            digest = hashlib.blake2b(gram.encode("utf-8"), key=self._key,
                                     digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            hit = (value % self.dim, 1.0 if value >> 63 else -1.0)
            self._slots[gram] = hit
        return hit

    def encode(self, texts: list[str]) -> np.ndarray:
        self.calls += 1
        self.texts_encoded += len(texts)
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for row, text in enumerate(texts):
            s = text.lower()
            for n in range(1, self.max_ngram + 1):
                for i in range(len(s) - n + 1):
                    slot, sign = self._slot(s[i : i + n])
                    out[row, slot] += sign
            norm = float(np.linalg.norm(out[row]))
            if norm > 0:
                out[row] /= norm
        return out

    def encode_tensor(self, texts: list[str], dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.encode(texts)).to(dtype)

    def parameters(self):
        return []


class TransformerEncoder:
    """First-token pooling over a local pretrained transformer checkpoint."""

    def __init__(self, checkpoint: str, max_tokens: int = 150, trainable: bool = False):
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ImportError(
                "TransformerEncoder requires the 'transformers' package; "
                "install the 'transformer' extra") from exc
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint)
        self.module = AutoModel.from_pretrained(checkpoint)
        self.dim = int(self.module.config.hidden_size)
        self.max_tokens = max_tokens
        self.trainable = trainable
        self.name = f"transformer-{Path(checkpoint).name}"
        self.calls = 0
        self.texts_encoded = 0
        if not trainable:
            self.module.eval()
            for param in self.module.parameters():
                param.requires_grad_(False)

    def encode_tensor(self, texts: list[str], dtype=torch.float32) -> torch.Tensor:
        self.calls += 1
        self.texts_encoded += len(texts)
        batch = self.tokenizer(texts, padding=True, truncation=True,
                               max_length=self.max_tokens, return_tensors="pt")
        if self.trainable:
            hidden = self.module(**batch).last_hidden_state
        else:
            with torch.no_grad():
                hidden = self.module(**batch).last_hidden_state
        return hidden[:, 0, :].to(dtype)

    def encode(self, texts: list[str]) -> np.ndarray:
        return self.encode_tensor(texts).detach().cpu().numpy().astype(np.float32)

    def parameters(self):
        return self.module.parameters() if self.trainable else []


class EmbeddingCache:
    """SQLite-backed store of sentence vectors, keyed by encoder and text.

    Vectors round-trip bit for bit: float32 bytes go in, the same bytes
    come out. Keys hash the exact text, so any edit is a miss.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._db = sqlite3.connect(self.path)
        self._db.execute(
            "CREATE TABLE IF NOT EXISTS embeddings ("
            " encoder TEXT NOT NULL,"
            " text_sha TEXT NOT NULL,"
            " dim INTEGER NOT NULL,"
            " vec BLOB NOT NULL,"
            " PRIMARY KEY (encoder, text_sha))")
        self._db.commit()

    @staticmethod
    def _sha(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def get(self, encoder_name: str, text: str) -> np.ndarray | None:
        row = self._db.execute(
            "SELECT dim, vec FROM embeddings WHERE encoder = ? AND text_sha = ?",
            (encoder_name, self._sha(text))).fetchone()
        if row is None:
            return None
        dim, blob = row
        return np.frombuffer(blob, dtype=np.float32).reshape(dim).copy()

    def put(self, encoder_name: str, text: str, vec: np.ndarray) -> None:
        vec = np.ascontiguousarray(vec, dtype=np.float32)
        self._db.execute(
            "INSERT OR REPLACE INTO embeddings (encoder, text_sha, dim, vec) "
            "VALUES (?, ?, ?, ?)",
            (encoder_name, self._sha(text), vec.shape[0], vec.tobytes()))

    def commit(self) -> None:
        self._db.commit()

    def close(self) -> None:
        self._db.commit()
        self._db.close()


class CachedEncoder:
    """Encoder wrapper that serves repeats from an :class:`EmbeddingCache`."""

    def __init__(self, encoder, cache: EmbeddingCache):
        self.encoder = encoder
        self.cache = cache
        self.dim = encoder.dim
        self.name = encoder.name
        self.hits = 0
        self.misses = 0

    @property
    def calls(self) -> int:
        return self.encoder.calls

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        missing: list[int] = []
        for i, text in enumerate(texts):
            vec = self.cache.get(self.name, text)
            if vec is None:
                missing.append(i)
            else:
                out[i] = vec
                self.hits += 1
        if missing:
            fresh = self.encoder.encode([texts[i] for i in missing])
            for row, i in enumerate(missing):
                out[i] = fresh[row]
                self.cache.put(self.name, texts[i], fresh[row])
            self.cache.commit()
            self.misses += len(missing)
        return out

    def encode_tensor(self, texts: list[str], dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.encode(texts)).to(dtype)

    def parameters(self):
        return self.encoder.parameters()


def deterministic_test_encoder(dim: int, seed: int = 0) -> HashingEncoder:
    """Encoder fixtures for tests: stable vectors, no model downloads."""
    return HashingEncoder(dim=dim, seed=seed)


def encode_case_sentences(encoder, sentences: list[str]) -> np.ndarray:
    """Embed one case's sentences as a ``[n_sentences, dim]`` float32 array."""
    return encoder.encode(sentences)


def encode_articles(encoder, articles: dict) -> tuple[list[str], np.ndarray]:
    """Embed law articles in canonical id order.

    Returns the sorted article ids and the matching ``[n_articles, dim]``
    embedding matrix, so column k of any article-space tensor always
    refers to ``ids[k]``.
    """
    ids = sorted(articles)
    if not ids:
        raise ValueError("no articles to encode")
    texts = [articles[aid].text for aid in ids]
    return ids, encoder.encode(texts)
