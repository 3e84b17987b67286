"""Text embedding providers.

The default :class:`HashEmbedder` hashes word tokens and character trigrams
into a fixed-size vector; it needs no network and is stable across processes
and platforms. :class:`RemoteEmbedder` calls an OpenAI-compatible
``/embeddings`` endpoint.
"""

from __future__ import annotations

import hashlib
import os
import re

import httpx
import numpy as np

DEFAULT_DIM = 256
SIMILARITY_DECIMALS = 12

_TOKEN = re.compile(r"[a-z0-9_]+")
STOP_WORDS = frozenset(
    "a an and are as at be by do don for from has have i in is it its me my not of on or our "
    "s so t than that the this to want we will with you your".split())


class EmbeddingError(RuntimeError):
    """The embedding provider failed; remote failures are retryable."""

    retryable = True


def normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize a zero vector")
    return vec / norm


def cosine(a, b) -> float:
    """Cosine similarity of two unit vectors, rounded for stable ranking."""
    return round(float(np.dot(a, b)), SIMILARITY_DECIMALS)


def tokens(text: str) -> list[str]:
    """Lowercase word tokens without stop words."""
    return [w for w in _TOKEN.findall(text.lower()) if w not in STOP_WORDS]


class HashEmbedder:
    """Feature-hashing embedder.

    Each lowercase non-stop-word token contributes weight 1 and each of its boundary
    padded character trigrams weight 0.5, hashed with BLAKE2b to an index and
    a sign. The empty string maps to a fixed sentinel feature so every output
    is a unit vector.
    """

    name = "hash"

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 2:
            raise ValueError("embedding dimension must be at least 2")
        self.dim = dim

    def _bucket(self, feature: str) -> tuple[int, float]:
        h = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
        n = int.from_bytes(h, "little")
        return n % self.dim, (1.0 if (n >> 63) & 1 else -1.0)

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        words = tokens(text)
        if not words:
            words = ["\x00empty"]
        for w in words:
            i, s = self._bucket("w:" + w)
            vec[i] += s
            padded = f"#{w}#"
            for j in range(len(padded) - 2):
                i, s = self._bucket("c:" + padded[j:j + 3])
                vec[i] += 0.5 * s
        return normalize(vec)

    def __call__(self, text: str) -> np.ndarray:
        return self.embed(text)


class RemoteEmbedder:
    """OpenAI-compatible embeddings endpoint, normalized client-side."""

    name = "remote"

    def __init__(self, endpoint: str | None = None, model: str = "text-embedding-3-small",
                 dim: int = DEFAULT_DIM, timeout: float = 60.0, api_key: str | None = None):
        self.endpoint = endpoint or os.environ.get("ARDA_EMBEDDING_ENDPOINT", "")
        self.model = model
        self.dim = dim
        self.timeout = timeout
        self._api_key = api_key or os.environ.get("ARDA_API_KEY", "")

    def embed(self, text: str) -> np.ndarray:
        if not self.endpoint:
            raise EmbeddingError("no embedding endpoint configured")
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        try:
            resp = httpx.post(
                self.endpoint,
                json={"model": self.model, "input": text, "dimensions": self.dim},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=float)
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise EmbeddingError(f"embedding request failed: {exc}") from exc
        if vec.shape != (self.dim,):
            raise EmbeddingError(f"expected dimension {self.dim}, got {vec.shape}")
        return normalize(vec)

    def __call__(self, text: str) -> np.ndarray:
        return self.embed(text)


def make_embedder(provider: str = "hash", dim: int = DEFAULT_DIM, **kwargs):
    if provider == "hash":
        return HashEmbedder(dim)
    if provider == "remote":
        return RemoteEmbedder(dim=dim, **kwargs)
    raise ValueError(f"unknown embedding provider {provider!r}")
