"""Embedding providers: deterministic hashing, remote HTTP, chunk-mean and
section-wise wrappers, plus a content-addressed on-disk vector cache."""
from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import requests

from .serialize import COMPONENT_ORDER


class EmbeddingError(Exception):
    pass


class IntegrityError(EmbeddingError):
    """A provider response violates a declared invariant (wrong dimension,
    non-finite values, degenerate decoder mass)."""


class ProviderUnavailable(EmbeddingError):
    """Raised after bounded retries against a remote provider are exhausted."""


def request_digest(provider_id: str, model_id: str, instruction: str, text: str) -> str:
    """Content address of one embedding request. Fields are length-prefixed
    so no two distinct requests can collide by concatenation."""
    h = hashlib.sha256()
    for part in (provider_id, model_id, instruction, text):
        raw = part.encode("utf-8")
        h.update(len(raw).to_bytes(8, "little"))
        h.update(raw)
    return h.hexdigest()


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    provider_id: str
    model_id: str

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def _check_finite(vec: np.ndarray, origin: str) -> np.ndarray:
    if not np.all(np.isfinite(vec)):
        raise IntegrityError(f"non-finite embedding values from {origin}")
    return vec


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Deterministic signed feature hashing over lowercased alphanumeric
    tokens.

    Instruction tokens hash through a separate namespace so the same word
    lands in different buckets depending on which side it came from. The
    output is L2-normalized unless the accumulator is all zeros.
    """

    def __init__(self, dim: int = 1024, seed: int = 0):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.provider_id = f"hashing(dim={dim},seed={seed})"
        self.model_id = "hashing"
        self._bucket_cache: dict[tuple[str, str], tuple[int, float]] = {}

    def _bucket(self, token: str, namespace: str) -> tuple[int, float]:
        cached = self._bucket_cache.get((namespace, token))
        if cached is not None:
            return cached
        key = f"{self.seed}:{namespace}".encode("utf-8")
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
        index = int.from_bytes(digest[:4], "little") % self.dim
        sign = 1.0 if digest[4] & 1 == 0 else -1.0
        self._bucket_cache[(namespace, token)] = (index, sign)
        return index, sign

    def embed_unnormalized(self, instruction: str, text: str) -> np.ndarray:
        acc = np.zeros(self.dim, dtype=np.float64)
        for namespace, source in (("instruction", instruction), ("text", text)):
            for token in _TOKEN_RE.findall(source.lower()):
                index, sign = self._bucket(token, namespace)
                acc[index] += sign
        return acc

    def embed(self, instruction: str, text: str) -> np.ndarray:
        acc = self.embed_unnormalized(instruction, text)
        norm = np.linalg.norm(acc)
        if norm > 0:
            acc = acc / norm
        return acc.astype(np.float32)


class VectorCache:
    """Append-only content-addressed vector store on disk.

    Layout: index.tsv rows of 'digest<TAB>offset<TAB>dim' plus vectors.bin
    holding little-endian float32 runs. The index line is appended after its
    vector data is flushed, so a crash mid-write leaves only unreachable
    trailing bytes and the cache stays consistent on reopen.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.index_path = self.directory / "index.tsv"
        self.data_path = self.directory / "vectors.bin"
        self._lock = threading.Lock()
        self._index: dict[str, tuple[int, int]] = {}
        if self.index_path.exists():
            for line in self.index_path.read_text("utf-8").splitlines():
                if not line.strip():
                    continue
                digest, offset, dim = line.split("\t")
                self._index[digest] = (int(offset), int(dim))
        # drop unreachable bytes a crashed writer may have left, so appended
        # vectors land back on the float32 grid the index assumes
        end = max(((off + dim) * 4 for off, dim in self._index.values()), default=0)
        if self.data_path.exists() and self.data_path.stat().st_size > end:
            with open(self.data_path, "r+b") as fh:
                fh.truncate(end)
        self._data_file = open(self.data_path, "ab")
        self._index_file = open(self.index_path, "a", encoding="utf-8")

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, digest: str) -> bool:
        return digest in self._index

    def get(self, digest: str) -> Optional[np.ndarray]:
        entry = self._index.get(digest)
        if entry is None:
            return None
        offset, dim = entry
        with open(self.data_path, "rb") as fh:
            fh.seek(offset * 4)
            raw = fh.read(dim * 4)
        return np.frombuffer(raw, dtype="<f4").copy()

    def put(self, digest: str, vector: np.ndarray) -> None:
        with self._lock:
            if digest in self._index:
                return
            data = np.ascontiguousarray(vector, dtype="<f4")
            offset = self._data_file.tell() // 4
            self._data_file.write(data.tobytes())
            self._data_file.flush()
            self._index_file.write(f"{digest}\t{offset}\t{data.shape[0]}\n")
            self._index_file.flush()
            self._index[digest] = (offset, int(data.shape[0]))

    def close(self) -> None:
        self._data_file.close()
        self._index_file.close()


class CachedProvider:
    """Wrap a provider with the content-addressed cache; repeated requests
    never re-hit the underlying provider."""

    def __init__(self, base, cache: VectorCache):
        self.base = base
        self.cache = cache
        self.provider_id = base.provider_id
        self.model_id = base.model_id
        self.hits = 0
        self.misses = 0

    def embed(self, instruction: str, text: str) -> np.ndarray:
        digest = request_digest(self.provider_id, self.model_id, instruction, text)
        cached = self.cache.get(digest)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        vec = self.base.embed(instruction, text)
        self.cache.put(digest, vec)
        return np.asarray(vec, dtype=np.float32)


class RemoteProvider:
    """HTTP embedding client with bounded retries and in-flight limiting.

    Retries cover connection errors, timeouts and 5xx responses with
    exponential backoff plus jitter; 4xx responses fail immediately. A
    declared dimension is enforced on every response.
    """

    def __init__(
        self,
        base_url: str,
        model_id: str,
        dim: Optional[int] = None,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff_base: float = 0.25,
        max_in_flight: int = 8,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.declared_dim = dim
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.provider_id = f"remote({self.base_url},{model_id})"
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(max_in_flight)

    def _post(self, path: str, payload: dict) -> dict:
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)) * (1 + random.random()))
            try:
                with self._gate:
                    resp = self._session.post(
                        f"{self.base_url}{path}", json=payload, timeout=self.timeout
                    )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = EmbeddingError(f"{path} -> {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise EmbeddingError(f"{path} -> {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        raise ProviderUnavailable(f"{self.base_url}{path} failed after {self.max_retries + 1} attempts: {last_error}")

    def embed(self, instruction: str, text: str) -> np.ndarray:
        body = self._post(
            "/embed",
            {"model": self.model_id, "instruction": instruction, "text": text},
        )
        vector = body.get("vector")
        if not isinstance(vector, list):
            raise IntegrityError("embed response missing vector")
        arr = np.asarray(vector, dtype=np.float32)
        if arr.ndim != 1 or arr.shape[0] != int(body.get("dim", -1)):
            raise IntegrityError("embed response dim field disagrees with vector length")
        if self.declared_dim is not None and arr.shape[0] != self.declared_dim:
            raise IntegrityError(
                f"embedding dim {arr.shape[0]} != declared {self.declared_dim}"
            )
        return _check_finite(arr, self.provider_id)

    def tokenize(self, text: str) -> int:
        body = self._post("/tokenize", {"model": self.model_id, "text": text})
        n = body.get("n_tokens")
        if not isinstance(n, int) or n < 0:
            raise IntegrityError("tokenize response missing n_tokens")
        return n

    def health(self) -> dict:
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)) * (1 + random.random()))
            try:
                with self._gate:
                    resp = self._session.get(f"{self.base_url}/health", timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                continue
            if resp.status_code != 200:
                last_error = EmbeddingError(f"/health -> {resp.status_code}")
                continue
            return resp.json()
        raise ProviderUnavailable(f"{self.base_url}/health failed: {last_error}")


def yes_probability(yes_mass: float, no_mass: float) -> float:
    """Normalized probability of the positive answer given the aggregated
    token masses of each side. Degenerate total mass is an integrity error."""
    if not (yes_mass >= 0 and no_mass >= 0):
        raise IntegrityError(f"negative answer mass: yes={yes_mass} no={no_mass}")
    total = yes_mass + no_mass
    if total <= 0 or not np.isfinite(total):
        raise IntegrityError("degenerate decoder mass: all answer tokens at zero probability")
    return yes_mass / total


class RemoteDecoder:
    """HTTP decoder client scoring prompts as P(yes)."""

    def __init__(self, base_url: str, model_id: str, **kwargs):
        self._provider = RemoteProvider(base_url, model_id, **kwargs)
        self.provider_id = f"decoder({base_url.rstrip('/')},{model_id})"
        self.model_id = model_id

    def decoder_score(self, prompt: str) -> float:
        body = self._provider._post("/score", {"model": self.model_id, "prompt": prompt})
        if "p_yes" not in body or "p_no" not in body:
            raise IntegrityError("score response missing p_yes/p_no")
        return yes_probability(float(body["p_yes"]), float(body["p_no"]))


class ChunkedMeanProvider:
    """Split long text into fixed-size chunks, embed each, average.

    Chunk size is chunk_tokens * chars_per_token characters; at most
    max_chunks chunks are used and any remainder is dropped. Empty text
    embeds as a single empty chunk.
    """

    def __init__(self, base, chunk_tokens: int = 512, max_chunks: int = 16, chars_per_token: float = 4.0):
        self.base = base
        self.chunk_tokens = chunk_tokens
        self.max_chunks = max_chunks
        self.chunk_chars = int(chunk_tokens * chars_per_token)
        self.model_id = base.model_id
        self.provider_id = f"chunked({base.provider_id},{chunk_tokens}x{max_chunks})"

    def chunks(self, text: str) -> list[str]:
        if text == "":
            return [""]
        pieces = [text[i : i + self.chunk_chars] for i in range(0, len(text), self.chunk_chars)]
        return pieces[: self.max_chunks]

    def embed(self, instruction: str, text: str) -> np.ndarray:
        vectors = [self.base.embed(instruction, chunk) for chunk in self.chunks(text)]
        return np.mean(np.stack(vectors), axis=0).astype(np.float32)


class MemeEmbedder:
    """Embed the eight serializer components separately and concatenate in
    canonical component order. Output dimension is 8x the base dimension;
    every call embeds exactly eight section texts, substituting the empty
    string for missing components."""

    def __init__(self, base):
        self.base = base
        self.model_id = base.model_id
        self.provider_id = f"meme({base.provider_id})"

    def embed_sections(self, instruction: str, sections: Mapping[str, str]) -> np.ndarray:
        unknown = set(sections) - set(COMPONENT_ORDER)
        if unknown:
            raise EmbeddingError(f"unknown section names: {sorted(unknown)}")
        parts = [
            self.base.embed(instruction, sections.get(name, ""))
            for name in COMPONENT_ORDER
        ]
        return np.concatenate(parts).astype(np.float32)


def meme_embed(base, sections: Mapping[str, str], instruction: str = "") -> np.ndarray:
    return MemeEmbedder(base).embed_sections(instruction, sections)


def concat_embed(a: EmbeddingVector, b: EmbeddingVector) -> EmbeddingVector:
    """Append two embeddings of the same instance into one vector."""
    return EmbeddingVector(
        values=np.concatenate([a.values, b.values]),
        provider_id=f"concat({a.provider_id}|{b.provider_id})",
        model_id=f"{a.model_id}+{b.model_id}",
    )


def provider_from_dict(raw: Optional[dict], default_url: Optional[str] = None):
    """Build a provider from a config mapping.

    Types: hashing (dim, seed), remote (url, model_id, dim, timeout,
    max_retries), chunked (base, chunk_tokens, max_chunks, chars_per_token)
    and meme (base). The remote url falls back to default_url, normally the
    EHRTEXT_PROVIDER_URL environment value.
    """
    raw = dict(raw or {"type": "hashing"})
    kind = raw.pop("type", "hashing")
    if kind == "hashing":
        return HashingEmbedder(dim=int(raw.pop("dim", 1024)), seed=int(raw.pop("seed", 0)))
    if kind == "remote":
        url = raw.pop("url", None) or default_url
        if not url:
            raise EmbeddingError("remote provider needs a url (or EHRTEXT_PROVIDER_URL)")
        return RemoteProvider(
            url,
            model_id=str(raw.pop("model_id", "default")),
            dim=raw.pop("dim", None),
            timeout=float(raw.pop("timeout", 30.0)),
            max_retries=int(raw.pop("max_retries", 3)),
        )
    if kind == "chunked":
        base = provider_from_dict(raw.pop("base", None), default_url)
        return ChunkedMeanProvider(
            base,
            chunk_tokens=int(raw.pop("chunk_tokens", 512)),
            max_chunks=int(raw.pop("max_chunks", 16)),
            chars_per_token=float(raw.pop("chars_per_token", 4.0)),
        )
    if kind == "meme":
        return MemeEmbedder(provider_from_dict(raw.pop("base", None), default_url))
    raise EmbeddingError(f"unknown provider type: {kind!r}")


class EmbeddingStore:
    """Instance-keyed matrix of embeddings written by the pipeline.

    Files: meta.json (provider, model, dim, count), keys.tsv (instance keys
    in row order), matrix.bin (row-major little-endian float32).
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def write(self, keys: Sequence[str], matrix: np.ndarray, provider_id: str, model_id: str) -> None:
        if matrix.ndim != 2 or matrix.shape[0] != len(keys):
            raise ValueError("matrix rows must match key count")
        self.directory.mkdir(parents=True, exist_ok=True)
        data = np.ascontiguousarray(matrix, dtype="<f4")
        tmp = self.directory / "matrix.bin.tmp"
        tmp.write_bytes(data.tobytes())
        os.replace(tmp, self.directory / "matrix.bin")
        (self.directory / "keys.tsv").write_text("".join(k + "\n" for k in keys), "utf-8")
        meta = {
            "provider_id": provider_id,
            "model_id": model_id,
            "dim": int(matrix.shape[1]),
            "count": int(matrix.shape[0]),
        }
        (self.directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", "utf-8")

    def read(self) -> tuple[list[str], np.ndarray, dict]:
        meta = json.loads((self.directory / "meta.json").read_text("utf-8"))
        keys = (self.directory / "keys.tsv").read_text("utf-8").splitlines()
        raw = (self.directory / "matrix.bin").read_bytes()
        matrix = np.frombuffer(raw, dtype="<f4").reshape(meta["count"], meta["dim"]).copy()
        if len(keys) != meta["count"]:
            raise IntegrityError("embedding store row count mismatch")
        return keys, matrix, meta
