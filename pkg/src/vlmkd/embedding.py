"""Caption encoders and the on-disk embedding cache.

Cache layout (all integers little-endian)::

    magic   8 bytes  b"VKDEMB01"
    version u32      1
    dim     u32
    count   u64
    count x { u16 id_len, id_len bytes UTF-8 id, dim x float32 }

Entries are sorted by id, so equal caches serialize to equal bytes. The
encoder id and the ids of empty captions live in a JSON sidecar.
"""
from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np

from .errors import (CacheCorruptionError, CacheFormatError, CacheIntegrityError, ConfigError,
                     MalformedResponseError, ProtocolError, TransportError)

log = logging.getLogger(__name__)

MAGIC = b"VKDEMB01"
VERSION = 1
HEADER = struct.Struct("<8sIIQ")
NORM_BAND = 1e-3

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_TOKEN = re.compile(r"[a-z0-9]+")


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def encode_hashed_bow(caption: str, dim: int = 64) -> np.ndarray:
    """Signed feature hashing of lowercase alphanumeric tokens, then l2-normalised.

    Bucket is ``fnv1a64(token) % dim``; bit 63 of the hash picks the sign.
    An empty token list yields the zero vector, and so do tokens whose signed
    counts cancel; the cache flags such rows and the text loss skips them.
    """
    if dim < 8:
        raise ConfigError("embedding dim must be >= 8")
    v = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(caption):
        h = fnv1a64(tok.encode("utf-8"))
        v[h % dim] += -1.0 if h >> 63 else 1.0
    n = np.linalg.norm(v)
    return v / max(n, 1e-12)


@dataclass
class EmbeddingCache:
    dim: int
    encoder_id: str = "unknown"
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.entries[i] for i in ids]) if ids else np.zeros((0, self.dim))

    def usable(self, ids: Sequence[str]) -> np.ndarray:
        flagged = set(self.flagged)
        return np.array([i not in flagged for i in ids], dtype=bool)


@dataclass(frozen=True)
class TextEncoderSpec:
    kind: str = "hashed_bow"
    dim: int = 64
    endpoint: str | None = None
    model: str = "text-embedding"

    def __post_init__(self):
        if self.kind not in ("hashed_bow", "remote"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "hashed_bow" and self.dim < 8:
            raise ConfigError("embedding dim must be >= 8")
        if self.kind == "remote" and not self.endpoint:
            raise ConfigError("remote encoder needs an endpoint")

    @property
    def encoder_id(self) -> str:
        if self.kind == "hashed_bow":
            return f"hashed_bow-fnv1a64-d{self.dim}"
        return f"remote:{self.model}@{self.endpoint}"


def encode_remote(endpoint: str, captions: Sequence[str], model: str = "text-embedding",
                  api_key: str | None = None, attempts: int = 3, timeout: float = 60.0) -> np.ndarray:
    """POST ``{"model", "input": [...]}`` and return rows normalised client-side."""
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    last = ""
    for attempt in range(1, attempts + 1):
        try:
            resp = httpx.post(endpoint, json={"model": model, "input": list(captions)},
                              headers=headers, timeout=timeout)
        except httpx.HTTPError as exc:
            last = repr(exc)
            continue
        if 200 <= resp.status_code < 300:
            break
        last = f"HTTP {resp.status_code}"
    else:
        raise TransportError(f"embedding request failed after {attempts} attempts: {last}", attempts=attempts)
    try:
        data = json.loads(resp.content)["data"]
        if all("index" in d for d in data):
            data = sorted(data, key=lambda d: d["index"])
        rows = [list(map(float, d["embedding"])) for d in data]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedResponseError(f"unexpected embeddings response: {exc!r}") from None
    if len(rows) != len(captions):
        raise ProtocolError(f"asked for {len(captions)} embeddings, got {len(rows)}")
    dims = {len(r) for r in rows}
    if len(dims) > 1:
        raise ProtocolError(f"embedding dimension mismatch within batch: {sorted(dims)}")
    out = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norms, 1e-12)


def encode_captions(records: dict[str, str], spec: TextEncoderSpec = TextEncoderSpec(),
                    api_key: str | None = None, batch_size: int = 64) -> EmbeddingCache:
    ids = sorted(records)
    if spec.kind == "hashed_bow":
        vecs = {i: encode_hashed_bow(records[i], spec.dim) for i in ids}
        dim = spec.dim
    else:
        vecs, dim = {}, None
        for start in range(0, len(ids), batch_size):
            chunk = ids[start:start + batch_size]
            rows = encode_remote(spec.endpoint, [records[i] for i in chunk], spec.model, api_key)
            if dim is None:
                dim = rows.shape[1]
            elif rows.shape[1] != dim:
                raise ProtocolError(f"embedding dimension changed from {dim} to {rows.shape[1]}")
            vecs.update(zip(chunk, rows))
        dim = dim or spec.dim
    flagged = [i for i in ids if not np.any(vecs[i])]
    if flagged:
        log.warning("%d captions encode to the zero vector and will be excluded from text loss", len(flagged))
    return EmbeddingCache(dim, spec.encoder_id, vecs, flagged)


def cache_bytes(cache: EmbeddingCache) -> bytes:
    parts = [HEADER.pack(MAGIC, VERSION, cache.dim, len(cache.entries))]
    for id_ in sorted(cache.entries):
        vec = np.asarray(cache.entries[id_], dtype=np.float64)
        if vec.shape != (cache.dim,):
            raise CacheFormatError(f"entry {id_!r} has shape {vec.shape}, cache dim is {cache.dim}")
        raw = id_.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(vec.astype("<f4").tobytes())
    return b"".join(parts)


def cache_write(path: str | Path, cache: EmbeddingCache) -> None:
    path = Path(path)
    path.write_bytes(cache_bytes(cache))
    sidecar = {"encoder_id": cache.encoder_id, "dim": cache.dim, "count": len(cache.entries),
               "flagged": sorted(cache.flagged)}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def cache_read(path: str | Path) -> EmbeddingCache:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {buf[:8]!r}")
    if len(buf) < HEADER.size:
        raise CacheCorruptionError(f"{path}: truncated header", len(buf))
    _, version, dim, count = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise CacheFormatError(f"{path}: invalid dim {dim}")
    pos = HEADER.size
    entries: dict[str, np.ndarray] = {}
    zero: list[str] = []
    for _ in range(count):
        if pos + 2 > len(buf):
            raise CacheCorruptionError(f"{path}: truncated entry header", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n + 4 * dim > len(buf):
            raise CacheCorruptionError(f"{path}: truncated entry", pos)
        try:
            id_ = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise CacheCorruptionError(f"{path}: undecodable id", pos) from None
        pos += n
        vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            zero.append(id_)
        elif not (1 - NORM_BAND <= norm <= 1 + NORM_BAND):
            raise CacheIntegrityError(f"{path}: entry {id_!r} has norm {norm:.6g}", id_)
        entries[id_] = vec
    if pos != len(buf):
        raise CacheCorruptionError(f"{path}: {len(buf) - pos} trailing bytes", pos)
    encoder_id = "unknown"
    mp = sidecar_path(path)
    if mp.exists():
        encoder_id = json.loads(mp.read_text()).get("encoder_id", encoder_id)
    return EmbeddingCache(dim, encoder_id, entries, zero)
