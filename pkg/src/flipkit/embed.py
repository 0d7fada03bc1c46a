"""Utterance embedding table with a persistent binary cache, plus speaker
and emotion one-hot vectors.

Cache file layout (all integers little-endian)::

    magic     8 bytes   b"FLIPEMB\\x00"
    hdr_len   uint32
    header    hdr_len bytes, UTF-8 JSON:
              {"format_version": 1, "dim": D, "provider": ..., "model": ...}
    records   repeated until EOF:
              key_len  uint16
              key      key_len bytes UTF-8
              vector   D float32

Records are written in sorted key order so identical tables produce
identical files. Writes go through a temp file and an atomic rename, so a
reader never sees a partial cache.
"""

from __future__ import annotations

import json
import os
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .errors import CacheError, EncoderError, InputError
from .providers import Encoder, make_encoder

MAGIC = b"FLIPEMB\x00"
FORMAT_VERSION = 1
ENCODE_BATCH = 32


@dataclass(frozen=True)
class EncoderConfig:
    provider: str = "stub"
    model: str = "stub-768"
    dim: int = 768
    pooling: str = "mean_tokens"  # or "provider_native"
    query_hint: str = "document"
    parallelism: int = 4

    @classmethod
    def for_task(cls, task_id: int, provider: str = "stub") -> "EncoderConfig":
        dim = 1024 if task_id == 3 else 768
        pooling = "provider_native" if task_id == 3 else "mean_tokens"
        return cls(provider=provider, model=f"{provider}-{dim}", dim=dim, pooling=pooling)


@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __contains__(self, key: str) -> bool:
        return key in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, key: str) -> np.ndarray:
        try:
            return self.vectors[key]
        except KeyError:
            raise InputError(f"no embedding for utterance {key!r}") from None


@dataclass(frozen=True)
class SpeakerVocab:
    """The k most frequent speakers, by descending utterance count then name."""

    top: tuple[str, ...]
    k: int

    def index(self, speaker: str) -> int | None:
        try:
            return self.top.index(speaker)
        except ValueError:
            return None


def build_speaker_vocab(corpus: Corpus, k: int = 6) -> SpeakerVocab:
    counts: Counter[str] = Counter()
    for d in corpus.dialogues:
        for u in d.utterances:
            counts[u.speaker] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return SpeakerVocab(top=tuple(name for name, _ in ranked[:k]), k=k)


def speaker_one_hot(speaker: str, vocab: SpeakerVocab) -> np.ndarray:
    vec = np.zeros(vocab.k, dtype=np.float32)
    idx = vocab.index(speaker)
    if idx is not None:
        vec[idx] = 1.0
    return vec


def speaker_coverage(corpus: Corpus, vocab: SpeakerVocab) -> float:
    """Fraction of utterances whose speaker is in the vocab."""
    total = hit = 0
    for d in corpus.dialogues:
        for u in d.utterances:
            total += 1
            if vocab.index(u.speaker) is not None:
                hit += 1
    return hit / total if total else 0.0


def emotion_one_hot(label: str, label_set: tuple[str, ...]) -> np.ndarray:
    try:
        idx = label_set.index(label)
    except ValueError:
        raise InputError(f"unknown emotion label {label!r}; known: {list(label_set)}") from None
    vec = np.zeros(len(label_set), dtype=np.float32)
    vec[idx] = 1.0
    return vec


def _cache_header(cfg: EncoderConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "dim": cfg.dim,
        "provider": cfg.provider,
        "model": cfg.model,
    }


def read_cache(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read embedding cache {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CacheError(f"{path}: not an embedding cache (bad magic)")
    if len(blob) < 12:
        raise CacheError(f"{path}: truncated header")
    (hdr_len,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + hdr_len:
        raise CacheError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CacheError(f"{path}: unsupported format version {header.get('format_version')}")
    dim = int(header["dim"])
    vectors: dict[str, np.ndarray] = {}
    offset = 12 + hdr_len
    vec_bytes = 4 * dim
    while offset < len(blob):
        if offset + 2 > len(blob):
            raise CacheError(f"{path}: truncated record at byte {offset}")
        (key_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + key_len + vec_bytes > len(blob):
            raise CacheError(f"{path}: truncated record at byte {offset}")
        key = blob[offset : offset + key_len].decode("utf-8")
        offset += key_len
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        vectors[key] = vec
    return header, vectors


def write_cache(path: str | Path, header: dict, vectors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    dim = int(header["dim"])
    parts = [MAGIC]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(hdr)))
    parts.append(hdr)
    for key in sorted(vectors):
        vec = np.asarray(vectors[key], dtype="<f4")
        if vec.shape != (dim,):
            raise CacheError(f"vector for {key!r} has shape {vec.shape}, expected ({dim},)")
        if not np.all(np.isfinite(vec)):
            raise CacheError(f"vector for {key!r} contains non-finite values")
        kb = key.encode("utf-8")
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        parts.append(vec.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def _corpus_keys(corpus: Corpus) -> dict[str, str]:
    """key -> text for every utterance; rejects conflicting texts per key."""
    keys: dict[str, str] = {}
    for d in corpus.dialogues:
        for u in d.utterances:
            prev = keys.get(u.key)
            if prev is not None and prev != u.text:
                raise InputError(
                    f"utterance key {u.key!r} maps to two different texts"
                )
            keys[u.key] = u.text
    return keys


def encode_corpus(
    corpus: Corpus,
    cfg: EncoderConfig,
    cache_path: str | Path | None,
    encoder: Encoder | None = None,
) -> EmbeddingTable:
    """Return embeddings for every utterance, encoding only cache misses.

    A completed run leaves the cache covering the whole corpus, so a re-run
    performs zero encoder calls. ``cache_path=None`` encodes in memory
    without touching disk. Pass ``encoder`` to reuse a constructed provider
    (tests use this to count calls).
    """
    cache_path = Path(cache_path) if cache_path is not None else None
    wanted = _corpus_keys(corpus)
    vectors: dict[str, np.ndarray] = {}
    if cache_path is not None and cache_path.exists():
        header, vectors = read_cache(cache_path)
        if int(header["dim"]) != cfg.dim:
            raise CacheError(
                f"cache dim {header['dim']} does not match configured dim {cfg.dim}"
            )
        if header.get("provider") != cfg.provider or header.get("model") != cfg.model:
            raise CacheError(
                f"cache was built with {header.get('provider')}/{header.get('model')}, "
                f"config says {cfg.provider}/{cfg.model}"
            )
    missing = [k for k in wanted if k not in vectors]
    if missing:
        if encoder is None:
            encoder = make_encoder(cfg.provider, cfg.model, cfg.dim, cfg.pooling)
        batches = [missing[i : i + ENCODE_BATCH] for i in range(0, len(missing), ENCODE_BATCH)]

        def run(batch: list[str]) -> list[np.ndarray]:
            return encoder.encode([wanted[k] for k in batch])

        try:
            if cfg.parallelism > 1 and len(batches) > 1:
                with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
                    results = list(pool.map(run, batches))
            else:
                results = [run(b) for b in batches]
        except EncoderError as exc:
            shown = ", ".join(missing[:5])
            more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
            raise EncoderError(
                f"{exc}; {len(missing)} utterances missing from cache: {shown}{more}"
            ) from exc
        for batch, vecs in zip(batches, results):
            for key, vec in zip(batch, vecs):
                vec = np.asarray(vec, dtype=np.float32)
                if vec.shape != (cfg.dim,):
                    raise EncoderError(
                        f"provider returned shape {vec.shape} for {key!r}, expected ({cfg.dim},)"
                    )
                if not np.all(np.isfinite(vec)):
                    raise EncoderError(f"provider returned non-finite values for {key!r}")
                vectors[key] = vec
        if cache_path is not None:
            write_cache(cache_path, _cache_header(cfg), vectors)
    return EmbeddingTable(dim=cfg.dim, vectors={k: vectors[k] for k in wanted})
