"""Embedding providers behind a common interface.

``stub`` is a deterministic hash-to-vector encoder used for tests and
offline runs. ``hf`` wraps a local transformers model and pools token
embeddings. ``voyage`` calls the hosted embedding HTTP API with a
document-style input hint. Providers return one float32 vector per text.
"""

from __future__ import annotations

import hashlib
import os
from typing import Callable

import numpy as np

from .errors import EncoderError, InputError


class Encoder:
    """Interface: encode a batch of texts into fixed-dimension vectors."""

    dim: int

    def encode(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError


def _hash_vector(seed_text: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(seed_text.encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    return rng.standard_normal(dim).astype(np.float32)


class StubEncoder(Encoder):
    """Seeded hash-to-vector encoder; identical text always maps to the
    same vector, so runs are reproducible without any model or network."""

    def __init__(self, model: str, dim: int, pooling: str = "mean_tokens"):
        self.model = model
        self.dim = dim
        self.pooling = pooling
        self.calls = 0

    def encode(self, texts: list[str]) -> list[np.ndarray]:
        self.calls += 1
        out = []
        for text in texts:
            if self.pooling == "mean_tokens":
                tokens = text.split() or [text]
                vecs = [_hash_vector(f"{self.model}\x00{tok}", self.dim) for tok in tokens]
                out.append(np.mean(vecs, axis=0, dtype=np.float64).astype(np.float32))
            else:
                out.append(_hash_vector(f"{self.model}\x00{text}", self.dim))
        return out


class HFEncoder(Encoder):
    """Mean of token embeddings from a transformers model, excluding the
    special begin/end tokens. Pass ``model_obj``/``tokenizer`` to reuse
    already-loaded objects (tests inject a tiny randomly initialized model)."""

    def __init__(self, model: str, dim: int, pooling: str = "mean_tokens",
                 model_obj=None, tokenizer=None):
        self.model_name = model
        self.dim = dim
        self.pooling = pooling
        if model_obj is None or tokenizer is None:
            try:
                from transformers import AutoModel, AutoTokenizer
            except ImportError as exc:
                raise EncoderError("transformers is not installed; pip install flipkit[hf]") from exc
            try:
                tokenizer = AutoTokenizer.from_pretrained(model)
                model_obj = AutoModel.from_pretrained(model)
            except Exception as exc:
                raise EncoderError(f"cannot load model {model!r}: {exc}") from exc
        self.tokenizer = tokenizer
        self.model = model_obj
        self.model.eval()

    def encode(self, texts: list[str]) -> list[np.ndarray]:
        import torch

        out = []
        with torch.no_grad():
            for text in texts:
                enc = self.tokenizer(text, return_tensors="pt", truncation=True)
                hidden = self.model(**enc).last_hidden_state[0]  # (tokens, dim)
                if self.pooling == "mean_tokens":
                    special = self.tokenizer.get_special_tokens_mask(
                        enc["input_ids"][0].tolist(), already_has_special_tokens=True
                    )
                    keep = [i for i, s in enumerate(special) if not s]
                    if not keep:  # all-special degenerate input
                        keep = list(range(hidden.shape[0]))
                    pooled = hidden[keep].mean(dim=0)
                else:
                    pooled = hidden[0]
                vec = pooled.numpy().astype(np.float32)
                if vec.shape[0] != self.dim:
                    raise EncoderError(
                        f"model {self.model_name!r} produced dim {vec.shape[0]}, expected {self.dim}"
                    )
                out.append(vec)
        return out


class VoyageEncoder(Encoder):
    """Hosted document-embedding API client. Vectors are stored exactly as
    returned. Credentials come from the VOYAGE_API_KEY environment variable."""

    URL = "https://api.voyageai.com/v1/embeddings"

    def __init__(self, model: str, dim: int, input_type: str = "document", session=None):
        self.model = model
        self.dim = dim
        self.input_type = input_type
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self.api_key = os.environ.get("VOYAGE_API_KEY", "")

    def encode(self, texts: list[str]) -> list[np.ndarray]:
        if not self.api_key:
            raise EncoderError("VOYAGE_API_KEY is not set")
        try:
            resp = self.session.post(
                self.URL,
                json={"model": self.model, "input": texts, "input_type": self.input_type},
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=60,
            )
        except Exception as exc:
            raise EncoderError(f"embedding request failed: {exc}") from exc
        if resp.status_code != 200:
            raise EncoderError(f"embedding request failed with HTTP {resp.status_code}")
        data = resp.json()["data"]
        out = []
        for item in sorted(data, key=lambda d: d["index"]):
            vec = np.asarray(item["embedding"], dtype=np.float32)
            if vec.shape[0] != self.dim:
                raise EncoderError(
                    f"provider returned dim {vec.shape[0]}, expected {self.dim}"
                )
            out.append(vec)
        return out


_FACTORIES: dict[str, Callable[..., Encoder]] = {
    "stub": StubEncoder,
    "hf": HFEncoder,
    "voyage": VoyageEncoder,
}


def register_provider(name: str, factory: Callable[..., Encoder]) -> None:
    _FACTORIES[name] = factory


def make_encoder(provider: str, model: str, dim: int, pooling: str, **kwargs) -> Encoder:
    if provider not in _FACTORIES:
        raise InputError(
            f"unknown provider {provider!r}; available: {sorted(_FACTORIES)}"
        )
    if provider == "voyage":
        return _FACTORIES[provider](model=model, dim=dim, **kwargs)
    return _FACTORIES[provider](model=model, dim=dim, pooling=pooling, **kwargs)
