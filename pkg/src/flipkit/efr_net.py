"""Trigger detector over an utterance window.

Each window position carries its utterance embedding, a speaker one-hot
and an emotion one-hot. A single-layer transformer encoder contextualizes
the window; every position is then scored against the target position's
encoder state and the hidden state of a small GRU run over the emotion
sequence, ending at the target. Windows are right-padded and the pad
positions excluded from attention and loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .corpus import EFRInstance
from .embed import EmbeddingTable, SpeakerVocab, emotion_one_hot, speaker_one_hot
from .errors import InputError
from .ptz import zone_start


@dataclass(frozen=True)
class EFRConfig:
    input_dim: int
    num_emotions: int
    num_labels: int = 2
    model_dim: int = 256
    layers: int = 1
    heads: int = 4
    ff_mult: int = 4
    emo_hidden: int = 64
    dropout: float = 0.1
    window: int = 5
    # Feed the emotion GRU the whole dialogue history up to the target
    # instead of just the window.
    full_dialogue_history: bool = False

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.num_emotions < 1:
            raise InputError("input_dim and num_emotions must be >= 1")
        if self.num_labels < 2:
            raise InputError(f"num_labels must be >= 2, got {self.num_labels}")
        if self.model_dim % self.heads != 0:
            raise InputError(
                f"model_dim {self.model_dim} not divisible by {self.heads} heads"
            )
        if self.layers < 1 or self.emo_hidden < 1 or self.window < 1:
            raise InputError("layers, emo_hidden and window must be >= 1")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_emotions": self.num_emotions,
            "num_labels": self.num_labels,
            "model_dim": self.model_dim,
            "layers": self.layers,
            "heads": self.heads,
            "ff_mult": self.ff_mult,
            "emo_hidden": self.emo_hidden,
            "dropout": self.dropout,
            "window": self.window,
            "full_dialogue_history": self.full_dialogue_history,
        }


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=dtype, device=device)
    angles = pos / torch.pow(
        torch.tensor(10000.0, dtype=dtype, device=device), idx / dim
    )
    pe = torch.zeros(length, dim, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return pe


def efr_features(
    instance: EFRInstance,
    table: EmbeddingTable,
    vocab: SpeakerVocab,
    label_set: tuple[str, ...],
) -> tuple[np.ndarray, np.ndarray]:
    """Window rows [L, emb+k+E] and the emotion one-hots [L, E]."""
    rows = []
    emos = []
    for u in instance.window:
        if u.emotion is None:
            raise InputError(f"utterance {u.key!r} has no emotion label")
        e = emotion_one_hot(u.emotion, label_set)
        rows.append(np.concatenate([table.get(u.key), speaker_one_hot(u.speaker, vocab), e]))
        emos.append(e)
    return np.stack(rows).astype(np.float32), np.stack(emos).astype(np.float32)


@dataclass
class EFRBatch:
    features: torch.Tensor  # [B, L, D]
    pad_mask: torch.Tensor  # [B, L] True at padding
    lengths: torch.Tensor  # [B]
    emo_seq: torch.Tensor  # [B, Le, E] emotion one-hots ending at the target
    emo_lengths: torch.Tensor  # [B]
    zone_mask: torch.Tensor  # [B, L] True inside the trigger zone
    labels: torch.Tensor | None  # [B, L] int64, -1 at padding

    def __len__(self) -> int:
        return self.features.shape[0]


def build_batch(
    instances,
    table: EmbeddingTable,
    vocab: SpeakerVocab,
    label_set: tuple[str, ...],
    config: EFRConfig,
    with_labels: bool = True,
) -> EFRBatch:
    if not instances:
        raise InputError("empty instance batch")
    feats = []
    emo_windows = []
    histories = []
    for inst in instances:
        f, e = efr_features(inst, table, vocab, label_set)
        feats.append(torch.from_numpy(f))
        emo_windows.append(torch.from_numpy(e))
        if config.full_dialogue_history:
            if not inst.history_emotions:
                raise InputError(
                    f"instance {inst.dialogue_id!r} has no emotion history"
                )
            hist = np.stack([emotion_one_hot(lbl, label_set) for lbl in inst.history_emotions])
            histories.append(torch.from_numpy(hist.astype(np.float32)))

    lengths = torch.tensor([f.shape[0] for f in feats], dtype=torch.int64)
    b, l = len(feats), int(lengths.max())
    features = torch.zeros(b, l, config.input_dim)
    pad_mask = torch.ones(b, l, dtype=torch.bool)
    zone_mask = torch.zeros(b, l, dtype=torch.bool)
    labels = torch.full((b, l), -1, dtype=torch.int64) if with_labels else None
    for i, inst in enumerate(instances):
        n = int(lengths[i])
        features[i, :n] = feats[i]
        pad_mask[i, :n] = False
        start = zone_start([u.speaker for u in inst.window], n - 1)
        zone_mask[i, start:n] = True
        if with_labels:
            if inst.trigger_labels is None:
                raise InputError(f"instance {inst.dialogue_id!r} has no trigger labels")
            labels[i, :n] = torch.tensor(inst.trigger_labels, dtype=torch.int64)

    emo_src = histories if config.full_dialogue_history else emo_windows
    emo_lengths = torch.tensor([e.shape[0] for e in emo_src], dtype=torch.int64)
    emo_seq = torch.zeros(b, int(emo_lengths.max()), config.num_emotions)
    for i, e in enumerate(emo_src):
        emo_seq[i, : e.shape[0]] = e
    return EFRBatch(features, pad_mask, lengths, emo_seq, emo_lengths, zone_mask, labels)


class TriggerTransformer(nn.Module):
    def __init__(self, config: EFRConfig):
        super().__init__()
        self.config = config
        layer = nn.TransformerEncoderLayer(
            d_model=config.model_dim,
            nhead=config.heads,
            dim_feedforward=config.ff_mult * config.model_dim,
            dropout=config.dropout,
            batch_first=True,
        )
        self.proj = nn.Linear(config.input_dim, config.model_dim)
        self.encoder = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.emo_gru = nn.GRU(config.num_emotions, config.emo_hidden, batch_first=True)
        self.out = nn.Linear(2 * config.model_dim + config.emo_hidden, config.num_labels)
        self.drop = nn.Dropout(config.dropout)

    def forward(self, batch: EFRBatch) -> torch.Tensor:
        """Logits [B, L, num_labels]; pad positions carry junk scores."""
        b, l, _ = batch.features.shape
        x = self.proj(self.drop(batch.features))
        x = x + sinusoidal_positions(l, self.config.model_dim, x.dtype, x.device)
        h = self.encoder(x, src_key_padding_mask=batch.pad_mask)
        rows = torch.arange(b, device=h.device)
        h_target = h[rows, batch.lengths - 1]
        emo_out, _ = self.emo_gru(batch.emo_seq)
        e_target = emo_out[rows, batch.emo_lengths - 1]
        ctx = torch.cat([h_target, e_target], dim=1).unsqueeze(1).expand(b, l, -1)
        return self.out(self.drop(torch.cat([h, ctx], dim=2)))


@dataclass(frozen=True)
class TriggerPrediction:
    """Per-window decisions; masked marks positions outside the trigger zone
    whose predictions were forced to 0."""

    dialogue_id: str
    window_offset: int
    probs: tuple[float, ...]
    decisions: tuple[int, ...]
    masked: tuple[bool, ...]


def decode_predictions(
    batch: EFRBatch, instances, logits: torch.Tensor, use_ptz: bool
) -> list[TriggerPrediction]:
    probs = torch.softmax(logits.detach(), dim=2)[:, :, 1]
    raw = (probs >= 0.5).to(torch.int64)
    out = []
    for i, inst in enumerate(instances):
        n = int(batch.lengths[i])
        p = probs[i, :n]
        dec = raw[i, :n].clone()
        masked = [False] * n
        if use_ptz:
            for j in range(n):
                if not bool(batch.zone_mask[i, j]):
                    dec[j] = 0
                    masked[j] = True
        out.append(
            TriggerPrediction(
                dialogue_id=inst.dialogue_id,
                window_offset=inst.window_offset,
                probs=tuple(float(v) for v in p),
                decisions=tuple(int(v) for v in dec),
                masked=tuple(masked),
            )
        )
    return out
