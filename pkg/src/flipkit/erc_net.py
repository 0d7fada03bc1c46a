"""Emotion classifier over a dialogue.

Each utterance feeds a stack of recurrent units: a dialogue-level GRU over
raw features, a global GRU that also sees the previous speaker-level state,
a per-speaker GRU whose hidden state is keyed by speaker and reset between
dialogues, and a memory GRU re-read for a fixed number of hops before a
final classification GRU. The memory at step t covers only utterances up
to t, so no future context leaks into the prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .corpus import Dialogue
from .embed import EmbeddingTable, SpeakerVocab, speaker_one_hot
from .errors import InputError

ATTENTION_VALUES = ("past", "query")
SPEAKER_PREV_MODES = ("prev_step", "same_speaker")


@dataclass(frozen=True)
class ERCConfig:
    input_dim: int
    num_classes: int
    hidden_dim: int = 300
    hops: int = 3
    dropout: float = 0.1
    # Long dialogues are chunked to this many utterances for training and
    # prediction; None processes each dialogue whole.
    seq_len: int | None = 15
    # "past" attends over earlier global states; "query" keeps their weights
    # but sums copies of the query itself.
    attention_values: str = "past"
    # Which speaker-level state the global GRU sees: the one from the
    # previous step, or the last one produced by the current speaker.
    speaker_prev_mode: str = "prev_step"

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.num_classes < 2:
            raise InputError("input_dim must be >= 1 and num_classes >= 2")
        if self.hidden_dim < 1:
            raise InputError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.hops < 1:
            raise InputError(f"hops must be >= 1, got {self.hops}")
        if self.seq_len is not None and self.seq_len < 1:
            raise InputError(f"seq_len must be >= 1 or None, got {self.seq_len}")
        if self.attention_values not in ATTENTION_VALUES:
            raise InputError(f"attention_values must be one of {ATTENTION_VALUES}")
        if self.speaker_prev_mode not in SPEAKER_PREV_MODES:
            raise InputError(f"speaker_prev_mode must be one of {SPEAKER_PREV_MODES}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dim": self.hidden_dim,
            "hops": self.hops,
            "dropout": self.dropout,
            "seq_len": self.seq_len,
            "attention_values": self.attention_values,
            "speaker_prev_mode": self.speaker_prev_mode,
        }


def scaled_dot_attention(query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    # query [H], keys [m, H], values [m, H] -> [H]
    scores = keys @ query / math.sqrt(query.shape[0])
    weights = torch.softmax(scores, dim=0)
    return weights @ values


class MaskedMemoryERC(nn.Module):
    def __init__(self, config: ERCConfig):
        super().__init__()
        self.config = config
        h = config.hidden_dim
        self.dgru = nn.GRUCell(config.input_dim, h)
        self.ggru = nn.GRUCell(2 * h, h)
        self.sgru = nn.GRUCell(h, h)
        self.mgru = nn.GRU(h, h, batch_first=True)
        # the memory read is concatenated with the speaker state, not summed
        self.cgru = nn.GRUCell(2 * h, h)
        self.classify = nn.Linear(h, config.num_classes)
        self.drop = nn.Dropout(config.dropout)

    def _read_memory(self, global_states: torch.Tensor, so_t: torch.Tensor) -> torch.Tensor:
        # global_states [t, H]: encode, attend with the speaker state, and
        # re-encode from the read for each further hop.
        seq = global_states.unsqueeze(0)
        mem, _ = self.mgru(seq)
        read = so_t
        for hop in range(self.config.hops):
            read = scaled_dot_attention(so_t, mem[0], mem[0])
            if hop + 1 < self.config.hops:
                mem, _ = self.mgru(seq, read.view(1, 1, -1))
        return read

    def forward(self, features: torch.Tensor, speakers) -> torch.Tensor:
        """features [n, input_dim], speakers length-n sequence -> logits [n, C]."""
        n = features.shape[0]
        if n != len(speakers):
            raise InputError(f"{n} feature rows but {len(speakers)} speakers")
        h = self.config.hidden_dim
        zeros = features.new_zeros(h)
        x = self.drop(features)

        d_hidden = zeros
        g_hidden = zeros
        c_hidden = zeros
        so_prev_step = zeros
        speaker_hidden: dict = {}
        global_states: list[torch.Tensor] = []
        outs = []
        for t in range(n):
            if self.config.speaker_prev_mode == "prev_step":
                so_prev = so_prev_step
            else:
                so_prev = speaker_hidden.get(speakers[t], zeros)
            do_t = self.dgru(x[t], d_hidden)
            d_hidden = do_t
            o_t = self.ggru(torch.cat([do_t, so_prev]), g_hidden)
            g_hidden = o_t
            if global_states:
                past = torch.stack(global_states)
                if self.config.attention_values == "past":
                    values = past
                else:
                    values = do_t.unsqueeze(0).expand_as(past)
                att = scaled_dot_attention(do_t, past, values)
            else:
                att = zeros
            global_states.append(o_t)
            so_t = self.sgru(att + do_t, speaker_hidden.get(speakers[t], zeros))
            speaker_hidden[speakers[t]] = so_t
            so_prev_step = so_t
            read = self._read_memory(torch.stack(global_states), so_t)
            co_t = self.cgru(torch.cat([read, so_t]), c_hidden)
            c_hidden = co_t
            # classify per step so a prefix of the dialogue yields bitwise
            # identical logits (batched matmul would reorder reductions)
            outs.append(self.classify(self.drop(co_t)))
        return torch.stack(outs)


def erc_features(
    dialogue: Dialogue, table: EmbeddingTable, vocab: SpeakerVocab
) -> tuple[np.ndarray, list[str]]:
    """Per-utterance input rows: embedding joined with the speaker one-hot."""
    rows = []
    speakers = []
    for u in dialogue.utterances:
        rows.append(np.concatenate([table.get(u.key), speaker_one_hot(u.speaker, vocab)]))
        speakers.append(u.speaker)
    return np.stack(rows).astype(np.float32), speakers
