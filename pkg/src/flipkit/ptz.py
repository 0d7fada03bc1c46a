"""Probable Trigger Zone: the span from the target speaker's previous
utterance to the target utterance. Predictions outside it are masked to
non-trigger at inference. Also produces the dataset skew reports that
quantify how windowing and zone masking reduce the 0/1 label imbalance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Dialogue
from .errors import CorpusValidationError, InputError


@dataclass(frozen=True)
class PTZRange:
    """Inclusive dialogue-global index range [start, end]; end is the target."""

    start: int
    end: int

    def __contains__(self, index: int) -> bool:
        return self.start <= index <= self.end


def zone_start(speakers, target_index: int) -> int:
    """Largest position before the target with the same speaker, else 0."""
    if not 0 <= target_index < len(speakers):
        raise InputError(
            f"target index {target_index} out of range for {len(speakers)} utterances"
        )
    for p in range(target_index - 1, -1, -1):
        if speakers[p] == speakers[target_index]:
            return p
    return 0


def compute_ptz(dialogue: Dialogue, target_index: int) -> PTZRange:
    """Zone start is the target speaker's previous utterance, or 0 when the
    speaker has not spoken before (no prefix can then be excluded)."""
    speakers = [u.speaker for u in dialogue.utterances]
    return PTZRange(start=zone_start(speakers, target_index), end=target_index)


def apply_ptz_mask(predictions, ptz: PTZRange, window_offset: int) -> np.ndarray:
    """Zero out predictions at window positions outside the zone.

    Window position j corresponds to dialogue index window_offset + j.
    Positions inside [ptz.start, ptz.end] pass through unchanged.
    """
    preds = np.asarray(predictions, dtype=np.int64).copy()
    for j in range(preds.shape[0]):
        if (window_offset + j) not in ptz:
            preds[j] = 0
    return preds


@dataclass(frozen=True)
class SkewCounts:
    count_0: int
    count_1: int

    @property
    def ratio(self) -> float | None:
        """0/1 ratio rounded to one decimal; None when there are no positives."""
        if self.count_1 == 0:
            return None
        return round(self.count_0 / self.count_1, 1)

    def to_dict(self) -> dict:
        return {"count_0": self.count_0, "count_1": self.count_1, "ratio": self.ratio}


def skew_report(corpus: Corpus, w: int | None = None, use_ptz: bool = False) -> SkewCounts:
    """Candidate-label counts for one regime.

    w=None counts every utterance of every dialogue; with w only the last-w
    window counts; with use_ptz the candidate must also fall inside the
    target's trigger zone. Window and zone intersect in dialogue-global
    indices. The target of each dialogue is its final utterance.
    """
    if w is not None and w < 1:
        raise InputError(f"window size must be >= 1, got {w}")
    zeros = ones = 0
    for d in corpus.dialogues:
        if d.triggers is None:
            raise CorpusValidationError(f"episode {d.id!r} has no trigger labels")
        n = len(d.utterances)
        if n == 0:
            continue
        tau = n - 1
        lo = 0 if w is None else max(0, n - w)
        if use_ptz:
            lo = max(lo, compute_ptz(d, tau).start)
        for i in range(lo, tau + 1):
            if d.triggers[i]:
                ones += 1
            else:
                zeros += 1
    return SkewCounts(count_0=zeros, count_1=ones)


def skew_table(corpus: Corpus, w: int) -> dict:
    """The three-regime table: original, window-only, window plus zone."""
    return {
        "convention": "window and zone intersected in dialogue-global indices; "
        "target is each dialogue's final utterance",
        "window": w,
        "original": skew_report(corpus).to_dict(),
        "setting_1": skew_report(corpus, w=w).to_dict(),
        "setting_2": skew_report(corpus, w=w, use_ptz=True).to_dict(),
    }
