"""Dialogue corpus ingestion and training views.

The on-disk format is a UTF-8 JSON array of episode objects::

    {"episode": str, "speakers": [str], "utterances": [str],
     "emotions": [str],                 # optional (absent for unlabeled data)
     "triggers": [0|1|0.0|1.0|null]}    # optional (trigger-annotated data)

All arrays must have equal length. Trigger nulls map to 0 (distributed
files carry trailing nulls). Episode names may repeat: trigger-annotated
files list one entry per flip, where entries from the same source dialogue
share a name and are nested prefixes of it. ``dataset_stats`` therefore
reports both raw entry counts and name-deduplicated counts.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusParseError, CorpusValidationError, InputError

WEIGHT_MODES = ("inverse", "inverse_sqrt")


@dataclass(frozen=True)
class Utterance:
    """One turn of a dialogue; ``key`` addresses its embedding cache entry."""

    index: int
    speaker: str
    text: str
    emotion: str | None = None
    key: str = ""


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]
    triggers: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.triggers is not None and len(self.triggers) != len(self.utterances):
            raise CorpusValidationError(
                f"episode {self.id!r}: {len(self.triggers)} trigger labels for "
                f"{len(self.utterances)} utterances"
            )
        for pos, utt in enumerate(self.utterances):
            if utt.index != pos:
                raise CorpusValidationError(
                    f"episode {self.id!r}: utterance index {utt.index} at position {pos}"
                )

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def speakers(self) -> tuple[str, ...]:
        return tuple(u.speaker for u in self.utterances)

    @property
    def emotions(self) -> tuple[str | None, ...]:
        return tuple(u.emotion for u in self.utterances)


@dataclass(frozen=True)
class Corpus:
    dialogues: tuple[Dialogue, ...]
    label_set: tuple[str, ...]
    task_id: int

    def __len__(self) -> int:
        return len(self.dialogues)


@dataclass(frozen=True)
class EFRInstance:
    """A last-``w``-utterances view of one dialogue for trigger prediction.

    ``target_index`` is the position of the target within the window and is
    always the last position. ``window_offset`` maps window positions back
    to dialogue-global indices. ``history_emotions`` holds the emotion
    labels from dialogue start through the target, for the optional
    full-history variant of the trigger model.
    """

    dialogue_id: str
    window: tuple[Utterance, ...]
    target_index: int
    trigger_labels: tuple[int, ...] | None
    window_offset: int
    history_emotions: tuple[str | None, ...] = ()

    def __post_init__(self) -> None:
        if self.target_index != len(self.window) - 1:
            raise CorpusValidationError(
                f"instance from {self.dialogue_id!r}: target must be the window's last position"
            )
        if self.trigger_labels is not None and len(self.trigger_labels) != len(self.window):
            raise CorpusValidationError(
                f"instance from {self.dialogue_id!r}: trigger labels misaligned with window"
            )


@dataclass(frozen=True)
class DatasetStats:
    """Counts for one corpus.

    ``episodes``/``utterances`` deduplicate by episode name, matching the
    convention used to summarize trigger-annotated files whose entries are
    per-flip prefixes of a shared dialogue; on files with unique episode
    names they equal ``instances``/``utterance_slots``.
    """

    episodes: int
    instances: int
    utterances: int
    utterance_slots: int
    triggers: int
    label_histogram: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "instances": self.instances,
            "utterances": self.utterances,
            "utterance_slots": self.utterance_slots,
            "triggers": self.triggers,
            "label_histogram": dict(sorted(self.label_histogram.items())),
        }


def make_utterance_key(dialogue_id: str, index: int) -> str:
    return f"{dialogue_id}#{index}"


def make_dialogue(
    dialogue_id: str,
    speakers: list[str],
    texts: list[str],
    emotions: list[str | None] | None = None,
    triggers: list[int] | None = None,
) -> Dialogue:
    """Build a Dialogue from parallel arrays, validating alignment."""
    n = len(texts)
    if len(speakers) != n:
        raise CorpusValidationError(
            f"episode {dialogue_id!r}: {len(speakers)} speakers for {n} utterances"
        )
    if emotions is not None and len(emotions) != n:
        raise CorpusValidationError(
            f"episode {dialogue_id!r}: {len(emotions)} emotion labels for {n} utterances"
        )
    utts = []
    for i in range(n):
        text = texts[i]
        if not isinstance(text, str) or not text.strip():
            raise CorpusValidationError(
                f"episode {dialogue_id!r}: empty utterance at position {i}"
            )
        utts.append(
            Utterance(
                index=i,
                speaker=str(speakers[i]),
                text=text,
                emotion=None if emotions is None else emotions[i],
                key=make_utterance_key(dialogue_id, i),
            )
        )
    trig = None if triggers is None else tuple(int(t) for t in triggers)
    return Dialogue(id=dialogue_id, utterances=tuple(utts), triggers=trig)


def _coerce_trigger(value, dialogue_id: str, pos: int) -> int:
    if value is None:
        return 0
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, (int, float)):
        if float(value) in (0.0, 1.0):
            return int(value)
    raise CorpusValidationError(
        f"episode {dialogue_id!r}: trigger label {value!r} at position {pos} is not binary"
    )


def load_episodes(episodes: list, task_id: int) -> Corpus:
    """Build a Corpus from already-parsed episode objects (file order kept)."""
    if not isinstance(episodes, list):
        raise CorpusParseError("expected a JSON array of episode objects")
    dialogues = []
    labels: set[str] = set()
    for i, ep in enumerate(episodes):
        if not isinstance(ep, dict):
            raise CorpusValidationError(f"episode at position {i} is not an object")
        name = ep.get("episode")
        if not isinstance(name, str) or not name:
            raise CorpusValidationError(f"episode at position {i} has no name")
        for req in ("speakers", "utterances"):
            if not isinstance(ep.get(req), list):
                raise CorpusValidationError(f"episode {name!r}: missing array {req!r}")
        speakers = ep["speakers"]
        texts = ep["utterances"]
        emotions = ep.get("emotions")
        if emotions is not None and not isinstance(emotions, list):
            raise CorpusValidationError(f"episode {name!r}: 'emotions' is not an array")
        raw_triggers = ep.get("triggers")
        triggers = None
        if raw_triggers is not None:
            if not isinstance(raw_triggers, list):
                raise CorpusValidationError(f"episode {name!r}: 'triggers' is not an array")
            if len(raw_triggers) != len(texts):
                raise CorpusValidationError(
                    f"episode {name!r}: {len(raw_triggers)} trigger labels for "
                    f"{len(texts)} utterances"
                )
            triggers = [_coerce_trigger(v, name, p) for p, v in enumerate(raw_triggers)]
        dialogue = make_dialogue(name, speakers, texts, emotions, triggers)
        for utt in dialogue.utterances:
            if utt.emotion is not None:
                labels.add(utt.emotion)
        dialogues.append(dialogue)
    return Corpus(
        dialogues=tuple(dialogues),
        label_set=tuple(sorted(labels)),
        task_id=task_id,
    )


def load_corpus(path: str | Path, task_id: int) -> Corpus:
    """Load an episode-array JSON file into a Corpus."""
    if task_id not in (1, 2, 3):
        raise InputError(f"task_id must be 1, 2 or 3, got {task_id}")
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    try:
        episodes = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return load_episodes(episodes, task_id)


def serialize_corpus(corpus: Corpus) -> list[dict]:
    """Inverse of load: episode objects in the on-disk schema."""
    out = []
    for d in corpus.dialogues:
        ep: dict = {
            "episode": d.id,
            "speakers": list(d.speakers),
            "utterances": [u.text for u in d.utterances],
        }
        if any(u.emotion is not None for u in d.utterances):
            ep["emotions"] = [u.emotion for u in d.utterances]
        if d.triggers is not None:
            ep["triggers"] = list(d.triggers)
        out.append(ep)
    return out


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(serialize_corpus(corpus), ensure_ascii=False, indent=1),
        encoding="utf-8",
    )


def split_sequences(dialogue: Dialogue, seq_len: int) -> list[Dialogue]:
    """Break a dialogue into disjoint consecutive chunks of at most seq_len.

    Chunks concatenate back to the original utterance sequence; indices are
    re-based per chunk while embedding keys are preserved.
    """
    if seq_len < 1:
        raise InputError(f"seq_len must be >= 1, got {seq_len}")
    chunks = []
    n = len(dialogue.utterances)
    for start in range(0, n, seq_len):
        part = dialogue.utterances[start : start + seq_len]
        utts = tuple(
            Utterance(
                index=j,
                speaker=u.speaker,
                text=u.text,
                emotion=u.emotion,
                key=u.key,
            )
            for j, u in enumerate(part)
        )
        trig = (
            None
            if dialogue.triggers is None
            else dialogue.triggers[start : start + len(part)]
        )
        chunks.append(
            Dialogue(id=f"{dialogue.id}[{start}:{start + len(part)}]", utterances=utts, triggers=trig)
        )
    return chunks


def split_corpus_sequences(corpus: Corpus, seq_len: int) -> Corpus:
    """Apply split_sequences to every dialogue (training view for ERC)."""
    chunks: list[Dialogue] = []
    for d in corpus.dialogues:
        chunks.extend(split_sequences(d, seq_len))
    return Corpus(dialogues=tuple(chunks), label_set=corpus.label_set, task_id=corpus.task_id)


def make_efr_instances(corpus: Corpus, w: int, require_labels: bool = True) -> list[EFRInstance]:
    """One instance per dialogue: the last min(w, n) utterances, target last."""
    if w < 1:
        raise InputError(f"window size must be >= 1, got {w}")
    instances = []
    for d in corpus.dialogues:
        if d.triggers is None and require_labels:
            raise CorpusValidationError(f"episode {d.id!r} has no trigger labels")
        if not d.utterances:
            continue
        n = len(d.utterances)
        start = max(0, n - w)
        target = n - 1
        instances.append(
            EFRInstance(
                dialogue_id=d.id,
                window=d.utterances[start:],
                target_index=target - start,
                trigger_labels=None if d.triggers is None else d.triggers[start:],
                window_offset=start,
                history_emotions=tuple(u.emotion for u in d.utterances[: target + 1]),
            )
        )
    return instances


def weights_from_supports(supports, mode: str) -> np.ndarray:
    """Per-class weights from support counts, normalized to sum to the class count."""
    if mode not in WEIGHT_MODES:
        raise InputError(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")
    supports = np.asarray(supports, dtype=np.float64)
    if supports.ndim != 1 or supports.size == 0:
        raise InputError("supports must be a non-empty 1-d sequence")
    if np.any(supports <= 0):
        bad = int(np.argmin(supports))
        raise InputError(f"class {bad} has zero support; cannot invert")
    raw = 1.0 / supports if mode == "inverse" else 1.0 / np.sqrt(supports)
    return raw * (supports.size / raw.sum())


def class_weights(corpus: Corpus, mode: str, target: str = "emotion") -> np.ndarray:
    """Class weights over corpus.label_set (emotion) or {0, 1} (trigger)."""
    if target == "emotion":
        counts = Counter(
            u.emotion for d in corpus.dialogues for u in d.utterances if u.emotion is not None
        )
        supports = [counts.get(label, 0) for label in corpus.label_set]
    elif target == "trigger":
        ones = zeros = 0
        for d in corpus.dialogues:
            if d.triggers is None:
                raise CorpusValidationError(f"episode {d.id!r} has no trigger labels")
            ones += sum(d.triggers)
            zeros += len(d.triggers) - sum(d.triggers)
        supports = [zeros, ones]
    else:
        raise InputError(f"unknown weight target {target!r}")
    return weights_from_supports(supports, mode)


def dataset_stats(corpus: Corpus) -> DatasetStats:
    """Episode/utterance/trigger counts plus the emotion label histogram."""
    seen_keys: set[str] = set()
    names: set[str] = set()
    slots = 0
    triggers = 0
    hist: Counter[str] = Counter()
    for d in corpus.dialogues:
        names.add(d.id)
        slots += len(d.utterances)
        for u in d.utterances:
            seen_keys.add(u.key or make_utterance_key(d.id, u.index))
            if u.emotion is not None:
                hist[u.emotion] += 1
        if d.triggers is not None:
            triggers += sum(d.triggers)
    return DatasetStats(
        episodes=len(names),
        instances=len(corpus.dialogues),
        utterances=len(seen_keys),
        utterance_slots=slots,
        triggers=triggers,
        label_histogram=dict(hist),
    )


def trigger_distance_histogram(corpus: Corpus) -> dict[int, int]:
    """Counts of (target index - trigger index) over all positive triggers.

    The target of every dialogue is its final utterance.
    """
    hist: Counter[int] = Counter()
    for d in corpus.dialogues:
        if d.triggers is None:
            raise CorpusValidationError(f"episode {d.id!r} has no trigger labels")
        tau = len(d.utterances) - 1
        for i, label in enumerate(d.triggers):
            if label:
                hist[tau - i] += 1
    return dict(hist)
