"""Precision, recall and F1 for emotion and trigger predictions, plus the
no-learning baselines. Scores are fractions internally; reports convert to
two-decimal percentages only when rendered.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .corpus import Corpus
from .errors import CorpusValidationError, InputError
from .ptz import zone_start


def pct(x: float) -> float:
    return round(100.0 * x, 2)


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class ClassScores:
    label: str
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self, percent: bool = True) -> dict:
        conv = pct if percent else float
        return {
            "label": self.label,
            "precision": conv(self.precision),
            "recall": conv(self.recall),
            "f1": conv(self.f1),
            "support": self.support,
        }


def class_scores(y_true: Sequence, y_pred: Sequence, labels: Sequence) -> tuple[ClassScores, ...]:
    if len(y_true) != len(y_pred):
        raise InputError(f"{len(y_true)} gold labels but {len(y_pred)} predictions")
    scores = []
    for label in labels:
        tp = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            if p == label and t == label:
                tp += 1
            elif p == label:
                fp += 1
            elif t == label:
                fn += 1
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        scores.append(ClassScores(str(label), precision, recall, f1, tp + fn))
    return tuple(scores)


def weighted_scores(scores: Sequence[ClassScores]) -> tuple[float, float, float]:
    """Support-weighted precision, recall and F1."""
    total = sum(s.support for s in scores)
    if total == 0:
        return 0.0, 0.0, 0.0
    p = sum(s.precision * s.support for s in scores) / total
    r = sum(s.recall * s.support for s in scores) / total
    f = sum(s.f1 * s.support for s in scores) / total
    return p, r, f


def weighted_f1(y_true: Sequence, y_pred: Sequence, labels: Sequence | None = None) -> float:
    if labels is None:
        labels = sorted(set(y_true))
    return weighted_scores(class_scores(y_true, y_pred, labels))[2]


def binary_confusion(y_true: Sequence[int], y_pred: Sequence[int]) -> dict:
    tn = fp = fn = tp = 0
    for t, p in zip(y_true, y_pred):
        if t not in (0, 1) or p not in (0, 1):
            raise InputError(f"binary labels must be 0 or 1, got ({t}, {p})")
        if t == 1:
            tp += p
            fn += 1 - p
        else:
            fp += p
            tn += 1 - p
    return {"tn": tn, "fp": fp, "fn": fn, "tp": tp}


@dataclass(frozen=True)
class MetricsReport:
    """headline names which F1 leads the report: support-weighted for
    emotions, the positive class for triggers."""

    headline: str
    f1: float
    precision: float
    recall: float
    per_class: tuple[ClassScores, ...]
    support: int
    confusion: dict | None = None

    def to_dict(self, percent: bool = True) -> dict:
        conv = pct if percent else float
        wp, wr, wf = weighted_scores(self.per_class)
        out = {
            "headline": self.headline,
            "f1": conv(self.f1),
            "precision": conv(self.precision),
            "recall": conv(self.recall),
            "weighted": {"precision": conv(wp), "recall": conv(wr), "f1": conv(wf)},
            "per_class": [s.to_dict(percent) for s in self.per_class],
            "support": self.support,
        }
        if self.confusion is not None:
            out["confusion"] = dict(self.confusion)
        return out


def erc_report(y_true: Sequence[str], y_pred: Sequence[str], labels: Sequence[str] | None = None) -> MetricsReport:
    if labels is None:
        labels = sorted(set(y_true))
    scores = class_scores(y_true, y_pred, labels)
    p, r, f = weighted_scores(scores)
    return MetricsReport(
        headline="weighted_f1",
        f1=f,
        precision=p,
        recall=r,
        per_class=scores,
        support=len(y_true),
    )


def efr_report(y_true: Sequence[int], y_pred: Sequence[int]) -> MetricsReport:
    scores = class_scores(y_true, y_pred, (0, 1))
    pos = scores[1]
    return MetricsReport(
        headline="trigger_f1",
        f1=pos.f1,
        precision=pos.precision,
        recall=pos.recall,
        per_class=scores,
        support=len(y_true),
        confusion=binary_confusion(y_true, y_pred),
    )


def _gold_emotions(corpus: Corpus) -> list[str]:
    gold = []
    for d in corpus.dialogues:
        for u in d.utterances:
            if u.emotion is None:
                raise CorpusValidationError(f"episode {d.id!r} has unlabeled utterances")
            gold.append(u.emotion)
    return gold


def neutral_baseline(corpus: Corpus, label: str = "neutral") -> MetricsReport:
    """Predict the neutral emotion everywhere. The label is matched against
    the corpus label set case-insensitively and must be present."""
    matches = [l for l in corpus.label_set if l.lower() == label.lower()]
    if not matches:
        raise InputError(f"label {label!r} not in corpus label set {corpus.label_set}")
    gold = _gold_emotions(corpus)
    return erc_report(gold, [matches[0]] * len(gold), corpus.label_set)


def rule_based_baseline(corpus: Corpus) -> MetricsReport:
    """Predict exactly one trigger per dialogue, at the utterance before the
    target; dialogues with a single utterance get no trigger."""
    y_true: list[int] = []
    y_pred: list[int] = []
    for d in corpus.dialogues:
        if d.triggers is None:
            raise CorpusValidationError(f"episode {d.id!r} has no trigger labels")
        n = len(d.utterances)
        for i in range(n):
            y_true.append(d.triggers[i])
            y_pred.append(1 if n >= 2 and i == n - 2 else 0)
    return efr_report(y_true, y_pred)


def expand_window_predictions(corpus: Corpus, predictions) -> tuple[list[int], list[int]]:
    """Align window predictions with every dialogue position; positions
    before the window count as predicted 0."""
    if len(predictions) != len(corpus.dialogues):
        raise InputError(
            f"{len(predictions)} predictions for {len(corpus.dialogues)} dialogues"
        )
    y_true: list[int] = []
    y_pred: list[int] = []
    for d, pred in zip(corpus.dialogues, predictions):
        if pred.dialogue_id != d.id:
            raise InputError(f"prediction for {pred.dialogue_id!r} does not match {d.id!r}")
        if d.triggers is None:
            raise CorpusValidationError(f"episode {d.id!r} has no trigger labels")
        for i in range(len(d.utterances)):
            y_true.append(d.triggers[i])
            j = i - pred.window_offset
            y_pred.append(pred.decisions[j] if j >= 0 else 0)
    return y_true, y_pred


def check_prediction_alignment(corpus: Corpus, entries) -> None:
    """Entries must be one dict per episode, in order, naming the episode."""
    if not isinstance(entries, list) or len(entries) != len(corpus.dialogues):
        count = len(entries) if isinstance(entries, list) else "no"
        raise InputError(
            f"prediction file has {count} entries for {len(corpus.dialogues)} gold episodes"
        )
    for d, entry in zip(corpus.dialogues, entries):
        if not isinstance(entry, dict) or entry.get("episode") != d.id:
            raise InputError(f"prediction entries misaligned at episode {d.id!r}")


def score_emotion_entries(corpus: Corpus, entries) -> MetricsReport:
    """Score [{episode, emotions}] entries against gold emotion labels."""
    check_prediction_alignment(corpus, entries)
    y_true: list[str] = []
    y_pred: list[str] = []
    for d, entry in zip(corpus.dialogues, entries):
        emotions = entry.get("emotions")
        if not isinstance(emotions, list) or len(emotions) != len(d.utterances):
            raise InputError(
                f"episode {d.id!r}: prediction has {len(emotions or [])} emotions "
                f"for {len(d.utterances)} utterances"
            )
        for u, p in zip(d.utterances, emotions):
            if u.emotion is None:
                raise InputError(f"gold utterance {u.key!r} has no emotion label")
            y_true.append(u.emotion)
            y_pred.append(str(p))
    return erc_report(y_true, y_pred, corpus.label_set)


def score_trigger_entries(corpus: Corpus, entries, use_ptz: bool = False) -> MetricsReport:
    """Score [{episode, triggers}] entries over every dialogue position,
    optionally masking predictions outside each episode's trigger zone."""
    check_prediction_alignment(corpus, entries)
    y_true: list[int] = []
    y_pred: list[int] = []
    for d, entry in zip(corpus.dialogues, entries):
        triggers = entry.get("triggers")
        n = len(d.utterances)
        if not isinstance(triggers, list) or len(triggers) != n:
            raise InputError(
                f"episode {d.id!r}: prediction has {len(triggers or [])} triggers "
                f"for {n} utterances"
            )
        if d.triggers is None:
            raise InputError(f"gold episode {d.id!r} has no trigger labels")
        decisions = []
        for p in triggers:
            if p not in (0, 1):
                raise InputError(f"episode {d.id!r}: trigger predictions must be 0 or 1")
            decisions.append(int(p))
        if use_ptz and n:
            start = zone_start([u.speaker for u in d.utterances], n - 1)
            decisions = [v if i >= start else 0 for i, v in enumerate(decisions)]
        y_true.extend(d.triggers)
        y_pred.extend(decisions)
    return efr_report(y_true, y_pred)


@dataclass(frozen=True)
class PTZAblation:
    f1_off: float
    f1_on: float
    masked_positives: int

    @property
    def delta(self) -> float:
        return self.f1_on - self.f1_off

    def to_dict(self, percent: bool = True) -> dict:
        conv = pct if percent else float
        return {
            "f1_without_mask": conv(self.f1_off),
            "f1_with_mask": conv(self.f1_on),
            "delta": round(conv(self.f1_on) - conv(self.f1_off), 2) if percent else self.delta,
            "masked_positives": self.masked_positives,
        }


def ablate_ptz(y_true: Sequence[int], pred_off: Sequence[int], pred_on: Sequence[int]) -> PTZAblation:
    """Compare trigger F1 with and without zone masking; masked_positives is
    how many positive predictions the mask removed."""
    if not len(y_true) == len(pred_off) == len(pred_on):
        raise InputError("prediction vectors must align with gold labels")
    return PTZAblation(
        f1_off=efr_report(y_true, pred_off).f1,
        f1_on=efr_report(y_true, pred_on).f1,
        masked_positives=int(sum(pred_off)) - int(sum(pred_on)),
    )
