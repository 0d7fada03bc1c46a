"""Training loops, epoch selection and checkpoint files.

Both models train with Adam, class-weighted cross entropy and gradient
clipping, on a seeded dialogue-level train/validation split. The epoch
with the best validation metric (weighted F1 for emotions, positive-class
F1 for triggers) wins and its weights are restored before returning.

Checkpoints use a custom container so that identical runs produce
identical bytes: magic ``FLIPCKPT``, a little-endian uint32 header length,
a canonical JSON header (format version, model kind, configs, label set,
speaker vocabulary, tensor manifest), then raw tensor bytes in manifest
order. Tensors are sorted by state-dict key and stored little-endian.
"""

from __future__ import annotations

import json
import os
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np
import torch

from .corpus import Corpus, Dialogue, make_efr_instances, class_weights, split_sequences
from .efr_net import EFRConfig, TriggerPrediction, TriggerTransformer, build_batch, decode_predictions
from .embed import (
    EmbeddingTable,
    EncoderConfig,
    SpeakerVocab,
    build_speaker_vocab,
    encode_corpus,
    read_cache,
)
from .erc_net import ERCConfig, MaskedMemoryERC, erc_features
from .errors import CheckpointError, InputError, TrainingError
from .metrics import MetricsReport, efr_report, erc_report, expand_window_predictions

CKPT_MAGIC = b"FLIPCKPT"
CKPT_VERSION = 1

_TASK_DEFAULTS = {
    1: dict(epochs=100, batch_size=64, lr=1e-4, weight_mode="inverse_sqrt"),
    2: dict(epochs=1000, batch_size=2000, lr=5e-7, weight_mode="inverse"),
    3: dict(epochs=1000, batch_size=1000, lr=5e-7, weight_mode="inverse"),
}


@dataclass(frozen=True)
class TrainConfig:
    task_id: int
    epochs: int
    batch_size: int
    lr: float
    weight_mode: str
    weight_decay: float = 1e-5
    grad_clip: float = 1.0
    seed: int = 7
    val_fraction: float = 0.1
    threads: int = 1
    restrict_to_ptz: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise InputError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InputError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    @classmethod
    def for_task(cls, task_id: int, **overrides) -> "TrainConfig":
        if task_id not in _TASK_DEFAULTS:
            raise InputError(f"unknown task id {task_id}; expected 1, 2 or 3")
        merged = dict(_TASK_DEFAULTS[task_id])
        merged.update(overrides)
        return cls(task_id=task_id, **merged)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_mode": self.weight_mode,
            "weight_decay": self.weight_decay,
            "grad_clip": self.grad_clip,
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "threads": self.threads,
            "restrict_to_ptz": self.restrict_to_ptz,
        }


def weighted_ce_loss(logits: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Mean over instances of -w[y] * log softmax(logits)[y].

    The mean is plain, not renormalized by the summed weights, so the
    per-class weights keep their nominal scale.
    """
    if logits.shape[0] != targets.shape[0]:
        raise InputError(f"{logits.shape[0]} logit rows but {targets.shape[0]} targets")
    if logits.shape[0] == 0:
        raise TrainingError("loss over an empty batch")
    logp = torch.log_softmax(logits, dim=1)
    picked = logp[torch.arange(logits.shape[0]), targets]
    loss = -(weights[targets] * picked).mean()
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss)!r}")
    return loss


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded train/validation index split; validation may be empty."""
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_val = 0
    if val_fraction > 0.0 and n > 1:
        n_val = max(1, min(int(round(n * val_fraction)), n - 1))
    return sorted(order[n_val:]), sorted(order[:n_val])


def _batches(items, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _log_line(log: IO | None, entry: dict) -> None:
    if log is not None:
        log.write(json.dumps(entry) + "\n")
        log.flush()


@dataclass
class TrainResult:
    model: torch.nn.Module
    labels: tuple[str, ...]
    vocab: SpeakerVocab
    history: list[dict]
    best_epoch: int
    best_metric: float


def _seed_everything(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(cfg.threads)


def _check_cache_coverage(corpus: Corpus, table: EmbeddingTable) -> None:
    """Training aborts before the first step if any utterance is unembedded."""
    missing = [
        u.key for d in corpus.dialogues for u in d.utterances if u.key not in table.vectors
    ]
    if missing:
        shown = ", ".join(missing[:5])
        more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
        raise InputError(f"{len(missing)} utterances missing from the cache: {shown}{more}")


def _run_header(cfg: TrainConfig, kind: str, train_ids: list[str], val_ids: list[str]) -> dict:
    return {
        "model": kind,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "train_split": train_ids,
        "val_split": val_ids,
    }


def train_erc(
    corpus: Corpus,
    table: EmbeddingTable,
    cfg: TrainConfig,
    model_cfg: ERCConfig | None = None,
    vocab: SpeakerVocab | None = None,
    log: IO | None = None,
) -> TrainResult:
    if not corpus.label_set:
        raise InputError("corpus has no emotion labels to train on")
    _seed_everything(cfg)
    labels = corpus.label_set
    if vocab is None:
        vocab = build_speaker_vocab(corpus)
    if model_cfg is None:
        model_cfg = ERCConfig(input_dim=table.dim + vocab.k, num_classes=len(labels))
    model = MaskedMemoryERC(model_cfg)
    _check_cache_coverage(corpus, table)
    weights = torch.tensor(class_weights(corpus, cfg.weight_mode, "emotion"), dtype=torch.float32)
    label_to_idx = {l: i for i, l in enumerate(labels)}

    train_idx, val_idx = split_indices(len(corpus.dialogues), cfg.val_fraction, cfg.seed)
    train_d = [corpus.dialogues[i] for i in train_idx]
    val_d = [corpus.dialogues[i] for i in val_idx] or train_d
    _log_line(log, _run_header(cfg, "erc", [d.id for d in train_d], [d.id for d in val_d]))
    if model_cfg.seq_len:
        train_units = [c for d in train_d for c in split_sequences(d, model_cfg.seq_len)]
    else:
        train_units = list(train_d)

    def targets_for(d: Dialogue) -> torch.Tensor:
        idxs = []
        for u in d.utterances:
            if u.emotion not in label_to_idx:
                raise InputError(f"utterance {u.key!r} has no usable emotion label")
            idxs.append(label_to_idx[u.emotion])
        return torch.tensor(idxs, dtype=torch.int64)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffler = random.Random(cfg.seed + 1)
    history: list[dict] = []
    best_metric, best_epoch, best_state = -1.0, 0, None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = list(train_units)
        shuffler.shuffle(order)
        loss_sum = items = 0
        for batch in _batches(order, cfg.batch_size):
            opt.zero_grad()
            logit_parts, target_parts = [], []
            for d in batch:
                feats, speakers = erc_features(d, table, vocab)
                logit_parts.append(model(torch.from_numpy(feats), speakers))
                target_parts.append(targets_for(d))
            loss = weighted_ce_loss(torch.cat(logit_parts), torch.cat(target_parts), weights)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            n = sum(t.shape[0] for t in target_parts)
            loss_sum += float(loss.detach()) * n
            items += n
        val_metric = _erc_metric(model, val_d, table, vocab, labels, model_cfg.seq_len)
        entry = {
            "epoch": epoch,
            "train_loss": loss_sum / items,
            "val_metric": val_metric,
            "wall_seconds": round(time.perf_counter() - t0, 3),
        }
        history.append(entry)
        _log_line(log, entry)
        if val_metric > best_metric:
            best_metric, best_epoch = val_metric, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    return TrainResult(model, labels, vocab, history, best_epoch, best_metric)


def predict_erc(
    model: MaskedMemoryERC,
    dialogues,
    table: EmbeddingTable,
    vocab: SpeakerVocab,
    labels: tuple[str, ...],
    seq_len: int | None = None,
) -> list[list[str]]:
    """Predicted emotion labels per dialogue, in dialogue order."""
    model.eval()
    out = []
    with torch.no_grad():
        for d in dialogues:
            chunks = split_sequences(d, seq_len) if seq_len else [d]
            preds: list[str] = []
            for c in chunks:
                feats, speakers = erc_features(c, table, vocab)
                logits = model(torch.from_numpy(feats), speakers)
                preds.extend(labels[int(i)] for i in logits.argmax(dim=1))
            out.append(preds)
    return out


def _erc_metric(model, dialogues, table, vocab, labels, seq_len) -> float:
    preds = predict_erc(model, dialogues, table, vocab, labels, seq_len)
    y_true = [u.emotion for d in dialogues for u in d.utterances]
    y_pred = [p for ps in preds for p in ps]
    return erc_report(y_true, y_pred, labels).f1


def eval_erc(
    model: MaskedMemoryERC,
    corpus: Corpus,
    table: EmbeddingTable,
    vocab: SpeakerVocab,
    labels: tuple[str, ...],
    seq_len: int | None = None,
) -> MetricsReport:
    preds = predict_erc(model, corpus.dialogues, table, vocab, labels, seq_len)
    y_true = []
    for d in corpus.dialogues:
        for u in d.utterances:
            if u.emotion is None:
                raise InputError(f"utterance {u.key!r} has no emotion label")
            y_true.append(u.emotion)
    return erc_report(y_true, [p for ps in preds for p in ps], labels)


def train_efr(
    corpus: Corpus,
    table: EmbeddingTable,
    cfg: TrainConfig,
    model_cfg: EFRConfig | None = None,
    vocab: SpeakerVocab | None = None,
    log: IO | None = None,
) -> TrainResult:
    if not corpus.label_set:
        raise InputError("corpus has no emotion labels; the trigger model needs them")
    _seed_everything(cfg)
    labels = corpus.label_set
    if vocab is None:
        vocab = build_speaker_vocab(corpus)
    if model_cfg is None:
        model_cfg = EFRConfig(
            input_dim=table.dim + vocab.k + len(labels), num_emotions=len(labels)
        )
    model = TriggerTransformer(model_cfg)
    _check_cache_coverage(corpus, table)
    weights = torch.tensor(class_weights(corpus, cfg.weight_mode, "trigger"), dtype=torch.float32)
    instances = make_efr_instances(corpus, model_cfg.window)

    train_idx, val_idx = split_indices(len(instances), cfg.val_fraction, cfg.seed)
    train_insts = [instances[i] for i in train_idx]
    val_insts = [instances[i] for i in val_idx] or train_insts
    _log_line(
        log,
        _run_header(
            cfg, "efr", [i.dialogue_id for i in train_insts], [i.dialogue_id for i in val_insts]
        ),
    )

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffler = random.Random(cfg.seed + 1)
    history: list[dict] = []
    best_metric, best_epoch, best_state = -1.0, 0, None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = list(train_insts)
        shuffler.shuffle(order)
        loss_sum = items = 0
        for chunk in _batches(order, cfg.batch_size):
            opt.zero_grad()
            batch = build_batch(chunk, table, vocab, labels, model_cfg)
            logits = model(batch)
            mask = batch.labels >= 0
            if cfg.restrict_to_ptz:
                mask &= batch.zone_mask
            loss = weighted_ce_loss(logits[mask], batch.labels[mask], weights)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            n = int(mask.sum())
            loss_sum += float(loss.detach()) * n
            items += n
        val_metric = _efr_metric(model, val_insts, table, vocab, labels, model_cfg)
        entry = {
            "epoch": epoch,
            "train_loss": loss_sum / items,
            "val_metric": val_metric,
            "wall_seconds": round(time.perf_counter() - t0, 3),
        }
        history.append(entry)
        _log_line(log, entry)
        if val_metric > best_metric:
            best_metric, best_epoch = val_metric, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    return TrainResult(model, labels, vocab, history, best_epoch, best_metric)


def predict_efr_instances(
    model: TriggerTransformer,
    instances,
    table: EmbeddingTable,
    vocab: SpeakerVocab,
    labels: tuple[str, ...],
    use_ptz: bool = False,
    batch_size: int = 64,
) -> list[TriggerPrediction]:
    model.eval()
    preds: list[TriggerPrediction] = []
    with torch.no_grad():
        for chunk in _batches(instances, batch_size):
            batch = build_batch(chunk, table, vocab, labels, model.config, with_labels=False)
            preds.extend(decode_predictions(batch, chunk, model(batch), use_ptz))
    return preds


def predict_efr(
    model: TriggerTransformer,
    corpus: Corpus,
    table: EmbeddingTable,
    vocab: SpeakerVocab,
    labels: tuple[str, ...],
    use_ptz: bool = False,
    batch_size: int = 64,
) -> list[TriggerPrediction]:
    instances = make_efr_instances(corpus, model.config.window, require_labels=False)
    return predict_efr_instances(model, instances, table, vocab, labels, use_ptz, batch_size)


def _efr_metric(model, instances, table, vocab, labels, model_cfg) -> float:
    preds = predict_efr_instances(model, instances, table, vocab, labels, use_ptz=False)
    y_true: list[int] = []
    y_pred: list[int] = []
    for inst, pred in zip(instances, preds):
        y_true.extend(inst.trigger_labels)
        y_pred.extend(pred.decisions)
    return efr_report(y_true, y_pred).f1


def eval_efr(
    model: TriggerTransformer,
    corpus: Corpus,
    table: EmbeddingTable,
    vocab: SpeakerVocab,
    labels: tuple[str, ...],
    use_ptz: bool = False,
) -> MetricsReport:
    """Trigger scores over every dialogue position; positions before the
    window count as predicted 0."""
    preds = predict_efr(model, corpus, table, vocab, labels, use_ptz)
    y_true, y_pred = expand_window_predictions(corpus, preds)
    return efr_report(y_true, y_pred)


_TORCH_TO_NP = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}


@dataclass
class Checkpoint:
    kind: str
    model_config: dict
    train_config: dict | None
    labels: tuple[str, ...]
    vocab: SpeakerVocab
    state: dict[str, torch.Tensor]


def save_checkpoint(
    path: str | Path,
    kind: str,
    model_cfg,
    train_cfg: TrainConfig | None,
    labels,
    vocab: SpeakerVocab,
    model: torch.nn.Module,
) -> None:
    if kind not in ("erc", "efr"):
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    state = model.state_dict()
    manifest = []
    blobs = []
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        np_dtype = _TORCH_TO_NP.get(t.dtype)
        if np_dtype is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        manifest.append({"name": name, "shape": list(t.shape), "dtype": np_dtype})
        blobs.append(t.numpy().astype(np_dtype, copy=False).tobytes())
    header = {
        "format_version": CKPT_VERSION,
        "kind": kind,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "labels": list(labels),
        "speaker_vocab": {"top": list(vocab.top), "k": vocab.k},
        "tensors": manifest,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(np.uint32(len(hjson)).tobytes())
        f.write(hjson)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    (hlen,) = np.frombuffer(blob[off : off + 4], dtype="<u4")
    off += 4
    try:
        header = json.loads(blob[off : off + int(hlen)].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    off += int(hlen)
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')!r}")
    state: dict[str, torch.Tensor] = {}
    for spec in header["tensors"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data at {spec['name']!r}")
        arr = np.frombuffer(blob[off : off + nbytes], dtype=dtype).reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr.copy())
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    vocab_spec = header["speaker_vocab"]
    return Checkpoint(
        kind=header["kind"],
        model_config=header["model_config"],
        train_config=header["train_config"],
        labels=tuple(header["labels"]),
        vocab=SpeakerVocab(top=tuple(vocab_spec["top"]), k=int(vocab_spec["k"])),
        state=state,
    )


def load_typed_checkpoint(path: str | Path, kind: str) -> tuple[Checkpoint, torch.nn.Module]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != kind:
        wanted = "emotion" if kind == "erc" else "trigger"
        raise InputError(
            f"checkpoint {path} holds a {ckpt.kind} model; expected the {wanted} model"
        )
    return ckpt, model_from_checkpoint(ckpt)


def table_for(corpus: Corpus, task: int, cache_path: str | Path | None) -> EmbeddingTable:
    """Embeddings from a cache file, or freshly hashed stub vectors without one."""
    if cache_path:
        header, vectors = read_cache(cache_path)
        return EmbeddingTable(dim=int(header["dim"]), vectors=vectors)
    return encode_corpus(corpus, EncoderConfig.for_task(task), None)


def check_feature_width(ckpt: Checkpoint, table: EmbeddingTable) -> None:
    """The checkpoint's input width must equal what featurization will build."""
    expected = int(ckpt.model_config["input_dim"])
    extra = len(ckpt.labels) if ckpt.kind == "efr" else 0
    actual = table.dim + ckpt.vocab.k + extra
    if actual != expected:
        parts = f"embeddings {table.dim} + speakers {ckpt.vocab.k}"
        if extra:
            parts += f" + emotions {extra}"
        raise InputError(
            f"feature width {actual} ({parts}) does not match checkpoint "
            f"input_dim {expected}; wrong embedding cache?"
        )


def model_from_checkpoint(ckpt: Checkpoint) -> torch.nn.Module:
    try:
        if ckpt.kind == "erc":
            model: torch.nn.Module = MaskedMemoryERC(ERCConfig(**ckpt.model_config))
        elif ckpt.kind == "efr":
            model = TriggerTransformer(EFRConfig(**ckpt.model_config))
        else:
            raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")
        model.load_state_dict(ckpt.state)
    except (TypeError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint does not match its declared model: {exc}") from exc
    model.eval()
    return model
