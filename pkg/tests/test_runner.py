import io
import json
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from flipkit.corpus import make_efr_instances
from flipkit.efr_net import EFRConfig
from flipkit.embed import build_speaker_vocab
from flipkit.erc_net import ERCConfig
from flipkit.errors import CheckpointError, InputError, TrainingError
from flipkit.runner import (
    CKPT_MAGIC,
    TrainConfig,
    check_feature_width,
    eval_efr,
    eval_erc,
    load_checkpoint,
    load_typed_checkpoint,
    predict_efr,
    predict_erc,
    save_checkpoint,
    split_indices,
    table_for,
    train_efr,
    train_erc,
    weighted_ce_loss,
)

from conftest import make_corpus, small_table


def erc_setup(n=8, seed=13):
    corpus = make_corpus(n=n, seed=seed, task=1)
    return corpus, small_table(corpus, dim=16)


def erc_model_cfg(corpus, table, **kw):
    merged = dict(hidden_dim=12, hops=1, dropout=0.0, seq_len=None)
    merged.update(kw)
    return ERCConfig(input_dim=table.dim + 6, num_classes=len(corpus.label_set), **merged)


def efr_setup(n=8, seed=17, **kw):
    corpus = make_corpus(n=n, seed=seed, task=2, **kw)
    return corpus, small_table(corpus, dim=16)


def efr_model_cfg(corpus, table, **kw):
    merged = dict(model_dim=8, heads=2, emo_hidden=4, dropout=0.0, window=4)
    merged.update(kw)
    return EFRConfig(
        input_dim=table.dim + 6 + len(corpus.label_set),
        num_emotions=len(corpus.label_set), **merged,
    )


def train_cfg(task=1, **kw):
    merged = dict(epochs=2, batch_size=4, lr=1e-3,
                  weight_mode="inverse_sqrt", val_fraction=0.25, seed=7)
    merged.update(kw)
    return TrainConfig(task_id=task, **merged)


# --- loss ---------------------------------------------------------------------

def test_weighted_loss_hand_oracle():
    logits = torch.tensor([[2.0, 0.0], [0.5, 1.5]])
    targets = torch.tensor([0, 1])
    weights = torch.tensor([1.0, 3.0])
    lse0 = math.log(math.exp(2.0) + math.exp(0.0))
    lse1 = math.log(math.exp(0.5) + math.exp(1.5))
    expected = ((lse0 - 2.0) * 1.0 + (lse1 - 1.5) * 3.0) / 2.0
    loss = weighted_ce_loss(logits, targets, weights)
    assert float(loss) == pytest.approx(expected, abs=1e-7)


def test_uniform_weights_match_plain_cross_entropy():
    g = torch.Generator().manual_seed(3)
    logits = torch.randn(40, 5, generator=g, dtype=torch.float64)
    targets = torch.randint(0, 5, (40,), generator=g)
    ours = weighted_ce_loss(logits, targets, torch.ones(5, dtype=torch.float64))
    ref = F.cross_entropy(logits, targets)
    assert abs(float(ours) - float(ref)) < 1e-9


def test_loss_keeps_nominal_weight_scale():
    # doubling all weights doubles the loss; torch's weighted mean would not
    logits = torch.tensor([[1.0, -1.0], [0.3, 0.9]])
    targets = torch.tensor([0, 1])
    base = weighted_ce_loss(logits, targets, torch.tensor([1.0, 2.0]))
    doubled = weighted_ce_loss(logits, targets, torch.tensor([2.0, 4.0]))
    assert float(doubled) == pytest.approx(2 * float(base), rel=1e-6)


def test_loss_rejects_empty_and_misaligned():
    w = torch.ones(2)
    with pytest.raises(TrainingError):
        weighted_ce_loss(torch.zeros(0, 2), torch.zeros(0, dtype=torch.int64), w)
    with pytest.raises(InputError):
        weighted_ce_loss(torch.zeros(2, 2), torch.zeros(3, dtype=torch.int64), w)


def test_loss_rejects_non_finite():
    logits = torch.tensor([[float("inf"), 0.0]])
    with pytest.raises(TrainingError):
        weighted_ce_loss(logits, torch.tensor([1]), torch.ones(2))


def test_zero_lr_step_changes_nothing():
    torch.manual_seed(0)
    layer = torch.nn.Linear(4, 3)
    before = {k: v.detach().clone() for k, v in layer.state_dict().items()}
    opt = torch.optim.Adam(layer.parameters(), lr=0.0)
    loss = weighted_ce_loss(layer(torch.randn(6, 4)), torch.randint(0, 3, (6,)), torch.ones(3))
    loss.backward()
    opt.step()
    for k, v in layer.state_dict().items():
        assert torch.equal(v, before[k])


# --- splits and config ---------------------------------------------------------

def test_split_indices_partition():
    train, val = split_indices(20, 0.1, seed=5)
    assert sorted(train + val) == list(range(20))
    assert len(val) == 2
    assert split_indices(20, 0.1, seed=5) == (train, val)
    assert split_indices(20, 0.1, seed=6) != (train, val)


def test_split_indices_edge_cases():
    assert split_indices(10, 0.0, seed=1) == (list(range(10)), [])
    assert split_indices(1, 0.5, seed=1) == ([0], [])
    # a tiny fraction still reserves one dialogue, never the whole set
    train, val = split_indices(3, 0.01, seed=1)
    assert len(val) == 1 and len(train) == 2
    train, val = split_indices(2, 0.9, seed=1)
    assert len(val) == 1 and len(train) == 1


def test_task_defaults():
    t1 = TrainConfig.for_task(1)
    assert (t1.epochs, t1.batch_size, t1.lr, t1.weight_mode) == (100, 64, 1e-4, "inverse_sqrt")
    t2 = TrainConfig.for_task(2)
    assert (t2.epochs, t2.batch_size, t2.lr, t2.weight_mode) == (1000, 2000, 5e-7, "inverse")
    t3 = TrainConfig.for_task(3)
    assert (t3.batch_size, t3.weight_mode) == (1000, "inverse")
    assert TrainConfig.for_task(1, epochs=3).epochs == 3
    with pytest.raises(InputError):
        TrainConfig.for_task(9)


@pytest.mark.parametrize(
    "kw",
    [
        {"epochs": 0},
        {"batch_size": 0},
        {"lr": 0.0},
        {"lr": -1e-4},
        {"val_fraction": 1.0},
        {"val_fraction": -0.1},
    ],
)
def test_train_config_validation(kw):
    merged = dict(task_id=1, epochs=2, batch_size=4, lr=1e-3, weight_mode="inverse")
    merged.update(kw)
    with pytest.raises(InputError):
        TrainConfig(**merged)


# --- ERC training ---------------------------------------------------------------

def test_train_erc_runs_and_keeps_best_epoch():
    corpus, table = erc_setup()
    log = io.StringIO()
    result = train_erc(corpus, table, train_cfg(epochs=3), erc_model_cfg(corpus, table), log=log)
    assert len(result.history) == 3
    assert result.best_metric == max(h["val_metric"] for h in result.history)
    assert result.history[result.best_epoch - 1]["val_metric"] == result.best_metric

    lines = [json.loads(l) for l in log.getvalue().splitlines()]
    head, epochs = lines[0], lines[1:]
    assert set(head) == {"model", "seed", "threads", "train_split", "val_split"}
    assert head["model"] == "erc"
    assert head["seed"] == 7
    assert set(head["train_split"]).isdisjoint(head["val_split"])
    assert len(epochs) == 3
    for i, entry in enumerate(epochs, start=1):
        assert set(entry) == {"epoch", "train_loss", "val_metric", "wall_seconds"}
        assert entry["epoch"] == i
        assert math.isfinite(entry["train_loss"])


def test_returned_erc_model_matches_best_metric():
    corpus, table = erc_setup()
    cfg = train_cfg(epochs=3)
    result = train_erc(corpus, table, cfg, erc_model_cfg(corpus, table))
    val_ids = set(
        d.id for i, d in enumerate(corpus.dialogues)
        if i in split_indices(len(corpus.dialogues), cfg.val_fraction, cfg.seed)[1]
    )
    val_d = [d for d in corpus.dialogues if d.id in val_ids]
    preds = predict_erc(result.model, val_d, table, result.vocab, result.labels)
    from flipkit.metrics import erc_report

    y_true = [u.emotion for d in val_d for u in d.utterances]
    rep = erc_report(y_true, [p for ps in preds for p in ps], result.labels)
    assert rep.f1 == pytest.approx(result.best_metric)


def test_train_erc_is_deterministic(tmp_path):
    corpus, table = erc_setup()
    cfg = train_cfg()
    a = train_erc(corpus, table, cfg, erc_model_cfg(corpus, table))
    b = train_erc(corpus, table, cfg, erc_model_cfg(corpus, table))
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k])
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(pa, "erc", a.model.config, cfg, a.labels, a.vocab, a.model)
    save_checkpoint(pb, "erc", b.model.config, cfg, b.labels, b.vocab, b.model)
    assert pa.read_bytes() == pb.read_bytes()


def test_train_erc_chunks_long_dialogues():
    corpus, table = erc_setup()
    model_cfg = erc_model_cfg(corpus, table, seq_len=3)
    result = train_erc(corpus, table, train_cfg(epochs=1), model_cfg)
    preds = predict_erc(result.model, corpus.dialogues, table, result.vocab,
                        result.labels, seq_len=3)
    assert [len(p) for p in preds] == [len(d) for d in corpus.dialogues]


def test_train_erc_aborts_on_missing_embeddings():
    corpus, table = erc_setup()
    key = corpus.dialogues[0].utterances[0].key
    del table.vectors[key]
    with pytest.raises(InputError, match="missing from the cache"):
        train_erc(corpus, table, train_cfg(), erc_model_cfg(corpus, table))


def test_train_erc_needs_labels():
    corpus, table = efr_setup()
    stripped = corpus.__class__(dialogues=corpus.dialogues, label_set=(), task_id=1)
    with pytest.raises(InputError):
        train_erc(stripped, table, train_cfg())


def test_eval_erc_support(corpus10):
    corpus, table = erc_setup(n=4)
    result = train_erc(corpus, table, train_cfg(epochs=1), erc_model_cfg(corpus, table))
    rep = eval_erc(result.model, corpus, table, result.vocab, result.labels)
    assert rep.support == sum(len(d) for d in corpus.dialogues)
    assert rep.headline == "weighted_f1"


# --- EFR training ---------------------------------------------------------------

def test_train_efr_runs_and_logs():
    corpus, table = efr_setup()
    log = io.StringIO()
    result = train_efr(corpus, table, train_cfg(task=2, epochs=2),
                       efr_model_cfg(corpus, table), log=log)
    assert len(result.history) == 2
    head = json.loads(log.getvalue().splitlines()[0])
    assert head["model"] == "efr"
    assert result.best_metric == max(h["val_metric"] for h in result.history)


def test_train_efr_deterministic_checkpoints(tmp_path):
    corpus, table = efr_setup()
    cfg = train_cfg(task=2)
    paths = []
    for name in ("a", "b"):
        result = train_efr(corpus, table, cfg, efr_model_cfg(corpus, table))
        p = tmp_path / f"{name}.ckpt"
        save_checkpoint(p, "efr", result.model.config, cfg, result.labels,
                        result.vocab, result.model)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_efr_ptz_restriction_changes_training():
    corpus, table = efr_setup()
    base = train_efr(corpus, table, train_cfg(task=2), efr_model_cfg(corpus, table))
    masked = train_efr(corpus, table, train_cfg(task=2, restrict_to_ptz=True),
                       efr_model_cfg(corpus, table))
    same = all(
        torch.equal(v, masked.model.state_dict()[k])
        for k, v in base.model.state_dict().items()
    )
    assert not same


def test_train_efr_aborts_on_missing_embeddings():
    corpus, table = efr_setup()
    del table.vectors[corpus.dialogues[0].utterances[0].key]
    with pytest.raises(InputError, match="missing from the cache"):
        train_efr(corpus, table, train_cfg(task=2), efr_model_cfg(corpus, table))


def test_predict_efr_covers_every_dialogue():
    corpus, table = efr_setup()
    result = train_efr(corpus, table, train_cfg(task=2, epochs=1),
                       efr_model_cfg(corpus, table))
    preds = predict_efr(result.model, corpus, table, result.vocab, result.labels)
    assert len(preds) == len(corpus.dialogues)
    for pred, d in zip(preds, corpus.dialogues):
        assert pred.dialogue_id == d.id
        assert len(pred.decisions) == min(len(d), result.model.config.window)


def test_eval_efr_scores_all_positions():
    corpus, table = efr_setup()
    result = train_efr(corpus, table, train_cfg(task=2, epochs=1),
                       efr_model_cfg(corpus, table))
    rep = eval_efr(result.model, corpus, table, result.vocab, result.labels)
    assert rep.support == sum(len(d) for d in corpus.dialogues)
    assert sum(rep.confusion.values()) == rep.support


def test_efr_masked_predictions_are_subsets():
    corpus, table = efr_setup(n=10)
    result = train_efr(corpus, table, train_cfg(task=2, epochs=1),
                       efr_model_cfg(corpus, table))
    off = predict_efr(result.model, corpus, table, result.vocab, result.labels, use_ptz=False)
    on = predict_efr(result.model, corpus, table, result.vocab, result.labels, use_ptz=True)
    for a, b in zip(off, on):
        assert all(y <= x for x, y in zip(a.decisions, b.decisions))


# --- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_predictions(tmp_path):
    corpus, table = erc_setup()
    cfg = train_cfg()
    result = train_erc(corpus, table, cfg, erc_model_cfg(corpus, table))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "erc", result.model.config, cfg, result.labels,
                    result.vocab, result.model)
    ckpt, model = load_typed_checkpoint(path, "erc")
    assert ckpt.labels == result.labels
    assert ckpt.vocab == result.vocab
    assert ckpt.train_config["seed"] == cfg.seed
    before = predict_erc(result.model, corpus.dialogues, table, result.vocab, result.labels)
    after = predict_erc(model, corpus.dialogues, table, ckpt.vocab, ckpt.labels)
    assert before == after


def test_checkpoint_rejects_wrong_kind(tmp_path):
    corpus, table = erc_setup()
    cfg = train_cfg()
    result = train_erc(corpus, table, cfg, erc_model_cfg(corpus, table))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "erc", result.model.config, cfg, result.labels,
                    result.vocab, result.model)
    with pytest.raises(InputError, match="trigger"):
        load_typed_checkpoint(path, "efr")


def test_checkpoint_corruption_detected(tmp_path):
    corpus, table = erc_setup(n=3)
    result = train_erc(corpus, table, train_cfg(epochs=1), erc_model_cfg(corpus, table))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "erc", result.model.config, None, result.labels,
                    result.vocab, result.model)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(blob[:-20])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)

    trailing = tmp_path / "trail.ckpt"
    trailing.write_bytes(blob + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(trailing)


def test_checkpoint_rejects_future_version(tmp_path):
    hdr = json.dumps({"format_version": 99}).encode()
    path = tmp_path / "v.ckpt"
    path.write_bytes(CKPT_MAGIC + np.uint32(len(hdr)).tobytes() + hdr)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_save_checkpoint_rejects_unknown_kind(tmp_path):
    corpus, table = erc_setup(n=2)
    result = train_erc(corpus, table, train_cfg(epochs=1), erc_model_cfg(corpus, table))
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", "other", result.model.config, None,
                        result.labels, result.vocab, result.model)


def test_table_for_cache_and_stub(tmp_path, corpus10):
    from flipkit.embed import EncoderConfig, encode_corpus

    cache = tmp_path / "c.emb"
    encode_corpus(corpus10, EncoderConfig(provider="stub", model="stub-16", dim=16), cache)
    table = table_for(corpus10, 2, cache)
    assert table.dim == 16
    fresh = table_for(corpus10, 2, None)
    assert fresh.dim == 768
    assert len(fresh) == sum(len(d) for d in corpus10.dialogues)


def test_check_feature_width(tmp_path):
    corpus, table = erc_setup(n=3)
    cfg = train_cfg(epochs=1)
    result = train_erc(corpus, table, cfg, erc_model_cfg(corpus, table))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "erc", result.model.config, cfg, result.labels,
                    result.vocab, result.model)
    ckpt, _ = load_typed_checkpoint(path, "erc")
    check_feature_width(ckpt, table)  # matching width passes
    wrong = small_table(corpus, dim=8)
    with pytest.raises(InputError, match="feature width"):
        check_feature_width(ckpt, wrong)
