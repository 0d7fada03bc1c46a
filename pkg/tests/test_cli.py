import json

import pytest

from flipkit.cli import main

from conftest import write_corpus_file


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data_file(tmp_path):
    path = tmp_path / "episodes.json"
    write_corpus_file(path, n=6, seed=23)
    return path


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "train": {"val_fraction": 0.25, "batch_size": 4},
        "erc": {"hidden_dim": 12, "hops": 1, "dropout": 0.0, "seq_len": None},
        "efr": {"model_dim": 8, "heads": 2, "emo_hidden": 4, "dropout": 0.0, "window": 4},
        "encoder": {"dim": 16, "model": "stub-16"},
    }))
    return path


def make_cache(tmp_path, data_file, config_file, capsys):
    cache = tmp_path / "utt.emb"
    code, out, err = run(
        ["--config", str(config_file), "embed",
         "--task", "2", "--data", str(data_file), "--cache", str(cache)],
        capsys,
    )
    assert code == 0, err
    return cache


# --- global behavior -----------------------------------------------------------

def test_help_exits_zero(capsys):
    code, out, _ = run(["--help"], capsys)
    assert code == 0
    assert "stats" in out and "train-erc" in out


def test_unknown_subcommand(capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == 1
    assert "No such command" in err


def test_missing_required_option(capsys):
    code, _, err = run(["stats", "--task", "1"], capsys)
    assert code == 1
    assert "--data" in err


def test_nonexistent_data_file(tmp_path, capsys):
    code, _, err = run(["stats", "--task", "1", "--data", str(tmp_path / "nope.json")], capsys)
    assert code == 1


def test_corrupt_data_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("[{", encoding="utf-8")
    code, _, err = run(["stats", "--task", "1", "--data", str(bad)], capsys)
    assert code == 1
    assert "error:" in err


def test_config_rejects_unknown_keys(tmp_path, data_file, config_file, capsys):
    cache = make_cache(tmp_path, data_file, config_file, capsys)
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"train": {"warmup": 5}}')
    code, _, err = run(
        ["--config", str(cfg), "train-erc", "--data", str(data_file),
         "--cache", str(cache), "--out", str(tmp_path / "m.ckpt")],
        capsys,
    )
    assert code == 1
    assert "warmup" in err


# --- stats ----------------------------------------------------------------------

def test_stats_json_and_table(data_file, capsys):
    code, out, err = run(["stats", "--task", "2", "--data", str(data_file)], capsys)
    assert code == 0
    payload = json.loads(out)
    assert payload["episodes"] == 6
    assert payload["instances"] == 6
    assert "label_histogram" in payload
    assert "episodes" in err  # aligned human table on stderr


def test_stats_quiet_suppresses_stderr(data_file, capsys):
    code, out, err = run(["--quiet", "stats", "--task", "2", "--data", str(data_file)], capsys)
    assert code == 0
    assert json.loads(out)
    assert err == ""


def test_stats_out_file(tmp_path, data_file, capsys):
    dest = tmp_path / "stats.json"
    code, out, _ = run(
        ["--quiet", "stats", "--task", "2", "--data", str(data_file), "--out", str(dest)],
        capsys,
    )
    assert code == 0
    assert out == ""
    assert json.loads(dest.read_text())["episodes"] == 6


def test_stats_ptz_adds_skew(data_file, capsys):
    code, out, err = run(
        ["stats", "--task", "2", "--data", str(data_file), "--ptz", "--window", "4"],
        capsys,
    )
    assert code == 0
    skew = json.loads(out)["skew"]
    assert skew["window"] == 4
    assert set(skew) == {"convention", "window", "original", "setting_1", "setting_2"}
    assert "setting_2" in err


def test_stats_ptz_needs_triggers(tmp_path, capsys):
    episodes = [{"episode": "e", "speakers": ["A", "B"], "utterances": ["x", "y"],
                 "emotions": ["joy", "joy"]}]
    path = tmp_path / "no_triggers.json"
    path.write_text(json.dumps(episodes))
    code, _, err = run(["stats", "--task", "1", "--data", str(path), "--ptz"], capsys)
    assert code == 1
    assert "trigger" in err


# --- embed -----------------------------------------------------------------------

def test_embed_writes_cache(tmp_path, data_file, config_file, capsys):
    cache = tmp_path / "utt.emb"
    code, out, err = run(
        ["--config", str(config_file), "embed",
         "--task", "2", "--data", str(data_file), "--cache", str(cache)],
        capsys,
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["dim"] == 16
    assert payload["keys"] > 0
    assert cache.exists()

    before = cache.read_bytes()
    code, _, _ = run(
        ["--config", str(config_file), "embed",
         "--task", "2", "--data", str(data_file), "--cache", str(cache)],
        capsys,
    )
    assert code == 0
    assert cache.read_bytes() == before  # second run is a pure cache hit


def test_embed_dim_conflict_is_runtime_error(tmp_path, data_file, config_file, capsys):
    cache = make_cache(tmp_path, data_file, config_file, capsys)
    code, _, err = run(
        ["embed", "--task", "2", "--data", str(data_file), "--cache", str(cache),
         "--dim", "32", "--model", "stub-32"],
        capsys,
    )
    assert code == 2
    assert "error:" in err


# --- ERC round trip ----------------------------------------------------------------

def test_erc_train_predict_eval(tmp_path, data_file, config_file, capsys):
    cache = make_cache(tmp_path, data_file, config_file, capsys)
    ckpt = tmp_path / "erc.ckpt"
    code, out, err = run(
        ["--config", str(config_file), "train-erc",
         "--task", "1", "--data", str(data_file), "--cache", str(cache),
         "--out", str(ckpt), "--epochs", "2", "--lr", "0.001"],
        capsys,
    )
    assert code == 0, err
    summary = json.loads(out)
    assert summary["checkpoint"] == str(ckpt)
    assert summary["epochs"] == 2
    assert 1 <= summary["best_epoch"] <= 2
    assert ckpt.exists()
    # per-epoch progress went to stderr as JSON lines
    logged = [json.loads(l) for l in err.splitlines() if l.startswith("{")]
    assert any("epoch" in e for e in logged)

    preds_file = tmp_path / "emotions.json"
    code, _, _ = run(
        ["--quiet", "predict-erc", "--ckpt", str(ckpt), "--data", str(data_file),
         "--cache", str(cache), "--out", str(preds_file)],
        capsys,
    )
    assert code == 0
    preds = json.loads(preds_file.read_text())
    assert len(preds) == 6
    assert set(preds[0]) == {"episode", "emotions"}

    code, out, err = run(
        ["eval", "--task", "1", "--gold", str(data_file), "--pred", str(preds_file)],
        capsys,
    )
    assert code == 0
    report = json.loads(out)
    assert report["headline"] == "weighted_f1"
    assert 0.0 <= report["f1"] <= 100.0
    assert "weighted_f1" in err


def test_predict_erc_rejects_trigger_checkpoint(tmp_path, data_file, config_file, capsys):
    cache = make_cache(tmp_path, data_file, config_file, capsys)
    ckpt = tmp_path / "efr.ckpt"
    code, _, err = run(
        ["--quiet", "--config", str(config_file), "train-efr",
         "--data", str(data_file), "--cache", str(cache),
         "--out", str(ckpt), "--epochs", "1", "--lr", "0.001"],
        capsys,
    )
    assert code == 0, err
    code, _, err = run(
        ["predict-erc", "--ckpt", str(ckpt), "--data", str(data_file),
         "--cache", str(cache)],
        capsys,
    )
    assert code == 1
    assert "emotion" in err


# --- EFR round trip -----------------------------------------------------------------

def test_efr_train_predict_eval_ablate(tmp_path, data_file, config_file, capsys):
    cache = make_cache(tmp_path, data_file, config_file, capsys)
    ckpt = tmp_path / "efr.ckpt"
    code, out, err = run(
        ["--quiet", "--config", str(config_file), "train-efr",
         "--task", "2", "--data", str(data_file), "--cache", str(cache),
         "--out", str(ckpt), "--epochs", "2", "--lr", "0.001", "--ptz-mask", "off"],
        capsys,
    )
    assert code == 0, err
    assert err == ""  # --quiet silences the training log

    preds_file = tmp_path / "triggers.json"
    code, _, _ = run(
        ["--quiet", "predict-efr", "--ckpt", str(ckpt), "--data", str(data_file),
         "--cache", str(cache), "--ptz-mask", "on", "--out", str(preds_file)],
        capsys,
    )
    assert code == 0
    preds = json.loads(preds_file.read_text())
    gold = json.loads(data_file.read_text())
    assert len(preds) == len(gold)
    for p, g in zip(preds, gold):
        assert p["episode"] == g["episode"]
        assert len(p["triggers"]) == len(g["utterances"])
        assert set(p["triggers"]) <= {0, 1}

    code, out, _ = run(
        ["--quiet", "eval", "--task", "2", "--gold", str(data_file),
         "--pred", str(preds_file), "--ptz-mask", "on"],
        capsys,
    )
    assert code == 0
    report = json.loads(out)
    assert report["headline"] == "trigger_f1"
    assert set(report["confusion"]) == {"tn", "fp", "fn", "tp"}

    code, out, _ = run(
        ["--quiet", "ablate-ptz", "--ckpt", str(ckpt), "--data", str(data_file),
         "--cache", str(cache)],
        capsys,
    )
    assert code == 0
    ab = json.loads(out)
    assert {"f1_without_mask", "f1_with_mask", "delta", "masked_positives",
            "reports"} <= set(ab)
    assert ab["masked_positives"] >= 0


def test_eval_rejects_misaligned_predictions(tmp_path, data_file, capsys):
    preds_file = tmp_path / "bad_preds.json"
    preds_file.write_text(json.dumps([{"episode": "wrong", "triggers": [0]}]))
    code, _, err = run(
        ["eval", "--task", "2", "--gold", str(data_file), "--pred", str(preds_file)],
        capsys,
    )
    assert code == 1
    assert "error:" in err


def test_eval_rejects_corrupt_prediction_json(tmp_path, data_file, capsys):
    preds_file = tmp_path / "corrupt.json"
    preds_file.write_text("[{]")
    code, _, err = run(
        ["eval", "--task", "2", "--gold", str(data_file), "--pred", str(preds_file)],
        capsys,
    )
    assert code == 1
    assert "not valid JSON" in err


# --- baselines -----------------------------------------------------------------------

def test_baseline_neutral(data_file, capsys):
    code, out, _ = run(
        ["--quiet", "baseline", "--task", "1", "--kind", "neutral", "--data", str(data_file)],
        capsys,
    )
    assert code == 0
    assert json.loads(out)["headline"] == "weighted_f1"


def test_baseline_rule(data_file, capsys):
    code, out, _ = run(
        ["--quiet", "baseline", "--task", "2", "--kind", "rule", "--data", str(data_file)],
        capsys,
    )
    assert code == 0
    report = json.loads(out)
    assert report["headline"] == "trigger_f1"
    assert report["confusion"]["tp"] + report["confusion"]["fp"] <= 6


def test_baseline_neutral_missing_label(tmp_path, capsys):
    episodes = [{"episode": "e", "speakers": ["A"], "utterances": ["x"],
                 "emotions": ["joy"]}]
    path = tmp_path / "no_neutral.json"
    path.write_text(json.dumps(episodes))
    code, _, err = run(
        ["baseline", "--task", "1", "--kind", "neutral", "--data", str(path)], capsys
    )
    assert code == 1
    assert "neutral" in err
