"""Command line entry point.

Machine output is JSON on stdout (or --out FILE); human-readable tables
and training progress go to stderr. Exit codes: 0 success, 1 invalid
input or usage, 2 runtime failure.
"""

from __future__ import annotations

import json
import sys
from dataclasses import fields as dc_fields, replace
from pathlib import Path

import click

from .corpus import dataset_stats, load_corpus
from .efr_net import EFRConfig
from .embed import EncoderConfig, build_speaker_vocab, encode_corpus
from .erc_net import ERCConfig
from .errors import FlipkitError, InputError
from .metrics import (
    MetricsReport,
    ablate_ptz,
    efr_report,
    expand_window_predictions,
    neutral_baseline,
    rule_based_baseline,
    score_emotion_entries,
    score_trigger_entries,
)
from .ptz import skew_table
from .runner import (
    TrainConfig,
    check_feature_width,
    load_typed_checkpoint,
    predict_erc,
    predict_efr,
    save_checkpoint,
    table_for,
    train_efr,
    train_erc,
)

DEFAULT_SEED = 7

_TRAIN_KEYS = {f.name for f in dc_fields(TrainConfig)} - {"task_id"}
_ERC_KEYS = {f.name for f in dc_fields(ERCConfig)} - {"input_dim", "num_classes"}
_EFR_KEYS = {f.name for f in dc_fields(EFRConfig)} - {"input_dim", "num_emotions"}
_ENC_KEYS = {f.name for f in dc_fields(EncoderConfig)}


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError("config file must hold a JSON object")
    return data


def _section(config: dict, name: str, allowed: set[str]) -> dict:
    sec = config.get(name, {})
    if not isinstance(sec, dict):
        raise InputError(f"config section {name!r} must be a JSON object")
    unknown = set(sec) - allowed
    if unknown:
        raise InputError(f"unknown {name} option(s): {', '.join(sorted(unknown))}")
    return dict(sec)


def _emit(payload, out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)


def _human(ctx: click.Context, text: str) -> None:
    if not ctx.obj.get("quiet"):
        click.echo(text, err=True)


def _aligned(rows: list[list]) -> str:
    cells = [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
    return "\n".join(
        "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells
    )


def _report_text(report: MetricsReport) -> str:
    d = report.to_dict()
    rows = [["label", "precision", "recall", "f1", "support"]]
    for s in d["per_class"]:
        rows.append([s["label"], f"{s['precision']:.2f}", f"{s['recall']:.2f}", f"{s['f1']:.2f}", s["support"]])
    rows.append([d["headline"], f"{d['precision']:.2f}", f"{d['recall']:.2f}", f"{d['f1']:.2f}", d["support"]])
    return _aligned(rows)


def _skew_text(table: dict) -> str:
    rows = [["regime", "non-triggers", "triggers", "ratio"]]
    for name in ("original", "setting_1", "setting_2"):
        r = table[name]
        rows.append([name, r["count_0"], r["count_1"], r["ratio"]])
    return _aligned(rows)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON file with train/erc/efr/encoder option sections.")
@click.option("--quiet", is_flag=True, help="Suppress human-readable output on stderr.")
@click.pass_context
def cli(ctx: click.Context, config_path: str | None, quiet: bool) -> None:
    """Emotion and trigger analysis for multi-party dialogues."""
    ctx.obj = {"config": _load_config(config_path), "quiet": quiet}


@cli.command()
@click.option("--task", type=click.IntRange(1, 3), required=True, help="Dataset task id.")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ptz", is_flag=True, help="Include the three-regime trigger-skew table.")
@click.option("--window", type=click.IntRange(1), default=5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def stats(ctx, task, data, ptz, window, out):
    """Dataset statistics as JSON; --ptz adds label-skew regimes."""
    corpus = load_corpus(data, task)
    payload = dataset_stats(corpus).to_dict()
    rows = [[k, v] for k, v in payload.items() if k != "label_histogram"]
    text = _aligned(rows)
    if ptz:
        payload["skew"] = skew_table(corpus, window)
        text += "\n\n" + _skew_text(payload["skew"])
    _emit(payload, out)
    _human(ctx, text)


@cli.command()
@click.option("--task", type=click.IntRange(1, 3), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cache", type=click.Path(dir_okay=False), required=True)
@click.option("--provider", default=None, help="Encoder provider (default stub).")
@click.option("--model", default=None, help="Provider model name.")
@click.option("--dim", type=click.IntRange(1), default=None)
@click.option("--pooling", default=None)
@click.pass_context
def embed(ctx, task, data, cache, provider, model, dim, pooling):
    """Encode every utterance into the embedding cache."""
    corpus = load_corpus(data, task)
    cfg = EncoderConfig.for_task(task, provider or "stub")
    over = _section(ctx.obj["config"], "encoder", _ENC_KEYS)
    for name, value in (("provider", provider), ("model", model), ("dim", dim), ("pooling", pooling)):
        if value is not None:
            over[name] = value
    if over.get("provider") and not over.get("model"):
        over.setdefault("model", f"{over['provider']}-{over.get('dim', cfg.dim)}")
    cfg = replace(cfg, **over)
    table = encode_corpus(corpus, cfg, cache)
    _emit(
        {
            "cache": cache,
            "keys": len(table.vectors),
            "dim": cfg.dim,
            "provider": cfg.provider,
            "model": cfg.model,
        },
        None,
    )
    _human(ctx, f"encoded {len(table.vectors)} utterances into {cache}")


def _train_cfg(ctx, task: int, seed: int, **cli_overrides) -> TrainConfig:
    over = _section(ctx.obj["config"], "train", _TRAIN_KEYS)
    for name, value in cli_overrides.items():
        if value is not None:
            over[name] = value
    over["seed"] = seed
    return TrainConfig.for_task(task, **over)


def _train_summary(out: str, result) -> dict:
    return {
        "checkpoint": out,
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_metric": round(result.best_metric, 6),
    }


@cli.command("train-erc")
@click.option("--task", type=click.IntRange(1, 3), default=1, show_default=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cache", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--epochs", type=click.IntRange(1), default=None)
@click.option("--batch-size", type=click.IntRange(1), default=None)
@click.option("--lr", type=float, default=None)
@click.pass_context
def train_erc_cmd(ctx, task, data, cache, out, seed, epochs, batch_size, lr):
    """Train the emotion classifier and write a checkpoint."""
    corpus = load_corpus(data, task)
    table = table_for(corpus, task, cache)
    tcfg = _train_cfg(ctx, task, seed, epochs=epochs, batch_size=batch_size, lr=lr)
    erc_over = _section(ctx.obj["config"], "erc", _ERC_KEYS)
    vocab = build_speaker_vocab(corpus)
    model_cfg = None
    if erc_over:
        model_cfg = ERCConfig(
            input_dim=table.dim + vocab.k, num_classes=len(corpus.label_set), **erc_over
        )
    log = None if ctx.obj.get("quiet") else sys.stderr
    result = train_erc(corpus, table, tcfg, model_cfg, vocab, log)
    save_checkpoint(out, "erc", result.model.config, tcfg, result.labels, result.vocab, result.model)
    _emit(_train_summary(out, result), None)


@cli.command("train-efr")
@click.option("--task", type=click.IntRange(2, 3), default=2, show_default=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cache", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--epochs", type=click.IntRange(1), default=None)
@click.option("--batch-size", type=click.IntRange(1), default=None)
@click.option("--lr", type=float, default=None)
@click.option("--ptz-mask", type=click.Choice(["on", "off"]), default="off", show_default=True,
              help="Restrict the training loss to trigger-zone positions.")
@click.pass_context
def train_efr_cmd(ctx, task, data, cache, out, seed, epochs, batch_size, lr, ptz_mask):
    """Train the trigger detector and write a checkpoint."""
    corpus = load_corpus(data, task)
    table = table_for(corpus, task, cache)
    tcfg = _train_cfg(
        ctx, task, seed, epochs=epochs, batch_size=batch_size, lr=lr,
        restrict_to_ptz=True if ptz_mask == "on" else None,
    )
    efr_over = _section(ctx.obj["config"], "efr", _EFR_KEYS)
    vocab = build_speaker_vocab(corpus)
    model_cfg = None
    if efr_over:
        model_cfg = EFRConfig(
            input_dim=table.dim + vocab.k + len(corpus.label_set),
            num_emotions=len(corpus.label_set),
            **efr_over,
        )
    log = None if ctx.obj.get("quiet") else sys.stderr
    result = train_efr(corpus, table, tcfg, model_cfg, vocab, log)
    save_checkpoint(out, "efr", result.model.config, tcfg, result.labels, result.vocab, result.model)
    _emit(_train_summary(out, result), None)


@cli.command("predict-erc")
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cache", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--task", type=click.IntRange(1, 3), default=None,
              help="Defaults to the task recorded in the checkpoint.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def predict_erc_cmd(ctx, ckpt, data, cache, task, out):
    """Per-utterance emotion labels as JSON, aligned to the input episodes."""
    ckpt_data, model = load_typed_checkpoint(ckpt, "erc")
    train_cfg = ckpt_data.train_config or {}
    task = task or train_cfg.get("task_id") or 1
    corpus = load_corpus(data, task)
    table = table_for(corpus, task, cache)
    check_feature_width(ckpt_data, table)
    preds = predict_erc(
        model, corpus.dialogues, table, ckpt_data.vocab, ckpt_data.labels,
        seq_len=ckpt_data.model_config.get("seq_len"),
    )
    _emit([{"episode": d.id, "emotions": p} for d, p in zip(corpus.dialogues, preds)], out)
    _human(ctx, f"predicted emotions for {len(preds)} episodes")


@cli.command("predict-efr")
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cache", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--task", type=click.IntRange(1, 3), default=None)
@click.option("--ptz-mask", type=click.Choice(["on", "off"]), default="on", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def predict_efr_cmd(ctx, ckpt, data, cache, task, ptz_mask, out):
    """Per-episode binary trigger lists as JSON; positions before the
    window are always 0."""
    ckpt_data, model = load_typed_checkpoint(ckpt, "efr")
    train_cfg = ckpt_data.train_config or {}
    task = task or train_cfg.get("task_id") or 2
    corpus = load_corpus(data, task)
    table = table_for(corpus, task, cache)
    check_feature_width(ckpt_data, table)
    preds = predict_efr(
        model, corpus, table, ckpt_data.vocab, ckpt_data.labels, use_ptz=ptz_mask == "on"
    )
    payload = [
        {"episode": p.dialogue_id, "triggers": [0] * p.window_offset + list(p.decisions)}
        for p in preds
    ]
    _emit(payload, out)
    _human(ctx, f"predicted triggers for {len(preds)} episodes")


@cli.command("eval")
@click.option("--task", type=click.IntRange(1, 3), required=True)
@click.option("--gold", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--pred", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ptz-mask", type=click.Choice(["on", "off"]), default="off", show_default=True,
              help="Mask predicted triggers outside each episode's trigger zone.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def eval_cmd(ctx, task, gold, pred, ptz_mask, out):
    """Score a prediction file against gold episodes."""
    corpus = load_corpus(gold, task)
    try:
        entries = json.loads(Path(pred).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"prediction file is not valid JSON: {exc}") from exc
    if task == 1:
        report = score_emotion_entries(corpus, entries)
    else:
        report = score_trigger_entries(corpus, entries, ptz_mask == "on")
    _emit(report.to_dict(), out)
    _human(ctx, _report_text(report))


@cli.command()
@click.option("--task", type=click.IntRange(1, 3), required=True)
@click.option("--kind", type=click.Choice(["neutral", "rule"]), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def baseline(ctx, task, kind, data, out):
    """Score a no-learning baseline: constant neutral or previous-utterance."""
    corpus = load_corpus(data, task)
    report = neutral_baseline(corpus) if kind == "neutral" else rule_based_baseline(corpus)
    _emit(report.to_dict(), out)
    _human(ctx, _report_text(report))


@cli.command("ablate-ptz")
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cache", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--task", type=click.IntRange(1, 3), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def ablate_ptz_cmd(ctx, ckpt, data, cache, task, out):
    """Evaluate a trigger checkpoint with and without zone masking."""
    ckpt_data, model = load_typed_checkpoint(ckpt, "efr")
    train_cfg = ckpt_data.train_config or {}
    task = task or train_cfg.get("task_id") or 2
    corpus = load_corpus(data, task)
    table = table_for(corpus, task, cache)
    check_feature_width(ckpt_data, table)
    preds_off = predict_efr(model, corpus, table, ckpt_data.vocab, ckpt_data.labels, use_ptz=False)
    preds_on = predict_efr(model, corpus, table, ckpt_data.vocab, ckpt_data.labels, use_ptz=True)
    y_true, off = expand_window_predictions(corpus, preds_off)
    _, on = expand_window_predictions(corpus, preds_on)
    ab = ablate_ptz(y_true, off, on)
    payload = ab.to_dict()
    payload["reports"] = {
        "without_mask": efr_report(y_true, off).to_dict(),
        "with_mask": efr_report(y_true, on).to_dict(),
    }
    _emit(payload, out)
    _human(ctx, _aligned([
        ["f1 without mask", payload["f1_without_mask"]],
        ["f1 with mask", payload["f1_with_mask"]],
        ["delta", payload["delta"]],
        ["masked positives", payload["masked_positives"]],
    ]))


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    try:
        import uvicorn
    except ImportError as exc:
        raise FlipkitError("uvicorn is not installed; install the 'serve' extra") from exc
    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False, prog_name="flipkit")
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 2
    except FlipkitError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except Exception as exc:  # the CLI boundary reports failures, not tracebacks
        click.echo(f"internal error: {exc}", err=True)
        return 2
