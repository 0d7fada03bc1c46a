"""HTTP wrapper around statistics, baselines, evaluation and prediction.

Episodes travel in request bodies using the same shape as the JSON corpus
files. Prediction endpoints read checkpoints (and optional embedding
caches) from the server's filesystem. Invalid inputs return 422 when the
schema is wrong and 400 when the domain rejects the content.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .corpus import dataset_stats, load_episodes
from .errors import FlipkitError, InputError
from .metrics import (
    neutral_baseline,
    rule_based_baseline,
    score_emotion_entries,
    score_trigger_entries,
)
from .ptz import skew_table
from .runner import (
    check_feature_width,
    load_typed_checkpoint,
    predict_erc,
    predict_efr,
    table_for,
)


class Episode(BaseModel):
    episode: str
    speakers: list[str]
    utterances: list[str]
    emotions: list[str] | None = None
    triggers: list[float | None] | None = None


class StatsRequest(BaseModel):
    task: int = Field(ge=1, le=3)
    episodes: list[Episode]
    ptz: bool = False
    window: int = Field(default=5, ge=1)


class BaselineRequest(BaseModel):
    task: int = Field(ge=1, le=3)
    kind: str = Field(pattern="^(neutral|rule)$")
    episodes: list[Episode]


class EvalRequest(BaseModel):
    task: int = Field(ge=1, le=3)
    gold: list[Episode]
    predictions: list[dict]
    ptz_mask: bool = False


class PredictRequest(BaseModel):
    checkpoint: str
    episodes: list[Episode]
    cache: str | None = None
    task: int | None = Field(default=None, ge=1, le=3)


class PredictEFRRequest(PredictRequest):
    ptz_mask: bool = True


class EmotionPrediction(BaseModel):
    episode: str
    emotions: list[str]


class TriggerPredictionOut(BaseModel):
    episode: str
    triggers: list[int]


def _corpus_from(episodes: list[Episode], task: int):
    return load_episodes([e.model_dump() for e in episodes], task)


def create_app() -> FastAPI:
    app = FastAPI(title="flipkit", version=__version__)

    @app.exception_handler(InputError)
    async def bad_input(_: Request, exc: InputError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FlipkitError)
    async def internal(_: Request, exc: FlipkitError) -> JSONResponse:
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/health")
    async def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/stats")
    async def stats(req: StatsRequest) -> dict:
        corpus = _corpus_from(req.episodes, req.task)
        payload = dataset_stats(corpus).to_dict()
        if req.ptz:
            payload["skew"] = skew_table(corpus, req.window)
        return payload

    @app.post("/baseline")
    async def baseline(req: BaselineRequest) -> dict:
        corpus = _corpus_from(req.episodes, req.task)
        report = neutral_baseline(corpus) if req.kind == "neutral" else rule_based_baseline(corpus)
        return report.to_dict()

    @app.post("/eval")
    async def eval_predictions(req: EvalRequest) -> dict:
        corpus = _corpus_from(req.gold, req.task)
        if req.task == 1:
            report = score_emotion_entries(corpus, req.predictions)
        else:
            report = score_trigger_entries(corpus, req.predictions, req.ptz_mask)
        return report.to_dict()

    @app.post("/predict/erc")
    async def predict_emotions(req: PredictRequest) -> list[EmotionPrediction]:
        ckpt, model = load_typed_checkpoint(req.checkpoint, "erc")
        train_cfg = ckpt.train_config or {}
        task = req.task or train_cfg.get("task_id") or 1
        corpus = _corpus_from(req.episodes, task)
        table = table_for(corpus, task, req.cache)
        check_feature_width(ckpt, table)
        preds = predict_erc(
            model, corpus.dialogues, table, ckpt.vocab, ckpt.labels,
            seq_len=ckpt.model_config.get("seq_len"),
        )
        return [
            EmotionPrediction(episode=d.id, emotions=p)
            for d, p in zip(corpus.dialogues, preds)
        ]

    @app.post("/predict/efr")
    async def predict_triggers(req: PredictEFRRequest) -> list[TriggerPredictionOut]:
        ckpt, model = load_typed_checkpoint(req.checkpoint, "efr")
        train_cfg = ckpt.train_config or {}
        task = req.task or train_cfg.get("task_id") or 2
        corpus = _corpus_from(req.episodes, task)
        table = table_for(corpus, task, req.cache)
        check_feature_width(ckpt, table)
        preds = predict_efr(model, corpus, table, ckpt.vocab, ckpt.labels, use_ptz=req.ptz_mask)
        return [
            TriggerPredictionOut(
                episode=p.dialogue_id, triggers=[0] * p.window_offset + list(p.decisions)
            )
            for p in preds
        ]

    return app


app = create_app()
