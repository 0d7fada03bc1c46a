import json
import random

import numpy as np
import pytest

from flipkit.corpus import Corpus, load_episodes, make_dialogue
from flipkit.embed import EncoderConfig, encode_corpus
from flipkit.ptz import zone_start

SPEAKERS = ["Ava", "Ben", "Cara", "Dev", "Eli", "Fay", "Gus", "Hana"]
EMOTIONS = ["anger", "joy", "neutral", "sadness", "surprise"]


def random_episode(rng: random.Random, i: int, n_speakers=3, min_len=2, max_len=9,
                   ptz_only_triggers=False) -> dict:
    """One raw episode dict; triggers are PTZ-consistent when asked, so that
    zone masking can only remove false positives."""
    n = rng.randint(min_len, max_len)
    pool = SPEAKERS[:n_speakers]
    speakers = [rng.choice(pool) for _ in range(n)]
    emotions = [rng.choice(EMOTIONS) for _ in range(n)]
    texts = [f"utterance {i}-{j} {rng.choice('abcdefgh')}{rng.randint(0, 99)}" for j in range(n)]
    triggers = [0.0] * n
    if ptz_only_triggers:
        lo = zone_start(speakers, n - 1)
        k = rng.randint(1, max(1, min(2, n - lo)))
        for pos in rng.sample(range(lo, n), k):
            triggers[pos] = 1.0
    else:
        for pos in rng.sample(range(n), rng.randint(1, min(2, n))):
            triggers[pos] = 1.0
    return {
        "episode": f"ep{i}",
        "speakers": speakers,
        "utterances": texts,
        "emotions": emotions,
        "triggers": triggers,
    }


def make_corpus(n=10, seed=0, task=2, **episode_kwargs) -> Corpus:
    rng = random.Random(seed)
    episodes = [random_episode(rng, i, **episode_kwargs) for i in range(n)]
    return load_episodes(episodes, task)


def write_corpus_file(path, n=10, seed=0, **episode_kwargs) -> None:
    rng = random.Random(seed)
    episodes = [random_episode(rng, i, **episode_kwargs) for i in range(n)]
    path.write_text(json.dumps(episodes), encoding="utf-8")


def small_table(corpus: Corpus, dim=16):
    """Deterministic stub embeddings at a test-friendly width, no cache file."""
    cfg = EncoderConfig(provider="stub", model=f"stub-{dim}", dim=dim)
    return encode_corpus(corpus, cfg, None)


def hand_dialogue(speakers, emotions=None, triggers=None, dialogue_id="d0"):
    texts = [f"t{i}" for i in range(len(speakers))]
    return make_dialogue(dialogue_id, speakers, texts, emotions, triggers)


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture
def corpus10():
    return make_corpus(n=10, seed=3)
