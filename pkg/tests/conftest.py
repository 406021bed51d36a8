from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from mimg.gateway import ChatRequest, ChatResponse, Gateway, UsageLedger
from mimg.mockllm import MockChatBackend, MockEmbeddingBackend

DOMAINS = (
    "books",
    "papers",
    "finance",
    "knowledge",
    "science",
    "law",
    "medicine",
    "technology",
    "web",
)

_EN_WORDS = (
    "harbor lighthouse merchant archive festival granite council treaty compass "
    "voyage orchard meridian lantern quarry chronicle steward bastion herald anthem frontier"
).split()
_ZH_WORDS = list("港口灯塔商人档案节日议会条约罗盘航行果园灯笼编年史管家先驱颂歌边疆山河铁路学堂")


class ScriptedBackend:
    """Chat backend replaying a fixed reply sequence (last reply repeats)."""

    backend_id = "scripted"

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        text = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        return ChatResponse(
            text=text, input_tokens=10, output_tokens=5, backend_id=self.backend_id
        )


def make_document_line(doc_id: str, language: str, rng: random.Random, sentences: int = 10) -> dict:
    parts = []
    for _ in range(sentences):
        year = rng.randint(1400, 2020)
        if language == "en":
            w = rng.sample(_EN_WORDS, 4)
            parts.append(f"In {year} the {w[0]} near the {w[1]} was rebuilt by the {w[2]} guild of {w[3]}.")
        else:
            w = "".join(rng.sample(_ZH_WORDS, 6))
            parts.append(f"{year}年，{w}在此重建。")
    sep = " " if language == "en" else ""
    return {
        "id": doc_id,
        "text": sep.join(parts),
        "domain": DOMAINS[rng.randrange(len(DOMAINS))],
        "language": language,
        "source": "fixture",
    }


def write_bilingual_corpus(path: Path, n_en: int = 30, n_zh: int = 30, seed: int = 42) -> Path:
    with path.open("w", encoding="utf-8") as fh:
        for i in range(n_en):
            rec = make_document_line(f"en{i:03d}", "en", random.Random(seed + i))
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        for i in range(n_zh):
            rec = make_document_line(f"zh{i:03d}", "zh", random.Random(seed + 1000 + i))
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


@pytest.fixture
def bilingual_corpus_file(tmp_path):
    return write_bilingual_corpus(tmp_path / "corpus.jsonl")


@pytest.fixture
def mock_gateway():
    def factory(seed: int = 0, dimension: int = 768, **kwargs) -> Gateway:
        return Gateway(
            chat_backend=MockChatBackend(seed=seed),
            embedding_backend=MockEmbeddingBackend(seed=seed, dimension=dimension),
            ledger=UsageLedger(),
            backoff_base=0.0,
            **kwargs,
        )

    return factory


@pytest.fixture
def scripted_gateway():
    def factory(replies, **kwargs) -> tuple[Gateway, ScriptedBackend]:
        backend = ScriptedBackend(replies)
        gateway = Gateway(
            chat_backend=backend,
            embedding_backend=MockEmbeddingBackend(),
            ledger=UsageLedger(),
            backoff_base=0.0,
            **kwargs,
        )
        return gateway, backend

    return factory
