"""Single-hop question/answer generation over document chunks.

Two strategies: question_then_answer (two model calls, the default) and
unified (one call returning question-answer pairs). Outputs are capped at
``max_questions`` per chunk, deduplicated under whitespace/case/punctuation
normalization, and carry deterministic ids derived from (doc_id, position).
"""

from __future__ import annotations

import ast
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

from . import prompts
from .corpus import Chunk
from .gateway import ChatRequest, Gateway

logger = logging.getLogger(__name__)

MAX_REPROMPTS = 2

UNIFIED = "unified"
QUESTION_THEN_ANSWER = "question_then_answer"


class QuestionListParseError(ValueError):
    """Model output contained no parseable bracketed list of strings."""


@dataclass(frozen=True)
class GenerationStrategy:
    ordering: str = QUESTION_THEN_ANSWER
    want_rationale: bool = False
    max_questions: int = 3

    def __post_init__(self) -> None:
        if self.ordering not in (UNIFIED, QUESTION_THEN_ANSWER):
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if self.max_questions < 1:
            raise ValueError("max_questions must be >= 1")

    def to_record(self) -> dict:
        return {
            "ordering": self.ordering,
            "want_rationale": self.want_rationale,
            "max_questions": self.max_questions,
        }


@dataclass(frozen=True)
class SingleHopQA:
    id: str
    doc_id: str
    question: str
    answer: str
    rationale: str | None = None
    strategy: dict = field(default_factory=dict)
    verdict: dict | None = None

    def __post_init__(self) -> None:
        if not self.question or not self.answer:
            raise ValueError("question and answer must be non-empty")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "doc_id": self.doc_id,
            "question": self.question,
            "answer": self.answer,
            "rationale": self.rationale,
            "strategy": self.strategy,
            "verdict": self.verdict,
        }

    @classmethod
    def from_record(cls, record: dict) -> "SingleHopQA":
        return cls(
            id=record["id"],
            doc_id=record["doc_id"],
            question=record["question"],
            answer=record["answer"],
            rationale=record.get("rationale"),
            strategy=record.get("strategy", {}),
            verdict=record.get("verdict"),
        )


@dataclass(frozen=True)
class ChunkGeneration:
    """Per-chunk outcome: the QA pairs plus any failure/overflow notes."""

    qas: tuple[SingleHopQA, ...]
    failure: str | None = None
    unanswered: tuple[str, ...] = ()


def normalize_question(question: str) -> str:
    """Dedup key: lowercase, collapsed whitespace, trailing punctuation dropped."""
    q = re.sub(r"\s+", " ", question.strip().lower())
    return q.rstrip(".?!。？！…;；")


def _strip_fences(raw: str) -> str:
    fence = re.search(r"```(?:[a-zA-Z]+)?\s*\n?(.*?)```", raw, re.DOTALL)
    return fence.group(1) if fence else raw


def _bracketed_candidates(raw: str) -> list[str]:
    spans = []
    for start in (m.start() for m in re.finditer(r"\[", raw)):
        depth = 0
        for i in range(start, len(raw)):
            if raw[i] == "[":
                depth += 1
            elif raw[i] == "]":
                depth -= 1
                if depth == 0:
                    spans.append(raw[start : i + 1])
                    break
    return spans


def parse_question_list(raw: str) -> list[str]:
    """First bracketed list of strings in ``raw``, tolerating code fences and
    surrounding prose; order preserved."""
    text = _strip_fences(raw)
    for candidate in _bracketed_candidates(text):
        for loader in (json.loads, ast.literal_eval):
            try:
                parsed = loader(candidate)
            except (ValueError, SyntaxError):
                continue
            if isinstance(parsed, list) and all(isinstance(x, str) for x in parsed):
                return [x.strip() for x in parsed]
    raise QuestionListParseError("no bracketed list of strings found")


def _dedupe_and_cap(questions: Sequence[str], max_questions: int) -> list[str]:
    seen: set[str] = set()
    kept: list[str] = []
    for q in questions:
        q = q.strip()
        if not q:
            continue
        key = normalize_question(q)
        if key in seen:
            continue
        seen.add(key)
        kept.append(q)
    if len(kept) > max_questions:
        logger.info("question overflow: %d generated, keeping %d", len(kept), max_questions)
        kept = kept[:max_questions]
    return kept


def generate_questions(
    chunk: Chunk,
    strategy: GenerationStrategy,
    gateway: Gateway,
    language: str = "en",
    temperature: float = 0.7,
    request_tag: str = "sqga.questions",
    override_dir: str | None = None,
) -> tuple[list[str], str | None]:
    """Extract up to max_questions questions from a chunk.

    Returns (questions, failure_reason); after exhausting re-prompts the
    sequence is empty and the reason is set.
    """
    if not chunk.text:
        raise ValueError("chunk text must be non-empty")
    prompt = prompts.question_extraction_prompt(
        chunk.text, language, strategy.max_questions, override_dir
    )
    for _ in range(1 + MAX_REPROMPTS):
        raw = gateway.chat(
            ChatRequest.user(prompt, temperature=temperature, request_tag=request_tag)
        ).text
        try:
            questions = parse_question_list(raw)
        except QuestionListParseError:
            continue
        return _dedupe_and_cap(questions, strategy.max_questions), None
    return [], "question list unparseable after re-prompts"


_REASONING_SPLIT = re.compile(
    r"^\s*(?:Reasoning|推理)\s*[::：]\s*(?P<rationale>.*?)(?:Answer|答案)\s*[::：]\s*(?P<answer>.+)$",
    re.DOTALL,
)


def split_rationale(answer_line: str) -> tuple[str | None, str]:
    """Split 'Reasoning: ... Answer: ...' into (rationale, final answer)."""
    m = _REASONING_SPLIT.match(answer_line)
    if not m:
        return None, answer_line.strip()
    return m.group("rationale").strip(), m.group("answer").strip()


def _qa_id(doc_id: str, position: int) -> str:
    return f"{doc_id}#q{position}"


def generate_answers(
    chunk: Chunk,
    questions: Sequence[str],
    strategy: GenerationStrategy,
    gateway: Gateway,
    language: str = "en",
    temperature: float = 0.7,
    request_tag: str = "sqga.answers",
    override_dir: str | None = None,
) -> ChunkGeneration:
    """Answer the given questions; answers arrive one per line and are paired
    positionally. A persistent count mismatch pairs up to the shorter length
    and flags the remainder."""
    if not questions:
        raise ValueError("questions must be non-empty")
    prompt = prompts.answer_generation_prompt(
        chunk.text, questions, language, strategy.want_rationale, override_dir
    )
    answers: list[str] = []
    for _ in range(1 + MAX_REPROMPTS):
        raw = gateway.chat(
            ChatRequest.user(prompt, temperature=temperature, request_tag=request_tag)
        ).text
        answers = [ln.strip() for ln in raw.splitlines() if ln.strip()]
        if len(answers) == len(questions):
            break
    qas = []
    for i, (question, answer) in enumerate(zip(questions, answers)):
        rationale, final = split_rationale(answer) if strategy.want_rationale else (None, answer)
        qas.append(
            SingleHopQA(
                id=_qa_id(chunk.doc_id, i),
                doc_id=chunk.doc_id,
                question=question,
                answer=final,
                rationale=rationale,
                strategy=strategy.to_record(),
            )
        )
    unanswered = tuple(questions[len(answers) :])
    return ChunkGeneration(qas=tuple(qas), unanswered=unanswered)


def _parse_qa_pair_list(raw: str) -> list[dict]:
    text = _strip_fences(raw)
    for candidate in _bracketed_candidates(text):
        try:
            parsed = json.loads(candidate)
        except ValueError:
            continue
        if isinstance(parsed, list) and all(
            isinstance(x, dict) and "question" in x and "answer" in x for x in parsed
        ):
            return parsed
    raise QuestionListParseError("no parseable question-answer pair list found")


def generate_unified(
    chunk: Chunk,
    strategy: GenerationStrategy,
    gateway: Gateway,
    language: str = "en",
    temperature: float = 0.7,
    request_tag: str = "sqga.unified",
    override_dir: str | None = None,
) -> ChunkGeneration:
    """Single-call generation of question-answer pairs."""
    if not chunk.text:
        raise ValueError("chunk text must be non-empty")
    prompt = prompts.unified_generation_prompt(
        chunk.text, language, strategy.max_questions, strategy.want_rationale, override_dir
    )
    for _ in range(1 + MAX_REPROMPTS):
        raw = gateway.chat(
            ChatRequest.user(prompt, temperature=temperature, request_tag=request_tag)
        ).text
        try:
            pairs = _parse_qa_pair_list(raw)
        except QuestionListParseError:
            continue
        seen: set[str] = set()
        qas: list[SingleHopQA] = []
        for pair in pairs:
            question = str(pair["question"]).strip()
            answer = str(pair["answer"]).strip()
            if not question or not answer:
                continue
            key = normalize_question(question)
            if key in seen:
                continue
            seen.add(key)
            rationale, final = (
                split_rationale(answer) if strategy.want_rationale else (None, answer)
            )
            qas.append(
                SingleHopQA(
                    id=_qa_id(chunk.doc_id, len(qas)),
                    doc_id=chunk.doc_id,
                    question=question,
                    answer=final,
                    rationale=rationale,
                    strategy=strategy.to_record(),
                )
            )
            if len(qas) == strategy.max_questions:
                break
        return ChunkGeneration(qas=tuple(qas))
    return ChunkGeneration(qas=(), failure="pair list unparseable after re-prompts")


def generate_for_chunk(
    chunk: Chunk,
    strategy: GenerationStrategy,
    gateway: Gateway,
    language: str = "en",
    temperature: float = 0.7,
    override_dir: str | None = None,
) -> ChunkGeneration:
    """Dispatch on the configured ordering; both paths yield the same shape."""
    if strategy.ordering == UNIFIED:
        return generate_unified(
            chunk, strategy, gateway, language, temperature, override_dir=override_dir
        )
    questions, failure = generate_questions(
        chunk, strategy, gateway, language, temperature, override_dir=override_dir
    )
    if failure is not None:
        return ChunkGeneration(qas=(), failure=failure)
    if not questions:
        return ChunkGeneration(qas=())
    return generate_answers(
        chunk, questions, strategy, gateway, language, temperature, override_dir=override_dir
    )


def save_single_hop(qas: Sequence[SingleHopQA], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qa in qas:
            fh.write(json.dumps(qa.to_record(), ensure_ascii=False) + "\n")


def load_single_hop(path) -> list[SingleHopQA]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(SingleHopQA.from_record(json.loads(line)))
    return out
