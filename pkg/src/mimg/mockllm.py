"""Deterministic offline mock for chat and embedding backends.

Responses are pure functions of (prompt, behavior table, seed). The behavior
table maps prompt patterns, in declaration order, to either a literal template
(with ``{digest}`` interpolation) or a named builtin generator that emits
structured output matching the stage parsers. Hash-derived pseudo-content
keeps distinct prompts producing distinct questions and answers, which makes
full pipeline runs bit-reproducible yet non-degenerate.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import prompts
from .corpus import estimate_tokens
from .gateway import ChatRequest, ChatResponse, EmbeddingVector


def _hash64(text: str, seed: int, salt: str = "") -> int:
    digest = hashlib.sha256(f"{seed}\x00{salt}\x00{text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _digest8(text: str, seed: int, salt: str = "") -> str:
    return f"{_hash64(text, seed, salt):016x}"[:8]


def _extract_between(prompt: str, start_markers: Sequence[str], end_markers: Sequence[str]) -> str:
    for start in start_markers:
        idx = prompt.find(start)
        if idx < 0:
            continue
        begin = idx + len(start)
        end = len(prompt)
        for stop in end_markers:
            j = prompt.find(stop, begin)
            if 0 <= j < end:
                end = j
        return prompt[begin:end].strip()
    return ""


def _content_words(text: str, count: int, h: int) -> list[str]:
    words = re.findall(r"[0-9A-Za-z]{4,}|[一-鿿]{2,}", text)
    if not words:
        return []
    picked = []
    for i in range(count):
        picked.append(words[(h + i * 7919) % len(words)])
    return picked


def _wants_reasoning(prompt: str) -> bool:
    return "Reasoning:" in prompt or "推理：" in prompt or "推理过程" in prompt


def _gen_question_list(prompt: str, seed: int) -> str:
    h = _hash64(prompt, seed)
    doc = _extract_between(
        prompt,
        prompts.DOCUMENT_HEADERS,
        prompts.QUESTION_EXTRACTION_MARKERS,
    )
    n = 2 + h % 2
    words = _content_words(doc, n, h)
    questions = []
    for i in range(n):
        tag = _digest8(prompt, seed, f"q{i}")
        topic = words[i] if i < len(words) else f"item {tag}"
        questions.append(f"What does the document state about {topic} (ref {tag})?")
    return json.dumps(questions, ensure_ascii=False)


def _gen_answer_lines(prompt: str, seed: int) -> str:
    block = _extract_between(prompt, prompts.QUESTIONS_HEADERS, prompts.ANSWERS_HEADERS)
    questions = [ln for ln in block.splitlines() if ln.strip()]
    n = max(1, len(questions))
    lines = []
    for i in range(n):
        tag = _digest8(prompt, seed, f"a{i}")
        if _wants_reasoning(prompt):
            lines.append(
                f"Reasoning: the document links this to detail {tag}. Answer: finding {tag}."
            )
        else:
            lines.append(f"According to the document, the answer is finding {tag}.")
    return "\n".join(lines)


def _gen_qa_pairs(prompt: str, seed: int) -> str:
    h = _hash64(prompt, seed)
    doc = _extract_between(prompt, prompts.DOCUMENT_HEADERS, prompts.UNIFIED_GENERATION_MARKERS)
    n = 2 + h % 2
    words = _content_words(doc, n, h)
    pairs = []
    for i in range(n):
        tag = _digest8(prompt, seed, f"u{i}")
        topic = words[i] if i < len(words) else f"item {tag}"
        answer = f"The document reports finding {tag} about {topic}."
        if _wants_reasoning(prompt):
            answer = f"Reasoning: the passage discusses {topic}. Answer: finding {tag}."
        pairs.append({"question": f"What is said about {topic} (ref {tag})?", "answer": answer})
    return json.dumps(pairs, ensure_ascii=False)


def _gen_verdict(prompt: str, seed: int) -> str:
    h = _hash64(prompt, seed)
    quality = 8.0 + (h % 20) / 10.0  # in [8.0, 9.9]; never reaches 10
    similarity = (h >> 8) % 11
    rationale = (
        f"The question and answer are grounded in the provided documents "
        f"(trace {_digest8(prompt, seed, 'v')}); the reasoning chain is coherent."
    )
    verdict = {"in_document": True, "domain_similarity": similarity, "quality": quality}
    return f"{rationale}\n{json.dumps(verdict)}"


def _gen_binary_class(prompt: str, seed: int) -> str:
    h = _hash64(prompt, seed)
    return "1" if h % 10 < 7 else "0"


_TIME_RE = re.compile(r"\b(1[0-9]{3}|20[0-9]{2})\b|时间|日期|year|date|when", re.IGNORECASE)


def _gen_merge(prompt: str, seed: int) -> str:
    qa_block = _extract_between(
        prompt,
        ("The correct answers to two questions are as follows:", "两个问题的正确答案如下："),
        ("The synthesized question-answer pair is:", "合成的问答对为："),
    )
    t1 = _digest8(prompt, seed, "m1")
    t2 = _digest8(prompt, seed, "m2")
    words = _content_words(qa_block, 2, _hash64(prompt, seed, "mw"))
    a = words[0] if words else f"event {t1}"
    b = words[1] if len(words) > 1 else f"event {t2}"
    if _TIME_RE.search(qa_block):
        question = (
            f"Considering the order in which two events occur, which came first: "
            f"the event involving {a} or the event involving {b}?"
        )
        answer = (
            f"Reasoning: the first answer dates the event involving {a}, while the second "
            f"dates the event involving {b}; comparing the two shows {a} precedes {b}. "
            f"Answer: the event involving {a} came first."
        )
    else:
        question = f"Combining both facts, how does {a} relate to {b}?"
        answer = (
            f"Reasoning: one answer establishes {a} and the other establishes {b}; "
            f"together they connect through detail {t1}. "
            f"Answer: {a} relates to {b} via {t1}."
        )
    return json.dumps({"question": question, "answer": answer}, ensure_ascii=False)


def _gen_judge(prompt: str, seed: int) -> str:
    # The instruction sentence itself mentions the section markers, so slice
    # from the last stand-alone occurrences.
    ref_at = prompt.rfind("\n[[REFERENCE]]")
    pred_at = prompt.rfind("\n[[PREDICTION]]", 0, ref_at if ref_at >= 0 else len(prompt))
    tail_at = prompt.find("Finally, you should", max(ref_at, 0))
    prediction = prompt[pred_at + len("\n[[PREDICTION]]") : ref_at].strip() if pred_at >= 0 else ""
    reference = (
        prompt[ref_at + len("\n[[REFERENCE]]") : tail_at if tail_at >= 0 else len(prompt)].strip()
        if ref_at >= 0
        else ""
    )
    norm = lambda s: re.sub(r"\s+", " ", s).strip().lower()
    consistent = bool(norm(reference)) and norm(reference) in norm(prediction)
    short = " ".join(prediction.split()[:8]) if prediction else ""
    return json.dumps({"short_pred_answer": short, "predict_consistency": consistent})


def _gen_echo(prompt: str, seed: int) -> str:
    return f"ok {_digest8(prompt, seed)}"


BUILTINS: dict[str, Callable[[str, int], str]] = {
    "question_list": _gen_question_list,
    "answer_lines": _gen_answer_lines,
    "qa_pairs": _gen_qa_pairs,
    "verdict_json": _gen_verdict,
    "classify_binary": _gen_binary_class,
    "merge_json": _gen_merge,
    "judge_json": _gen_judge,
    "echo": _gen_echo,
}


@dataclass(frozen=True)
class BehaviorRule:
    pattern: str
    builtin: str | None = None
    template: str | None = None

    def __post_init__(self) -> None:
        if (self.builtin is None) == (self.template is None):
            raise ValueError("rule needs exactly one of builtin/template")
        if self.builtin is not None and self.builtin not in BUILTINS:
            raise ValueError(f"unknown builtin {self.builtin!r}")

    def render(self, prompt: str, seed: int) -> str:
        if self.builtin is not None:
            return BUILTINS[self.builtin](prompt, seed)
        return self.template.replace("{digest}", _digest8(prompt, seed))


@dataclass(frozen=True)
class BehaviorTable:
    rules: tuple[BehaviorRule, ...]
    default: BehaviorRule

    def match(self, prompt: str) -> BehaviorRule:
        for rule in self.rules:
            if re.search(rule.pattern, prompt):
                return rule
        return self.default

    @classmethod
    def from_dict(cls, data: dict) -> "BehaviorTable":
        rules = tuple(
            BehaviorRule(
                pattern=r["pattern"], builtin=r.get("builtin"), template=r.get("template")
            )
            for r in data.get("rules", [])
        )
        d = data.get("default")
        if d is None:
            raise ValueError("behavior table requires a default entry")
        default = BehaviorRule(pattern="", builtin=d.get("builtin"), template=d.get("template"))
        return cls(rules=rules, default=default)

    @classmethod
    def from_file(cls, path: str | Path) -> "BehaviorTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _marker_rules(markers: Sequence[str], builtin: str) -> list[BehaviorRule]:
    return [BehaviorRule(pattern=re.escape(m), builtin=builtin) for m in markers]


def default_behavior_table() -> BehaviorTable:
    rules: list[BehaviorRule] = []
    rules += _marker_rules(prompts.QUESTION_EXTRACTION_MARKERS, "question_list")
    rules += _marker_rules(prompts.ANSWER_GENERATION_MARKERS, "answer_lines")
    rules += _marker_rules(prompts.UNIFIED_GENERATION_MARKERS, "qa_pairs")
    rules += _marker_rules(prompts.CLASSIFICATION_MARKERS, "classify_binary")
    rules += _marker_rules(prompts.VERIFICATION_MARKERS, "verdict_json")
    rules += _marker_rules(prompts.MERGE_MARKERS, "merge_json")
    rules += _marker_rules((prompts.JUDGE_MARKER,), "judge_json")
    return BehaviorTable(rules=tuple(rules), default=BehaviorRule(pattern="", builtin="echo"))


def mock_generate(prompt: str, behavior_table: BehaviorTable, seed: int) -> str:
    """Pure function of (prompt, behavior_table, seed)."""
    return behavior_table.match(prompt).render(prompt, seed)


class MockChatBackend:
    """Offline chat backend; bit-reproducible for a fixed seed."""

    backend_id = "mock"

    def __init__(self, seed: int = 0, behavior_table: BehaviorTable | None = None):
        self.seed = seed
        self.table = behavior_table if behavior_table is not None else default_behavior_table()

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt = request.prompt_text
        text = mock_generate(prompt, self.table, self.seed)
        return ChatResponse(
            text=text,
            input_tokens=estimate_tokens(prompt),
            output_tokens=estimate_tokens(text),
            backend_id=self.backend_id,
        )


class MockEmbeddingBackend:
    """Offline embeddings: each text maps to a fixed pseudo-random vector."""

    backend_id = "mock-embed"

    def __init__(self, seed: int = 0, dimension: int = 768):
        self.seed = seed
        self.dimension = dimension

    def embed_texts(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        out = []
        for text in texts:
            rng = random.Random(_hash64(text, self.seed, "embed"))
            out.append(
                EmbeddingVector.from_values([rng.uniform(-1.0, 1.0) for _ in range(self.dimension)])
            )
        return out
