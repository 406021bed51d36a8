"""Pairwise merging of single-hop QA groups into multi-hop samples, and
assembly of final padded training samples.

Groups larger than two merge by left fold: merge(q1, q2), then merge(result,
q3), and so on. Any failed pairwise merge aborts the whole chain; no partial
multi-hop sample is emitted. Assembly pads the gold chunks with distractor
documents up to the target token budget and shuffles gold positions
uniformly under the run seed.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import prompts
from .corpus import Chunk, Corpus, sample_padding_docs
from .gateway import ChatRequest, Gateway
from .sampling import QuestionGroup
from .singlehop import SingleHopQA

MAX_REPROMPTS = 2


class MergedPairParseError(ValueError):
    """No JSON object with both 'question' and 'answer' keys was found."""


class MergeError(RuntimeError):
    """A pairwise merge failed after retries; the chain is dropped."""


@dataclass(frozen=True)
class MergeOptions:
    with_documents: bool = False
    with_rationale: bool = False
    language: str = "en"

    def __post_init__(self) -> None:
        if self.language not in ("en", "zh"):
            raise ValueError(f"unknown language {self.language!r}")


@dataclass(frozen=True)
class MultiHopQA:
    id: str
    question: str
    answer: str
    hop_count: int
    lineage: tuple[str, ...]
    source_doc_ids: frozenset[str]
    verdict: dict | None = None

    def __post_init__(self) -> None:
        if not self.question or not self.answer:
            raise ValueError("question and answer must be non-empty")
        if self.hop_count != len(self.lineage):
            raise ValueError("hop_count must equal lineage length")
        if self.hop_count < 2:
            raise ValueError("hop_count must be >= 2")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "answer": self.answer,
            "hop_count": self.hop_count,
            "lineage": list(self.lineage),
            "source_doc_ids": sorted(self.source_doc_ids),
            "verdict": self.verdict,
        }

    @classmethod
    def from_record(cls, record: dict) -> "MultiHopQA":
        return cls(
            id=record["id"],
            question=record["question"],
            answer=record["answer"],
            hop_count=record["hop_count"],
            lineage=tuple(record["lineage"]),
            source_doc_ids=frozenset(record["source_doc_ids"]),
            verdict=record.get("verdict"),
        )


@dataclass(frozen=True)
class TrainingSample:
    id: str
    context: tuple[dict, ...]  # ordered {doc_id, text} entries, gold + padding
    instruction: str
    response: str
    meta: dict

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "context": list(self.context),
            "instruction": self.instruction,
            "response": self.response,
            "meta": self.meta,
        }

    @classmethod
    def from_record(cls, record: dict) -> "TrainingSample":
        return cls(
            id=record["id"],
            context=tuple(record["context"]),
            instruction=record["instruction"],
            response=record["response"],
            meta=record["meta"],
        )


_WS = re.compile(r"\s+")


def _flatten(value: str) -> str:
    # The merge prompt forbids line breaks; normalize instead of rejecting.
    return _WS.sub(" ", str(value)).strip()


def parse_merged(raw: str) -> tuple[str, str]:
    """First JSON object carrying both 'question' and 'answer' (fences are
    stripped, extra keys ignored, embedded line breaks normalized to spaces)."""
    text = raw.replace("```json", " ").replace("```", " ")
    decoder = json.JSONDecoder()
    i = 0
    while True:
        start = text.find("{", i)
        if start < 0:
            break
        try:
            obj, end = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            i = start + 1
            continue
        if isinstance(obj, dict) and "question" in obj and "answer" in obj:
            question = _flatten(obj["question"])
            answer = _flatten(obj["answer"])
            if question and answer:
                return question, answer
        i = start + max(end - start, 1)
    raise MergedPairParseError("no JSON object with question/answer keys found")


def _format_qa(question: str, answer: str) -> str:
    return f"Question: {question}\nAnswer: {answer}"


def merge_pair(
    qa1: tuple[str, str],
    qa2: tuple[str, str],
    opts: MergeOptions,
    gateway: Gateway,
    documents: Sequence[str] | None = None,
    temperature: float = 0.7,
    request_tag: str = "mqma.merge",
    override_dir: str | None = None,
) -> tuple[str, str]:
    """Merge two (question, answer) pairs into one; raises MergeError after
    exhausting re-prompts."""
    for q, a in (qa1, qa2):
        if not q or not a:
            raise ValueError("both QA pairs must be non-empty")
    prompt = prompts.merge_prompt(
        _format_qa(*qa1),
        _format_qa(*qa2),
        language=opts.language,
        with_rationale=opts.with_rationale,
        documents=documents if opts.with_documents else None,
        override_dir=override_dir,
    )
    for _ in range(1 + MAX_REPROMPTS):
        raw = gateway.chat(
            ChatRequest.user(prompt, temperature=temperature, request_tag=request_tag)
        ).text
        try:
            question, answer = parse_merged(raw)
        except MergedPairParseError:
            continue
        if opts.with_rationale and not re.match(r"\s*(Reasoning|推理)\s*[::：]", answer):
            continue
        return question, answer
    raise MergeError("merged output unparseable after re-prompts")


def merge_chain(
    group: QuestionGroup,
    qas_by_id: Mapping[str, SingleHopQA],
    opts: MergeOptions,
    gateway: Gateway,
    chunks_by_doc: Mapping[str, str] | None = None,
    temperature: float = 0.7,
    override_dir: str | None = None,
) -> MultiHopQA:
    """Left-fold merge of a question group into one MultiHopQA.

    A |group| of n costs n-1 merge calls; any failure raises MergeError and
    the group is dropped with that reason.
    """
    if len(group.qa_ids) < 2:
        raise ValueError("group must contain at least 2 questions")
    qas = [qas_by_id[qa_id] for qa_id in group.qa_ids]

    def docs_for(a_doc: str, b_doc: str) -> list[str] | None:
        if not opts.with_documents or chunks_by_doc is None:
            return None
        return [chunks_by_doc[a_doc], chunks_by_doc[b_doc]]

    merged = (qas[0].question, qas[0].answer)
    merged_docs = qas[0].doc_id
    for qa in qas[1:]:
        merged = merge_pair(
            merged,
            (qa.question, qa.answer),
            opts,
            gateway,
            documents=docs_for(merged_docs, qa.doc_id),
            temperature=temperature,
            override_dir=override_dir,
        )
        merged_docs = qa.doc_id
    digest = hashlib.sha256("+".join(group.qa_ids).encode()).hexdigest()[:10]
    return MultiHopQA(
        id=f"mh-{digest}",
        question=merged[0],
        answer=merged[1],
        hop_count=len(qas),
        lineage=tuple(group.qa_ids),
        source_doc_ids=frozenset(qa.doc_id for qa in qas),
    )


def _sample_rng(seed: int, sample_id: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}|{sample_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def assemble_sample(
    mhqa: MultiHopQA,
    corpus: Corpus,
    target_tokens: int,
    seed: int,
    gold_chunks: Mapping[str, Chunk] | None = None,
) -> TrainingSample:
    """Pad the gold documents to the target context length.

    Gold entries are the generation chunks (or full documents when no chunk
    map is given); padding documents fill up to target_tokens without ever
    exceeding it, stopping within one document of the target unless the
    eligible pool runs dry (then the sample is flagged under_fill). Context
    order is a seeded uniform shuffle; gold positions land in meta.
    """
    gold_ids = sorted(mhqa.source_doc_ids)
    gold_entries = []
    for doc_id in gold_ids:
        if gold_chunks is not None and doc_id in gold_chunks:
            chunk = gold_chunks[doc_id]
            gold_entries.append({"doc_id": doc_id, "text": chunk.text, "tokens": chunk.token_estimate})
        else:
            doc = corpus.get(doc_id)
            gold_entries.append({"doc_id": doc_id, "text": doc.text, "tokens": doc.token_estimate})
    gold_total = sum(e["tokens"] for e in gold_entries)
    if target_tokens < gold_total:
        raise ValueError(
            f"target_tokens {target_tokens} below gold total {gold_total} for {mhqa.id}"
        )

    languages = sorted({corpus.get(d).language for d in gold_ids})
    prefer = languages[0] if len(languages) == 1 else None
    selection = sample_padding_docs(
        corpus,
        exclude=set(gold_ids),
        target_tokens=target_tokens - gold_total,
        seed=_sample_rng(seed, mhqa.id).randrange(2**32),
        prefer_language=prefer,
    )
    padding_entries = []
    total = gold_total
    exhausted_pool = selection.under_filled
    for doc in selection.documents:
        if total + doc.token_estimate > target_tokens:
            exhausted_pool = False  # stopped by the budget, not the pool
            break
        padding_entries.append(
            {"doc_id": doc.id, "text": doc.text, "tokens": doc.token_estimate}
        )
        total += doc.token_estimate

    entries = gold_entries + padding_entries
    rng = _sample_rng(seed, f"shuffle|{mhqa.id}")
    rng.shuffle(entries)
    gold_positions = sorted(i for i, e in enumerate(entries) if e["doc_id"] in set(gold_ids))
    context = tuple({"doc_id": e["doc_id"], "text": e["text"]} for e in entries)
    meta = {
        "hop_count": mhqa.hop_count,
        "gold_positions": gold_positions,
        "domains": sorted({corpus.get(d).domain for d in gold_ids}),
        "language": prefer if prefer else "mixed",
        "token_estimate": total,
        "lineage": list(mhqa.lineage),
        "under_fill": exhausted_pool and total < target_tokens,
    }
    return TrainingSample(
        id=f"sample-{mhqa.id}",
        context=context,
        instruction=mhqa.question,
        response=mhqa.answer,
        meta=meta,
    )


def save_multihop(items: Sequence[MultiHopQA], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_record(), ensure_ascii=False) + "\n")


def load_multihop(path) -> list[MultiHopQA]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(MultiHopQA.from_record(json.loads(line)))
    return out


def save_samples(samples: Sequence[TrainingSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_record(), ensure_ascii=False) + "\n")


def load_samples(path) -> list[TrainingSample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(TrainingSample.from_record(json.loads(line)))
    return out
