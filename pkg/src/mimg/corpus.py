"""Corpus loading, token budgeting, truncation, and padding-pool selection.

Documents arrive as UTF-8 JSON Lines with required keys id/text/domain/language
(optional source; unknown keys are preserved in per-document metadata). The
corpus is immutable after load and safe to share across workers.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

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

LANGUAGES = ("en", "zh")

REQUIRED_FIELDS = ("id", "text", "domain", "language")

# Codepoint ranges counted as one token each by the estimator: Han blocks,
# kana, CJK punctuation, and full-width forms.
_CJK_RANGES = (
    (0x3000, 0x303F),
    (0x3040, 0x30FF),
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
    (0xFF00, 0xFFEF),
)


class CorpusFormatError(ValueError):
    """Raised when a corpus file violates the JSON Lines contract."""


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def estimate_tokens(text: str) -> int:
    """Deterministic token estimate: 1 per CJK codepoint + ceil(other chars / 4).

    Monotone non-decreasing under concatenation, which the truncation and
    padding logic relies on.
    """
    cjk = sum(1 for ch in text if is_cjk(ch))
    other = len(text) - cjk
    return cjk + (other + 3) // 4


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    domain: str
    language: str
    token_estimate: int
    source: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"document {self.id!r} has empty text")
        if self.domain not in DOMAINS:
            raise ValueError(f"document {self.id!r} has unknown domain {self.domain!r}")
        if self.language not in LANGUAGES:
            raise ValueError(f"document {self.id!r} has unknown language {self.language!r}")
        if self.token_estimate < 0:
            raise ValueError(f"document {self.id!r} has negative token_estimate")


@dataclass(frozen=True)
class Chunk:
    """A prefix-contiguous slice of a document fitting a token budget."""

    doc_id: str
    text: str
    token_estimate: int
    offset: int = 0


class Corpus:
    """Ordered document collection with a bijective id -> position index."""

    def __init__(self, documents: Sequence[Document]):
        self.documents: list[Document] = list(documents)
        self.index: dict[str, int] = {}
        for pos, doc in enumerate(self.documents):
            if doc.id in self.index:
                raise CorpusFormatError(f"duplicate document id {doc.id!r}")
            self.index[doc.id] = pos

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.index

    def get(self, doc_id: str) -> Document:
        try:
            return self.documents[self.index[doc_id]]
        except KeyError:
            raise KeyError(f"unknown document id {doc_id!r}") from None

    def ids(self) -> list[str]:
        return [d.id for d in self.documents]


def _document_from_record(record: dict, line_no: int) -> Document:
    for key in REQUIRED_FIELDS:
        if key not in record:
            raise CorpusFormatError(f"line {line_no}: missing required field {key!r}")
    extra = {k: v for k, v in record.items() if k not in (*REQUIRED_FIELDS, "source")}
    try:
        return Document(
            id=str(record["id"]),
            text=record["text"],
            domain=record["domain"],
            language=record["language"],
            token_estimate=estimate_tokens(record["text"]),
            source=str(record.get("source", "")),
            metadata=extra,
        )
    except ValueError as exc:
        raise CorpusFormatError(f"line {line_no}: {exc}") from exc


def load_corpus(path: str | Path, expected_schema: Iterable[str] = REQUIRED_FIELDS) -> Corpus:
    """Load a JSON Lines corpus file, validating schema and id uniqueness.

    Errors name the offending line; duplicate ids name both lines.
    """
    path = Path(path)
    expected = tuple(expected_schema)
    documents: list[Document] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {line_no}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise CorpusFormatError(f"line {line_no}: record is not a JSON object")
            for key in expected:
                if key not in record:
                    raise CorpusFormatError(f"line {line_no}: missing required field {key!r}")
            doc = _document_from_record(record, line_no)
            if doc.id in seen:
                raise CorpusFormatError(
                    f"duplicate id {doc.id!r} on lines {seen[doc.id]} and {line_no}"
                )
            seen[doc.id] = line_no
            documents.append(doc)
    return Corpus(documents)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus back to JSON Lines; load(save(c)) reproduces c."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for doc in corpus:
            record = {
                "id": doc.id,
                "text": doc.text,
                "domain": doc.domain,
                "language": doc.language,
            }
            if doc.source:
                record["source"] = doc.source
            record.update(doc.metadata)
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def _is_cut_boundary(text: str, i: int) -> bool:
    # A cut between i-1 and i is allowed at whitespace or next to a CJK char,
    # so Latin words are never split mid-word.
    if i <= 0 or i >= len(text):
        return True
    before, after = text[i - 1], text[i]
    return before.isspace() or after.isspace() or is_cjk(before) or is_cjk(after)


def truncate_to_budget(doc: Document, budget: int) -> Chunk:
    """Longest document prefix whose token estimate fits ``budget``.

    The cut lands on a whitespace or CJK boundary when one exists; a single
    oversized Latin word degrades to a hard character cut so the budget is
    never exceeded.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if doc.token_estimate <= budget:
        return Chunk(doc_id=doc.id, text=doc.text, token_estimate=doc.token_estimate)

    # estimate_tokens is monotone in prefix length: binary search the largest
    # prefix that fits, then back off to the nearest boundary.
    lo, hi = 0, len(doc.text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if estimate_tokens(doc.text[:mid]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    cut = lo
    boundary = cut
    while boundary > 0 and not _is_cut_boundary(doc.text, boundary):
        boundary -= 1
    if boundary > 0:
        cut = boundary
    text = doc.text[:cut]
    return Chunk(doc_id=doc.id, text=text, token_estimate=estimate_tokens(text))


@dataclass(frozen=True)
class PaddingSelection:
    """Padding documents plus an under-fill flag when the pool ran short."""

    documents: tuple[Document, ...]
    under_filled: bool

    @property
    def total_tokens(self) -> int:
        return sum(d.token_estimate for d in self.documents)


def sample_padding_docs(
    corpus: Corpus,
    exclude: set[str],
    target_tokens: int,
    seed: int,
    prefer_language: str | None = None,
) -> PaddingSelection:
    """Seeded uniform sampling (without replacement) of distractor documents.

    Accumulates documents until the cumulative token estimate reaches
    ``target_tokens``. Documents matching ``prefer_language`` are drawn
    first; the remainder serve as a fallback pool. Deterministic given seed.
    """
    if target_tokens < 0:
        raise ValueError("target_tokens must be >= 0")
    if target_tokens == 0:
        return PaddingSelection(documents=(), under_filled=False)

    eligible = [d for d in corpus if d.id not in exclude]
    rng = random.Random(seed)
    if prefer_language is not None:
        preferred = [d for d in eligible if d.language == prefer_language]
        fallback = [d for d in eligible if d.language != prefer_language]
        rng.shuffle(preferred)
        rng.shuffle(fallback)
        ordered = preferred + fallback
    else:
        ordered = list(eligible)
        rng.shuffle(ordered)

    chosen: list[Document] = []
    total = 0
    for doc in ordered:
        if total >= target_tokens:
            break
        chosen.append(doc)
        total += doc.token_estimate
    return PaddingSelection(documents=tuple(chosen), under_filled=total < target_tokens)
