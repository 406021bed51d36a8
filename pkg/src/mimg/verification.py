"""Quality verification: prompt assembly, verdict parsing, selection rules,
threshold calibration, and agreement metrics.

Two selection strategies are supported. Scoring thresholds a continuous
quality score in [0, 10] with a strict ``quality > threshold`` rule (the
default, threshold 8.5); classification maps a binary model output straight
to the decision. Malformed model output is re-prompted up to
``MAX_REPROMPTS`` times and then rejected with a machine-readable
parse-failure flag, so retention denominators always equal input counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from . import prompts
from .gateway import ChatRequest, Gateway

DEFAULT_CRITERIA = (
    "relevance to the document",
    "clarity",
    "factual accuracy",
    "logical coherence",
    "complexity",
)

DEFAULT_THRESHOLD = 8.5
MAX_REPROMPTS = 2

RATIONALE_INSTRUCTION = {
    "en": "- Before giving an annotation, you need to give your rationale.",
    "zh": "- 在给出标注之前，你需要给出你的理由。",
}
GUIDELINES_HEADER = {
    "en": "Annotation guidelines:",
    "zh": "标注指南：",
}

APPROVED = "Approved"
REJECTED = "Rejected"


class VerdictParseError(ValueError):
    """No JSON object could be located in the model output."""


class VerdictSchemaError(ValueError):
    """A verdict field is missing or has the wrong type."""

    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field_name = field_name


class VerdictRangeError(ValueError):
    """Quality score fell outside [0, 10]."""


@dataclass(frozen=True)
class VerificationConditions:
    criteria: tuple[str, ...] = DEFAULT_CRITERIA
    guidelines: str = ""
    want_rationale: bool = False

    def __post_init__(self) -> None:
        if not self.criteria:
            raise ValueError("criteria must be non-empty")


@dataclass(frozen=True)
class VerificationSample:
    sample_id: str
    question: str
    answer: str
    context_text: str
    language: str = "en"


@dataclass(frozen=True)
class Verdict:
    sample_id: str
    in_document: bool
    domain_similarity: float
    quality: float
    decision: str
    rationale_text: str = ""
    raw_response: str = ""
    parse_failure: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.quality <= 10:
            raise ValueError(f"quality {self.quality} outside [0, 10]")
        if self.decision not in (APPROVED, REJECTED):
            raise ValueError(f"invalid decision {self.decision!r}")

    @property
    def approved(self) -> bool:
        return self.decision == APPROVED

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "decision": self.decision,
            "quality": self.quality,
            "in_document": self.in_document,
            "domain_similarity": self.domain_similarity,
            "rationale_text": self.rationale_text,
            "parse_failure": self.parse_failure,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Verdict":
        return cls(
            sample_id=record["sample_id"],
            in_document=record["in_document"],
            domain_similarity=record["domain_similarity"],
            quality=record["quality"],
            decision=record["decision"],
            rationale_text=record.get("rationale_text", ""),
            parse_failure=record.get("parse_failure", False),
        )


@dataclass(frozen=True)
class LabeledSample:
    sample_id: str
    human_label: str  # "high_quality" | "low_quality"
    model_quality: float

    def __post_init__(self) -> None:
        if self.human_label not in ("high_quality", "low_quality"):
            raise ValueError(f"invalid label {self.human_label!r}")
        if not 0 <= self.model_quality <= 10:
            raise ValueError("model_quality outside [0, 10]")


def build_verification_prompt(
    sample: VerificationSample,
    conditions: VerificationConditions,
    template: str = "verification",
    override_dir: str | None = None,
) -> str:
    """Assemble the verification prompt: criteria in order, optional guidelines
    and rationale instruction, and the exact output-format trailer."""
    if not sample.question or not sample.answer:
        raise ValueError("sample needs a non-empty question and answer")
    body = prompts.load_template(template, sample.language, override_dir)
    sep = "；" if sample.language == "zh" else "; "
    rationale = RATIONALE_INSTRUCTION[sample.language] if conditions.want_rationale else ""
    guidelines_block = ""
    if conditions.guidelines:
        guidelines_block = (
            f"\n{GUIDELINES_HEADER[sample.language]}\n\n{conditions.guidelines}\n"
        )
    return prompts.fill(
        body,
        {
            "criteria": sep.join(conditions.criteria),
            "rationale_instruction": rationale,
            "guidelines_block": guidelines_block,
            "chunk": sample.context_text,
            "question": sample.question,
            "answer": sample.answer,
        },
    )


def _json_object_spans(raw: str) -> list[tuple[int, dict]]:
    decoder = json.JSONDecoder()
    spans = []
    i = 0
    while True:
        start = raw.find("{", i)
        if start < 0:
            break
        try:
            obj, end = decoder.raw_decode(raw, start)
        except json.JSONDecodeError:
            i = start + 1
            continue
        if isinstance(obj, dict):
            spans.append((start, obj))
        i = start + max(end - start, 1)
    return spans


def parse_verdict(raw: str) -> tuple[bool, float, float, str]:
    """Parse (in_document, domain_similarity, quality, rationale_text) from the
    last JSON object embedded in ``raw`` (code fences are fine).

    Out-of-range quality is an error, never clamped.
    """
    spans = _json_object_spans(raw)
    if not spans:
        raise VerdictParseError("no JSON object found in model output")
    start, obj = spans[-1]
    rationale = raw[:start].replace("```json", "").replace("```", "").strip()

    if "in_document" not in obj:
        raise VerdictSchemaError("in_document", "missing field 'in_document'")
    if not isinstance(obj["in_document"], bool):
        raise VerdictSchemaError("in_document", "field 'in_document' must be a boolean")
    for key in ("domain_similarity", "quality"):
        if key not in obj:
            raise VerdictSchemaError(key, f"missing field {key!r}")
        if isinstance(obj[key], bool) or not isinstance(obj[key], (int, float)):
            raise VerdictSchemaError(key, f"field {key!r} must be a number")
        if not math.isfinite(obj[key]):
            raise VerdictSchemaError(key, f"field {key!r} must be finite")
    quality = float(obj["quality"])
    if not 0 <= quality <= 10:
        raise VerdictRangeError(f"quality {quality} outside [0, 10]")
    return bool(obj["in_document"]), float(obj["domain_similarity"]), quality, rationale


def render_verdict(in_document: bool, domain_similarity: float, quality: float, rationale: str = "") -> str:
    """Inverse of parse_verdict for synthetic fixtures."""
    obj = {"in_document": in_document, "domain_similarity": domain_similarity, "quality": quality}
    prefix = f"{rationale}\n" if rationale else ""
    return f"{prefix}{json.dumps(obj)}"


def approve_by_score(quality: float, threshold: float) -> bool:
    """Strict-inequality selection: approve iff quality > threshold."""
    return quality > threshold


def _rejected_parse_failure(sample: VerificationSample, raw: str, reason: str) -> Verdict:
    return Verdict(
        sample_id=sample.sample_id,
        in_document=False,
        domain_similarity=0.0,
        quality=0.0,
        decision=REJECTED,
        rationale_text=reason,
        raw_response=raw,
        parse_failure=True,
    )


def verify_scoring(
    sample: VerificationSample,
    conditions: VerificationConditions,
    threshold: float,
    gateway: Gateway,
    temperature: float = 0.0,
    request_tag: str = "qva",
    override_dir: str | None = None,
) -> Verdict:
    """Score the sample and approve iff quality > threshold.

    An in_document == false verdict is rejected regardless of quality: an
    off-document sample cannot be valid long-context data.
    """
    if not 0 <= threshold <= 10:
        raise ValueError("threshold must be in [0, 10]")
    prompt = build_verification_prompt(sample, conditions, override_dir=override_dir)
    raw = ""
    for _ in range(1 + MAX_REPROMPTS):
        raw = gateway.chat(
            ChatRequest.user(prompt, temperature=temperature, request_tag=request_tag)
        ).text
        try:
            in_doc, similarity, quality, rationale = parse_verdict(raw)
        except (VerdictParseError, VerdictSchemaError, VerdictRangeError):
            continue
        decision = APPROVED if in_doc and approve_by_score(quality, threshold) else REJECTED
        return Verdict(
            sample_id=sample.sample_id,
            in_document=in_doc,
            domain_similarity=similarity,
            quality=quality,
            decision=decision,
            rationale_text=rationale,
            raw_response=raw,
        )
    return _rejected_parse_failure(sample, raw, "verdict unparseable after re-prompts")


def parse_binary_class(raw: str) -> int:
    """Extract the final standalone 0/1 digit from a classifier reply."""
    cleaned = raw.replace("```", " ").strip()
    if cleaned in ("0", "1"):
        return int(cleaned)
    matches = [tok for tok in cleaned.split() if tok in ("0", "1")]
    if not matches:
        raise VerdictParseError("no binary label found in classifier output")
    return int(matches[-1])


def verify_classification(
    sample: VerificationSample,
    conditions: VerificationConditions,
    gateway: Gateway,
    temperature: float = 0.0,
    request_tag: str = "qva",
    override_dir: str | None = None,
) -> Verdict:
    """Binary classification strategy: approve iff the classifier outputs 1.

    Quality is recorded as 10 * output so reports stay on one scale.
    """
    prompt = build_verification_prompt(
        sample, conditions, template="classification", override_dir=override_dir
    )
    raw = ""
    for _ in range(1 + MAX_REPROMPTS):
        raw = gateway.chat(
            ChatRequest.user(prompt, temperature=temperature, request_tag=request_tag)
        ).text
        try:
            label = parse_binary_class(raw)
        except VerdictParseError:
            continue
        return Verdict(
            sample_id=sample.sample_id,
            in_document=True,
            domain_similarity=0.0,
            quality=10.0 * label,
            decision=APPROVED if label == 1 else REJECTED,
            rationale_text="",
            raw_response=raw,
        )
    return _rejected_parse_failure(sample, raw, "classifier output unparseable after re-prompts")


def retention_rate(verdicts: Sequence[Verdict]) -> float:
    """Fraction of verdicts approved."""
    if not verdicts:
        raise ValueError("retention_rate needs at least one verdict")
    return sum(1 for v in verdicts if v.approved) / len(verdicts)


def precision(pred: Sequence, gold: Sequence, positive) -> float:
    """true_positives / predicted_positives."""
    if len(pred) != len(gold):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(gold)}")
    predicted_pos = sum(1 for p in pred if p == positive)
    if predicted_pos == 0:
        raise ValueError("precision undefined: zero predicted positives")
    true_pos = sum(1 for p, g in zip(pred, gold) if p == positive and g == positive)
    return true_pos / predicted_pos


def cohen_kappa(a: Sequence, b: Sequence) -> float:
    """Chance-corrected agreement between two label sequences."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("sequences must be non-empty")
    n = len(a)
    p_o = sum(1 for x, y in zip(a, b) if x == y) / n
    labels = set(a) | set(b)
    p_e = sum(
        (sum(1 for x in a if x == k) / n) * (sum(1 for y in b if y == k) / n) for k in labels
    )
    if p_e >= 1.0 - 1e-15:
        if p_o >= 1.0 - 1e-15:
            return 1.0
        raise ValueError("kappa undefined: expected agreement is 1 with disagreements present")
    return (p_o - p_e) / (1 - p_e)


def calibrate_threshold(
    labeled: Sequence[LabeledSample], grid: Sequence[float]
) -> tuple[float, float]:
    """Grid value maximizing precision of (model_quality > threshold) against
    the human labels; ties break toward the larger (stricter) threshold.

    Returns (threshold, precision at that threshold).
    """
    if not grid:
        raise ValueError("grid must be non-empty")
    if not any(s.human_label == "high_quality" for s in labeled):
        raise ValueError("labeled set needs at least one high_quality item")
    best: tuple[float, float] | None = None
    for theta in sorted(grid):
        approved = [s for s in labeled if approve_by_score(s.model_quality, theta)]
        if not approved:
            continue
        prec = sum(1 for s in approved if s.human_label == "high_quality") / len(approved)
        if best is None or prec > best[1] or (prec == best[1] and theta > best[0]):
            best = (theta, prec)
    if best is None:
        raise ValueError("no grid threshold approves any sample; use a finer grid")
    return best


def save_verdicts(verdicts: Sequence[Verdict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_record(), ensure_ascii=False) + "\n")


def load_verdicts(path) -> list[Verdict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Verdict.from_record(json.loads(line)))
    return out
