"""Prompt template registry keyed by (stage, language).

Templates are plain text files with ``{placeholder}`` slots filled by literal
substring replacement (never str.format), so the JSON braces inside the
template bodies survive untouched. A directory of override files can shadow
the shipped defaults.
"""

from __future__ import annotations

import re
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

_TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"

# Marker lines the mock backend keys its behavior table on. They must stay in
# sync with the template bodies; tests pin that.
QUESTION_EXTRACTION_MARKERS = ("Extract the questions contained in the above document", "请提取上述文档中包含的问题")
ANSWER_GENERATION_MARKERS = ("Generate answers to a given series of questions", "根据文档内容回答给定的一系列问题")
UNIFIED_GENERATION_MARKERS = ("Generate question-answer pairs from the above document", "根据上述文档生成问答对")
VERIFICATION_MARKERS = ("you need to annotate the generated questions", "对生成的问题、推理和答案进行标注")
CLASSIFICATION_MARKERS = ("output a single digit as the classification", "输出一位数字作为分类结果")
MERGE_MARKERS = ("synthesize up to one question-answer pair", "合成最多一个符合真实场景的问答对")
JUDGE_MARKER = "annotate whether the ``[[PREDICTION]]``"

DOCUMENT_HEADERS = ("The document content is as follows:", "文档内容如下：")
QUESTIONS_HEADERS = ("The problems are as follows:", "问题如下：")
ANSWERS_HEADERS = ("The corresponding answers are as follows:", "对应的答案如下：")

RATIONALE_ANSWER_CONDITION = {
    "en": '- For each answer, first give the reasoning process starting with "Reasoning:", then the final answer starting with "Answer:";',
    "zh": "- 每个答案先给出以“推理：”开头的推理过程，再给出以“答案：”开头的最终答案；",
}
RATIONALE_MERGE_CONDITION = {
    "en": "- The synthesized answer must begin with the reasoning process before stating the final answer;",
    "zh": "- 合成的答案必须先给出推理过程，再给出最终答案；",
}
MERGE_DOCUMENTS_HEADER = {
    "en": "The relevant documents are as follows:",
    "zh": "相关文档如下：",
}


class TemplateNotFoundError(FileNotFoundError):
    pass


@lru_cache(maxsize=None)
def load_template(stage: str, language: str, override_dir: str | None = None) -> str:
    name = f"{stage}.{language}.txt"
    if override_dir:
        candidate = Path(override_dir) / name
        if candidate.is_file():
            return candidate.read_text(encoding="utf-8")
    path = _TEMPLATE_DIR / name
    if not path.is_file():
        raise TemplateNotFoundError(f"no template for stage={stage!r} language={language!r}")
    return path.read_text(encoding="utf-8")


def fill(template: str, mapping: Mapping[str, str]) -> str:
    out = template
    for key, value in mapping.items():
        out = out.replace("{" + key + "}", value)
    # Optional blocks leave blank slots behind; keep paragraph gaps tidy.
    out = re.sub(r"\n{3,}", "\n\n", out)
    return out.strip("\n") + "\n"


def question_extraction_prompt(
    chunk_text: str, language: str = "en", max_questions: int = 3, override_dir: str | None = None
) -> str:
    template = load_template("question_extraction", language, override_dir)
    return fill(template, {"chunk": chunk_text, "max_questions": str(max_questions)})


def answer_generation_prompt(
    chunk_text: str,
    questions: Sequence[str],
    language: str = "en",
    want_rationale: bool = False,
    override_dir: str | None = None,
) -> str:
    template = load_template("answer_generation", language, override_dir)
    condition = RATIONALE_ANSWER_CONDITION[language] if want_rationale else ""
    return fill(
        template,
        {
            "chunk": chunk_text,
            "questions": "\n".join(questions),
            "rationale_condition": condition,
        },
    )


def unified_generation_prompt(
    chunk_text: str,
    language: str = "en",
    max_questions: int = 3,
    want_rationale: bool = False,
    override_dir: str | None = None,
) -> str:
    template = load_template("unified_generation", language, override_dir)
    condition = (RATIONALE_ANSWER_CONDITION[language] + "\n") if want_rationale else ""
    return fill(
        template,
        {
            "chunk": chunk_text,
            "max_questions": str(max_questions),
            "rationale_condition": condition,
        },
    )


def merge_prompt(
    qa1: str,
    qa2: str,
    language: str = "en",
    with_rationale: bool = False,
    documents: Sequence[str] | None = None,
    override_dir: str | None = None,
) -> str:
    template = load_template("merge", language, override_dir)
    condition = (RATIONALE_MERGE_CONDITION[language] + "\n") if with_rationale else ""
    documents_block = ""
    if documents:
        body = "\n\n".join(documents)
        documents_block = f"\n{MERGE_DOCUMENTS_HEADER[language]}\n\n{body}\n"
    return fill(
        template,
        {
            "qa1": qa1,
            "qa2": qa2,
            "rationale_condition": condition,
            "documents_block": documents_block,
        },
    )


def judge_prompt(question: str, prediction: str, reference: str, override_dir: str | None = None) -> str:
    template = load_template("judge", "en", override_dir)
    return fill(template, {"question": question, "predictions": prediction, "answer": reference})
