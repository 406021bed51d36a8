from __future__ import annotations

import json

import pytest

from mimg.corpus import Chunk
from mimg.singlehop import (
    QUESTION_THEN_ANSWER,
    UNIFIED,
    GenerationStrategy,
    QuestionListParseError,
    SingleHopQA,
    generate_answers,
    generate_for_chunk,
    generate_questions,
    generate_unified,
    load_single_hop,
    normalize_question,
    parse_question_list,
    save_single_hop,
    split_rationale,
)

CHUNK = Chunk(doc_id="d1", text="In 1802 the lighthouse was rebuilt by the harbor guild.", token_estimate=14)


class TestParseQuestionList:
    def test_prose_prefix(self):
        assert parse_question_list('Extracted: ["a","b"]') == ["a", "b"]

    def test_fenced_block(self):
        assert parse_question_list('```json\n["x"]\n```') == ["x"]

    def test_no_brackets_is_error(self):
        with pytest.raises(QuestionListParseError):
            parse_question_list("no list to be found here")

    def test_single_quotes_tolerated(self):
        assert parse_question_list("['one', 'two']") == ["one", "two"]

    def test_empty_list(self):
        assert parse_question_list("[]") == []

    def test_order_preserved(self):
        assert parse_question_list('["z", "a", "m"]') == ["z", "a", "m"]

    def test_nested_prose_brackets_skipped(self):
        raw = 'notes [see above] then ["real", "list"]'
        assert parse_question_list(raw) == ["real", "list"]


class TestGenerateQuestions:
    def test_two_questions(self, scripted_gateway):
        gw, _ = scripted_gateway(['["Q1", "Q2"]'])
        questions, failure = generate_questions(CHUNK, GenerationStrategy(), gw)
        assert questions == ["Q1", "Q2"]
        assert failure is None

    def test_empty_list_is_not_an_error(self, scripted_gateway):
        gw, _ = scripted_gateway(["[]"])
        questions, failure = generate_questions(CHUNK, GenerationStrategy(), gw)
        assert questions == []
        assert failure is None

    def test_five_questions_capped_to_three(self, scripted_gateway):
        gw, _ = scripted_gateway([json.dumps([f"Q{i}" for i in range(5)])])
        questions, _ = generate_questions(CHUNK, GenerationStrategy(), gw)
        assert questions == ["Q0", "Q1", "Q2"]

    def test_duplicates_removed_after_normalization(self, scripted_gateway):
        gw, _ = scripted_gateway(['["What year?", "what  year", "Other?"]'])
        questions, _ = generate_questions(CHUNK, GenerationStrategy(), gw)
        assert questions == ["What year?", "Other?"]

    def test_unparseable_after_retries_flags_failure(self, scripted_gateway):
        gw, backend = scripted_gateway(["nonsense"])
        questions, failure = generate_questions(CHUNK, GenerationStrategy(), gw)
        assert backend.calls == 3
        assert questions == []
        assert failure is not None

    def test_empty_chunk_rejected(self, scripted_gateway):
        gw, _ = scripted_gateway(["[]"])
        with pytest.raises(ValueError):
            generate_questions(
                Chunk(doc_id="d", text="", token_estimate=0), GenerationStrategy(), gw
            )


class TestGenerateAnswers:
    def test_two_questions_two_lines(self, scripted_gateway):
        gw, _ = scripted_gateway(["Answer one.\nAnswer two."])
        result = generate_answers(CHUNK, ["Q1?", "Q2?"], GenerationStrategy(), gw)
        assert [qa.answer for qa in result.qas] == ["Answer one.", "Answer two."]
        assert result.unanswered == ()

    def test_count_mismatch_flags_remainder(self, scripted_gateway):
        gw, backend = scripted_gateway(["Only one line."])
        result = generate_answers(CHUNK, ["Q1?", "Q2?", "Q3?"], GenerationStrategy(), gw)
        assert backend.calls == 3  # retried, then aligned to shorter length
        assert len(result.qas) == 1
        assert result.unanswered == ("Q2?", "Q3?")

    def test_rationale_captured_separately(self, scripted_gateway):
        gw, _ = scripted_gateway(["Reasoning: the text says 1802. Answer: 1802."])
        strategy = GenerationStrategy(want_rationale=True)
        result = generate_answers(CHUNK, ["When?"], strategy, gw)
        qa = result.qas[0]
        assert qa.rationale == "the text says 1802."
        assert qa.answer == "1802."

    def test_ids_deterministic_from_doc_and_position(self, scripted_gateway):
        gw, _ = scripted_gateway(["a\nb"])
        result = generate_answers(CHUNK, ["Q1?", "Q2?"], GenerationStrategy(), gw)
        assert [qa.id for qa in result.qas] == ["d1#q0", "d1#q1"]

    def test_doc_id_links_to_source(self, scripted_gateway):
        gw, _ = scripted_gateway(["a"])
        result = generate_answers(CHUNK, ["Q?"], GenerationStrategy(), gw)
        assert result.qas[0].doc_id == CHUNK.doc_id


class TestUnified:
    def pairs(self, n):
        return json.dumps([{"question": f"Q{i}?", "answer": f"A{i}."} for i in range(n)])

    def test_three_pairs(self, scripted_gateway):
        gw, _ = scripted_gateway([self.pairs(3)])
        result = generate_unified(CHUNK, GenerationStrategy(ordering=UNIFIED), gw)
        assert len(result.qas) == 3
        assert result.failure is None

    def test_malformed_three_times_flags(self, scripted_gateway):
        gw, backend = scripted_gateway(["broken"])
        result = generate_unified(CHUNK, GenerationStrategy(ordering=UNIFIED), gw)
        assert backend.calls == 3
        assert result.qas == ()
        assert result.failure is not None

    def test_overflow_capped(self, scripted_gateway):
        gw, _ = scripted_gateway([self.pairs(6)])
        result = generate_unified(CHUNK, GenerationStrategy(ordering=UNIFIED), gw)
        assert len(result.qas) == 3

    def test_schema_equivalence_with_two_stage(self, mock_gateway):
        # same chunk through both orderings yields the same record shape
        gw = mock_gateway(seed=3)
        unified = generate_for_chunk(CHUNK, GenerationStrategy(ordering=UNIFIED), gw)
        staged = generate_for_chunk(CHUNK, GenerationStrategy(ordering=QUESTION_THEN_ANSWER), gw)
        for outcome in (unified, staged):
            assert outcome.qas, outcome
            for qa in outcome.qas:
                record = qa.to_record()
                assert set(record) == {
                    "id", "doc_id", "question", "answer", "rationale", "strategy", "verdict",
                }
                assert qa.doc_id == CHUNK.doc_id


class TestInvariants:
    def test_output_bounded_by_max_questions(self, mock_gateway):
        gw = mock_gateway(seed=0)
        for max_q in (1, 2, 3):
            outcome = generate_for_chunk(CHUNK, GenerationStrategy(max_questions=max_q), gw)
            assert len(outcome.qas) <= max_q

    def test_no_duplicate_questions_per_chunk(self, mock_gateway):
        gw = mock_gateway(seed=0)
        outcome = generate_for_chunk(CHUNK, GenerationStrategy(), gw)
        keys = [normalize_question(qa.question) for qa in outcome.qas]
        assert len(keys) == len(set(keys))

    def test_stage_reproducible_under_fixed_seed(self, mock_gateway):
        a = generate_for_chunk(CHUNK, GenerationStrategy(), mock_gateway(seed=9))
        b = generate_for_chunk(CHUNK, GenerationStrategy(), mock_gateway(seed=9))
        assert [qa.to_record() for qa in a.qas] == [qa.to_record() for qa in b.qas]


class TestNormalization:
    def test_lowercase_whitespace_punctuation(self):
        assert normalize_question("  What   Year?  ") == "what year"
        assert normalize_question("什么时间？") == "什么时间"

    def test_split_rationale_zh_markers(self):
        rationale, answer = split_rationale("推理：文中提到1802年。答案：1802年。")
        assert rationale == "文中提到1802年。"
        assert answer == "1802年。"

    def test_split_rationale_absent(self):
        rationale, answer = split_rationale("plain answer")
        assert rationale is None
        assert answer == "plain answer"


def test_strategy_validation():
    with pytest.raises(ValueError):
        GenerationStrategy(ordering="backwards")
    with pytest.raises(ValueError):
        GenerationStrategy(max_questions=0)


def test_single_hop_jsonl_round_trip(tmp_path):
    qas = [
        SingleHopQA(
            id=f"d1#q{i}", doc_id="d1", question=f"Q{i}?", answer=f"A{i}.",
            rationale="why" if i else None, strategy=GenerationStrategy().to_record(),
        )
        for i in range(3)
    ]
    path = tmp_path / "sh.jsonl"
    save_single_hop(qas, path)
    assert [q.to_record() for q in load_single_hop(path)] == [q.to_record() for q in qas]
